//! Output-token diversity.
//!
//! A layer's importance is the mean cosine distance between its output
//! tokens, measured within each modality (intra) and across each pair of
//! modalities (inter), then averaged over all present terms. Layers whose
//! outputs are spread out score high and will be pruned less.
//!
//! Distances are `1 − cos(Z_i, Z_j)` over unordered pairs with `i ≠ j`.
//! Zero rows are handled with a norm floor of `1e-12`, which makes them
//! orthogonal to everything (distance 1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{modality_groups, ModalityId, Span};
use crate::tensor::{dot_f64, norm_f64, Matrix};

pub const NORM_FLOOR: f64 = 1e-12;

/// Strict cosine distance; zero-norm inputs are an error so callers can
/// choose their own fallback.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm_f64(u), norm_f64(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine distance of a zero-norm vector".into()));
    }
    let cos = (dot_f64(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Rows scaled to unit length in f64 (floored norm).
#[derive(Debug, Clone)]
pub struct UnitRows {
    dim: usize,
    data: Vec<f64>,
}

impl UnitRows {
    pub fn new(z: &Matrix) -> Self {
        let mut data = Vec::with_capacity(z.len());
        for row in z.iter_rows() {
            let n = norm_f64(row).max(NORM_FLOOR);
            data.extend(row.iter().map(|&x| f64::from(x) / n));
        }
        Self { dim: z.cols(), data }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let cos: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
        (1.0 - cos.clamp(-1.0, 1.0)).max(0.0)
    }

    /// Full symmetric distance matrix, row-major `N × N`.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let n = self.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = self.distance(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        d
    }
}

/// How pairs are visited when averaging distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairSampling {
    #[default]
    Exhaustive,
    /// Draw `pairs` pairs uniformly with replacement. Falls back to the
    /// exhaustive mean whenever that would visit no more pairs.
    Sampled { pairs: usize, seed: u64 },
}

fn mean_intra(units: &UnitRows, idx: &[usize], sampling: PairSampling) -> Result<f64> {
    let n = idx.len();
    if n < 2 {
        return Err(Error::InsufficientTokens { needed: 2, got: n });
    }
    let total = n * (n - 1) / 2;
    match sampling {
        PairSampling::Sampled { pairs, seed } if pairs < total && pairs > 0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sum = 0.0;
            for _ in 0..pairs {
                let a = rng.gen_range(0..n);
                let mut b = rng.gen_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                sum += units.distance(idx[a], idx[b]);
            }
            Ok(sum / pairs as f64)
        }
        _ => {
            let mut sum = 0.0;
            for (p, &i) in idx.iter().enumerate() {
                for &j in &idx[p + 1..] {
                    sum += units.distance(i, j);
                }
            }
            Ok(sum / total as f64)
        }
    }
}

fn mean_inter(units: &UnitRows, a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientTokens {
            needed: 1,
            got: 0,
        });
    }
    let mut sum = 0.0;
    for &i in a {
        for &j in b {
            sum += units.distance(i, j);
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Mean pairwise distance among the rows of `z` listed in `idx`.
pub fn intra_diversity(z: &Matrix, idx: &[usize]) -> Result<f64> {
    intra_diversity_with(z, idx, PairSampling::Exhaustive)
}

pub fn intra_diversity_with(z: &Matrix, idx: &[usize], sampling: PairSampling) -> Result<f64> {
    mean_intra(&UnitRows::new(z), idx, sampling)
}

/// Mean distance over the full cross product of two row sets.
pub fn inter_diversity(z: &Matrix, a: &[usize], b: &[usize]) -> Result<f64> {
    mean_inter(&UnitRows::new(z), a, b)
}

/// Mean pairwise distance over every row, ignoring modality.
pub fn all_token_diversity(z: &Matrix) -> Result<f64> {
    let idx: Vec<usize> = (0..z.rows()).collect();
    intra_diversity(z, &idx)
}

/// Unweighted mean of every intra and inter term.
pub fn layer_importance(intra: &[IntraTerm], inter: &[InterTerm]) -> Result<f64> {
    let n = intra.len() + inter.len();
    if n == 0 {
        return Err(Error::Degenerate("no diversity terms available for this layer".into()));
    }
    let sum: f64 = intra.iter().map(|t| t.value).sum::<f64>() + inter.iter().map(|t| t.value).sum::<f64>();
    Ok(sum / n as f64)
}

/// Mean over tokens of `cos(x_in_i, x_out_i)`.
///
/// Block importance for depth pruning is `1 − similarity`: a block that
/// barely rotates its residual stream is redundant.
pub fn block_input_output_similarity(block_in: &Matrix, block_out: &Matrix) -> Result<f64> {
    if block_in.shape() != block_out.shape() {
        return Err(Error::Shape(format!(
            "block input {:?} vs output {:?}",
            block_in.shape(),
            block_out.shape()
        )));
    }
    if block_in.rows() == 0 {
        return Err(Error::InsufficientTokens { needed: 1, got: 0 });
    }
    let mut sum = 0.0;
    for (a, b) in block_in.iter_rows().zip(block_out.iter_rows()) {
        let denom = (dot_f64(a, a) * dot_f64(b, b)).sqrt().max(NORM_FLOOR * NORM_FLOOR);
        sum += (dot_f64(a, b) / denom).clamp(-1.0, 1.0);
    }
    Ok(sum / block_in.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraTerm {
    pub modality: ModalityId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterTerm {
    pub a: ModalityId,
    pub b: ModalityId,
    pub value: f64,
}

/// Which diversity summary becomes the layer importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// Mean of per-modality intra and pairwise inter terms.
    #[default]
    ModalityAware,
    /// Mean distance over all tokens regardless of modality.
    AllToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub intra: Vec<IntraTerm>,
    pub inter: Vec<InterTerm>,
    pub all_token: Option<f64>,
    pub mode: ImportanceMode,
    pub importance: f64,
}

impl DiversityStats {
    pub fn intra_of(&self, m: &ModalityId) -> Option<f64> {
        self.intra.iter().find(|t| t.modality == *m).map(|t| t.value)
    }

    pub fn inter_of(&self, a: &ModalityId, b: &ModalityId) -> Option<f64> {
        self.inter
            .iter()
            .find(|t| (t.a == *a && t.b == *b) || (t.a == *b && t.b == *a))
            .map(|t| t.value)
    }
}

#[derive(Debug, Clone, Default)]
struct RunningMean {
    sum: f64,
    count: usize,
}

impl RunningMean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Per-sample diversity terms of one layer, for a deterministic merge.
#[derive(Debug, Clone, Default)]
pub struct SampleDiversity {
    intra: Vec<(ModalityId, f64)>,
    inter: Vec<(ModalityId, ModalityId, f64)>,
    all_token: Option<f64>,
}

impl SampleDiversity {
    /// Terms whose span has too few tokens in this sample are skipped.
    pub fn compute(z: &Matrix, spans: &[Span], sampling: PairSampling) -> Self {
        let units = UnitRows::new(z);
        let groups = modality_groups(spans);
        let mut out = SampleDiversity::default();
        for (m, idx) in &groups {
            if let Ok(v) = mean_intra(&units, idx, sampling) {
                out.intra.push((m.clone(), v));
            }
        }
        for (p, (ma, ia)) in groups.iter().enumerate() {
            for (mb, ib) in &groups[p + 1..] {
                if let Ok(v) = mean_inter(&units, ia, ib) {
                    out.inter.push((ma.clone(), mb.clone(), v));
                }
            }
        }
        let all: Vec<usize> = (0..units.len()).collect();
        out.all_token = mean_intra(&units, &all, sampling).ok();
        out
    }
}

/// Averages terms sample by sample: each term's mean is taken over the
/// samples in which it exists.
#[derive(Debug, Clone, Default)]
pub struct DiversityAccumulator {
    intra: Vec<(ModalityId, RunningMean)>,
    inter: Vec<(ModalityId, ModalityId, RunningMean)>,
    all_token: RunningMean,
}

impl DiversityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, s: &SampleDiversity) {
        for (m, v) in &s.intra {
            match self.intra.iter_mut().find(|(k, _)| k == m) {
                Some((_, r)) => r.push(*v),
                None => {
                    let mut r = RunningMean::default();
                    r.push(*v);
                    self.intra.push((m.clone(), r));
                }
            }
        }
        for (a, b, v) in &s.inter {
            match self.inter.iter_mut().find(|(x, y, _)| x == a && y == b) {
                Some((_, _, r)) => r.push(*v),
                None => {
                    let mut r = RunningMean::default();
                    r.push(*v);
                    self.inter.push((a.clone(), b.clone(), r));
                }
            }
        }
        if let Some(v) = s.all_token {
            self.all_token.push(v);
        }
    }

    pub fn finish(&self, mode: ImportanceMode) -> Result<DiversityStats> {
        let mut intra: Vec<IntraTerm> = self
            .intra
            .iter()
            .filter_map(|(m, r)| {
                r.mean().map(|value| IntraTerm {
                    modality: m.clone(),
                    value,
                })
            })
            .collect();
        intra.sort_by(|x, y| x.modality.cmp(&y.modality));
        let mut inter: Vec<InterTerm> = self
            .inter
            .iter()
            .filter_map(|(a, b, r)| {
                r.mean().map(|value| InterTerm {
                    a: a.clone(),
                    b: b.clone(),
                    value,
                })
            })
            .collect();
        inter.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
        let all_token = self.all_token.mean();
        let importance = match mode {
            ImportanceMode::ModalityAware => layer_importance(&intra, &inter)?,
            ImportanceMode::AllToken => {
                all_token.ok_or_else(|| Error::Degenerate("no sample had two or more tokens".into()))?
            }
        };
        Ok(DiversityStats {
            intra,
            inter,
            all_token,
            mode,
            importance,
        })
    }
}

/// Diversity stats of one layer from its per-sample outputs.
pub fn layer_diversity<'a>(
    samples: impl IntoIterator<Item = (&'a Matrix, &'a [Span])>,
    mode: ImportanceMode,
    sampling: PairSampling,
) -> Result<DiversityStats> {
    let mut acc = DiversityAccumulator::new();
    for (z, spans) in samples {
        acc.add(&SampleDiversity::compute(z, spans, sampling));
    }
    acc.finish(mode)
}
