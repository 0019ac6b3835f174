//! Choosing which input tokens feed a layer's activation statistics.
//!
//! The adaptive variant starts from the last query's attention over all
//! tokens, spreads each token's score to its nearest neighbours in the
//! layer's output space, then greedily picks high-scoring tokens while
//! penalizing neighbours of the ones already taken. It stops once the
//! picked subset matches the full set closely in kernel mean discrepancy.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::UnitRows;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_GAMMA_FORWARD: f64 = 1.0;
pub const DEFAULT_GAMMA_REVERSE: f64 = 0.2;
pub const DEFAULT_MMD_COEFFICIENT: f64 = 0.1;
pub const DEFAULT_RANDOM_TOKENS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContributionSource {
    LastQueryAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenContribution {
    pub a: Vec<f64>,
    pub source: ContributionSource,
}

/// The final query position's attention over every key.
pub fn token_contributions(attention: &Matrix) -> Result<TokenContribution> {
    let (r, c) = attention.shape();
    if r != c || r == 0 {
        return Err(Error::Shape(format!("attention must be square and non-empty, got {r}x{c}")));
    }
    Ok(TokenContribution {
        a: attention.row(r - 1).iter().map(|&v| f64::from(v)).collect(),
        source: ContributionSource::LastQueryAttention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub gamma: f64,
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Same neighbour sets with kernel weights recomputed for `gamma`.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        let neighbors = self
            .neighbors
            .iter()
            .map(|ns| {
                ns.iter()
                    .map(|n| Neighbor {
                        weight: (-gamma * n.distance).exp(),
                        ..*n
                    })
                    .collect()
            })
            .collect();
        Self {
            k: self.k,
            gamma,
            neighbors,
        }
    }
}

fn knn_from_distances(dist: &[f64], n: usize, k: usize, gamma: f64) -> NeighborGraph {
    let mut neighbors = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = &dist[i * n..(i + 1) * n];
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        neighbors.push(
            order[..k]
                .iter()
                .map(|&j| Neighbor {
                    index: j,
                    distance: row[j],
                    weight: (-gamma * row[j]).exp(),
                })
                .collect(),
        );
    }
    NeighborGraph { k, gamma, neighbors }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("kernel gamma {gamma} must be positive and finite")));
    }
    Ok(())
}

/// `k` nearest neighbours of every token by cosine distance, ties broken
/// toward the lower index.
pub fn build_knn(z: &Matrix, k: usize, gamma: f64) -> Result<NeighborGraph> {
    check_gamma(gamma)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let n = z.rows();
    if n <= k {
        return Err(Error::InsufficientTokens { needed: k + 1, got: n });
    }
    let units = UnitRows::new(z);
    Ok(knn_from_distances(&units.distance_matrix(), n, k, gamma))
}

/// `a_i + Σ_{j ∈ N(i)} e_ij·a_j`, reading only the original `a`.
pub fn forward_update(a: &[f64], graph: &NeighborGraph) -> Result<Vec<f64>> {
    if a.len() != graph.len() {
        return Err(Error::Shape(format!("{} contributions for {} tokens", a.len(), graph.len())));
    }
    Ok(graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, ns)| a[i] + ns.iter().map(|n| n.weight * a[n.index]).sum::<f64>())
        .collect())
}

/// Dense kernel `exp(−γ·d_ij)` over all token pairs.
#[derive(Debug, Clone)]
pub struct Kernel {
    n: usize,
    e: Vec<f64>,
}

impl Kernel {
    fn from_distances(dist: &[f64], n: usize, gamma: f64) -> Self {
        let mut e: Vec<f64> = dist.iter().map(|d| (-gamma * d).exp()).collect();
        for i in 0..n {
            e[i * n + i] = 1.0;
        }
        Self { n, e }
    }

    pub fn new(z: &Matrix, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let n = z.rows();
        Ok(Self::from_distances(&UnitRows::new(z).distance_matrix(), n, gamma))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn mean_over(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += self.get(i, j);
            }
        }
        s / (a.len() * b.len()) as f64
    }
}

/// `A(C,C) + A(C′,C′) − 2A(C,C′)` with `A` the mean kernel value over the
/// cross product of two index sets; tiny negatives are clipped to 0.
pub fn mmd(kernel: &Kernel, c: &[usize], c_prime: &[usize]) -> Result<f64> {
    if c.is_empty() || c_prime.is_empty() {
        return Err(Error::InsufficientTokens { needed: 1, got: 0 });
    }
    if let Some(&i) = c.iter().chain(c_prime).find(|&&i| i >= kernel.len()) {
        return Err(Error::Shape(format!("token index {i} out of range for {} tokens", kernel.len())));
    }
    let v = kernel.mean_over(c, c) + kernel.mean_over(c_prime, c_prime) - 2.0 * kernel.mean_over(c, c_prime);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Exhausted,
    MaxCount,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Threshold => "threshold",
            StopReason::Exhausted => "exhausted",
            StopReason::MaxCount => "max_count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub mmd_trace: Vec<f64>,
    pub threshold: f64,
    pub stopped_by: StopReason,
}

/// Bounds on the number of picks. `min_count` defaults to `max(k + 1, 4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionLimits {
    pub min_count: Option<usize>,
    pub max_count: Option<usize>,
}

/// Greedy pick-and-penalize pass with the kernel stopping rule. MMD is
/// measured against the full token set with the `reverse` graph's gamma.
pub fn reverse_select(
    a: &[f64],
    reverse: &NeighborGraph,
    z: &Matrix,
    threshold: f64,
    limits: SelectionLimits,
) -> Result<SelectionResult> {
    let n = z.rows();
    if a.len() != n || reverse.len() != n {
        return Err(Error::Shape(format!(
            "{} contributions and {} graph nodes for {n} tokens",
            a.len(),
            reverse.len()
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientTokens { needed: 1, got: 0 });
    }
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Config(format!("threshold {threshold} must be non-negative")));
    }
    let kernel = Kernel::new(z, reverse.gamma)?;
    reverse_select_with_kernel(a, reverse, &kernel, threshold, limits)
}

fn reverse_select_with_kernel(
    a: &[f64],
    reverse: &NeighborGraph,
    kernel: &Kernel,
    threshold: f64,
    limits: SelectionLimits,
) -> Result<SelectionResult> {
    let n = kernel.len();
    let min_count = limits.min_count.unwrap_or((reverse.k + 1).max(4)).clamp(1, n);
    let max_count = limits.max_count.unwrap_or(n).clamp(min_count, n);

    let mut col_sum = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for (j, cs) in col_sum.iter_mut().enumerate() {
            let v = kernel.get(i, j);
            *cs += v;
            total += v;
        }
    }
    let full_term = total / (n * n) as f64;

    let mut scores = a.to_vec();
    let mut taken = vec![false; n];
    let mut selected = Vec::new();
    let mut mmd_trace = Vec::new();
    let mut within = 0.0;
    let mut cross = 0.0;

    loop {
        let pick = (0..n)
            .filter(|&i| !taken[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if scores[b] >= scores[i] => Some(b),
                _ => Some(i),
            })
            .expect("loop exits before every token is taken");
        within += 2.0 * selected.iter().map(|&j| kernel.get(pick, j)).sum::<f64>() + kernel.get(pick, pick);
        cross += col_sum[pick];
        taken[pick] = true;
        selected.push(pick);
        for nb in &reverse.neighbors[pick] {
            scores[nb.index] -= nb.weight * scores[pick];
        }

        let m = selected.len();
        let value = if m == n {
            0.0
        } else {
            (full_term + within / (m * m) as f64 - 2.0 * cross / (n * m) as f64).max(0.0)
        };
        mmd_trace.push(value);

        if m >= min_count && value < threshold {
            return Ok(SelectionResult {
                selected,
                mmd_trace,
                threshold,
                stopped_by: StopReason::Threshold,
            });
        }
        if m == n {
            return Ok(SelectionResult {
                selected,
                mmd_trace,
                threshold,
                stopped_by: StopReason::Exhausted,
            });
        }
        if m >= max_count {
            return Ok(SelectionResult {
                selected,
                mmd_trace,
                threshold,
                stopped_by: StopReason::MaxCount,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmiaParams {
    pub k: usize,
    pub gamma_forward: f64,
    pub gamma_reverse: f64,
    pub mmd_coefficient: f64,
    pub limits: SelectionLimits,
}

impl Default for AmiaParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            gamma_forward: DEFAULT_GAMMA_FORWARD,
            gamma_reverse: DEFAULT_GAMMA_REVERSE,
            mmd_coefficient: DEFAULT_MMD_COEFFICIENT,
            limits: SelectionLimits::default(),
        }
    }
}

impl AmiaParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        check_gamma(self.gamma_forward)?;
        check_gamma(self.gamma_reverse)?;
        if !(self.mmd_coefficient > 0.0 && self.mmd_coefficient.is_finite()) {
            return Err(Error::Config(format!("MMD coefficient {} must be positive", self.mmd_coefficient)));
        }
        Ok(())
    }

    pub fn threshold(&self, diversity: f64) -> f64 {
        self.mmd_coefficient * diversity.max(0.0).sqrt()
    }
}

/// The whole adaptive selection for one layer of one sample: contributions
/// from attention, spread over the output-space graph, then the reverse
/// pass with threshold `coefficient·√s`.
pub fn amia_select(a: &[f64], z: &Matrix, diversity: f64, params: &AmiaParams) -> Result<SelectionResult> {
    params.validate()?;
    let n = z.rows();
    if a.len() != n {
        return Err(Error::Shape(format!("{} contributions for {n} tokens", a.len())));
    }
    if n <= params.k {
        return Err(Error::InsufficientTokens {
            needed: params.k + 1,
            got: n,
        });
    }
    let dist = UnitRows::new(z).distance_matrix();
    let forward = knn_from_distances(&dist, n, params.k, params.gamma_forward);
    let reverse = forward.with_gamma(params.gamma_reverse);
    let kernel = Kernel::from_distances(&dist, n, params.gamma_reverse);
    let spread = forward_update(a, &forward)?;
    reverse_select_with_kernel(&spread, &reverse, &kernel, params.threshold(diversity), params.limits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectionKind {
    Full,
    Random { n: usize },
    AttentionAboveMean,
    Amia,
}

impl SelectionKind {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionKind::Full => "full",
            SelectionKind::Random { .. } => "random",
            SelectionKind::AttentionAboveMean => "attention",
            SelectionKind::Amia => "amia",
        }
    }
}

impl std::str::FromStr for SelectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SelectionKind::Full),
            "random" => Ok(SelectionKind::Random {
                n: DEFAULT_RANDOM_TOKENS,
            }),
            "attention" | "attention_above_mean" => Ok(SelectionKind::AttentionAboveMean),
            "amia" => Ok(SelectionKind::Amia),
            other => Err(Error::Config(format!("unknown selection `{other}`"))),
        }
    }
}

/// Everything a variant might need for one layer of one sample.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInputs<'a> {
    pub a: &'a [f64],
    pub z: &'a Matrix,
    pub diversity: f64,
    pub params: &'a AmiaParams,
    pub seed: u64,
}

/// Chosen rows, sorted ascending, plus the adaptive pass's record when it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub result: Option<SelectionResult>,
    /// The variant produced nothing usable and every token was taken instead.
    pub fell_back: bool,
}

impl Selection {
    fn full(n: usize, fell_back: bool) -> Self {
        Self {
            indices: (0..n).collect(),
            result: None,
            fell_back,
        }
    }
}

/// Runs one selection variant. Attention-above-mean with no qualifying
/// token and the adaptive pass on too few tokens both fall back to all
/// tokens.
pub fn select_variant(kind: SelectionKind, inputs: SelectionInputs<'_>) -> Result<Selection> {
    let n = inputs.z.rows();
    match kind {
        SelectionKind::Full => Ok(Selection::full(n, false)),
        SelectionKind::Random { n: want } => {
            let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
            let mut indices = sample(&mut rng, n, want.min(n)).into_vec();
            indices.sort_unstable();
            Ok(Selection {
                indices,
                result: None,
                fell_back: false,
            })
        }
        SelectionKind::AttentionAboveMean => {
            if inputs.a.len() != n {
                return Err(Error::Shape(format!("{} contributions for {n} tokens", inputs.a.len())));
            }
            let mean = inputs.a.iter().sum::<f64>() / n.max(1) as f64;
            // Rounding in the mean must not split a uniform vector.
            let slack = 1e-12 * inputs.a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let indices: Vec<usize> = (0..n).filter(|&i| inputs.a[i] > mean + slack).collect();
            if indices.is_empty() {
                Ok(Selection::full(n, true))
            } else {
                Ok(Selection {
                    indices,
                    result: None,
                    fell_back: false,
                })
            }
        }
        SelectionKind::Amia => match amia_select(inputs.a, inputs.z, inputs.diversity, inputs.params) {
            Ok(result) => {
                let mut indices = result.selected.clone();
                indices.sort_unstable();
                Ok(Selection {
                    indices,
                    result: Some(result),
                    fell_back: false,
                })
            }
            Err(Error::InsufficientTokens { .. }) => Ok(Selection::full(n, true)),
            Err(e) => Err(e),
        },
    }
}
