//! Seeded synthetic worlds: multimodal token data and purpose-built models.
//!
//! A [`World`] fixes the data distribution: a direction shared by every
//! content token, a low-rank basis per modality, and an artifact pattern
//! confined to a few channels. Calibration and evaluation sequences are
//! drawn from separate random streams of the same world.
//!
//! With a [`NoiseConfig`], one modality's calibration tokens are replaced
//! by high-magnitude near-duplicates of the artifact pattern, while its
//! evaluation tokens stay clean.

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, init_synthetic, unit_uniform, CaptureFlags, LayerId, ModalityId, ProjKind, TokenSequence, ToyModel};
use crate::tensor::Matrix;

/// Draws from a zero-mean, unit-variance uniform distribution.
fn centered(rng: &mut ChaCha8Rng) -> f32 {
    (2.0 * unit_uniform(rng) - 1.0) * 3f32.sqrt()
}

fn unit(v: &mut [f32]) {
    let n = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / n) as f32;
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..d).map(|_| centered(rng)).collect();
    unit(&mut v);
    v
}

/// Rows orthonormalized by modified Gram-Schmidt in f64.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| f64::from(centered(rng))).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_fn(n, n, |r, c| rows[r][c] as f32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub len: usize,
}

/// Parses `name:len[,name:len...]`.
pub fn parse_modalities(s: &str) -> Result<Vec<ModalitySpec>> {
    let specs = s
        .split(',')
        .map(|part| {
            let (name, len) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("modality `{part}` is not `name:len`")))?;
            let len = len
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad token count in `{part}`")))?;
            Ok(ModalitySpec {
                name: name.trim().to_string(),
                len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = specs.iter().map(|m| m.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != specs.len() || specs.iter().any(|m| m.name.is_empty()) {
        return Err(Error::Config("modality names must be unique and non-empty".into()));
    }
    if specs.iter().map(|m| m.len).sum::<usize>() == 0 {
        return Err(Error::Config("sequences need at least one token".into()));
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub d_model: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Basis vectors per modality.
    pub rank: usize,
    /// Length of the shared content direction in every clean token.
    pub offset: f32,
    /// Per-channel standard deviation of isotropic token noise.
    pub isotropic: f32,
    /// Channels the artifact pattern lives on.
    pub artifact_channels: usize,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(d_model: usize, modalities: Vec<ModalitySpec>, seed: u64) -> Self {
        Self {
            d_model,
            modalities,
            rank: 4,
            offset: 2.0,
            isotropic: 0.3,
            artifact_channels: 4,
            seed,
        }
    }
}

/// High-magnitude near-duplicate tokens standing in for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub modality: String,
    /// Norm of a noise token relative to a typical clean token.
    pub scale: f32,
    /// Relative per-token perturbation of the artifact pattern.
    pub jitter: f32,
}

impl NoiseConfig {
    pub fn new(modality: impl Into<String>) -> Self {
        Self {
            modality: modality.into(),
            scale: 8.0,
            jitter: 0.05,
        }
    }
}

/// Which random stream sequences are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Evaluation,
    Probe,
    /// An alternative calibration draw, for resampling studies.
    Resample(u32),
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Calibration => 1,
            Split::Evaluation => 2,
            Split::Probe => 3,
            Split::Resample(k) => 16 + u64::from(k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    modalities: Vec<ModalityId>,
    content: Vec<f32>,
    bases: Vec<Vec<Vec<f32>>>,
    artifact: Vec<f32>,
    clean_norm: f32,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        let d = cfg.d_model;
        if d == 0 || cfg.modalities.is_empty() {
            return Err(Error::Config("a world needs d_model ≥ 1 and at least one modality".into()));
        }
        if cfg.artifact_channels == 0 || cfg.artifact_channels >= d {
            return Err(Error::Config(format!(
                "artifact channels must lie in 1..{d}, got {}",
                cfg.artifact_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let channels = sample(&mut rng, d, cfg.artifact_channels).into_vec();
        let mut artifact = vec![0.0; d];
        for &c in &channels {
            artifact[c] = if rng.next_u32() & 1 == 0 { 1.0 } else { -1.0 };
        }
        unit(&mut artifact);

        // Content lives off the artifact channels so the two are orthogonal.
        let mut content = random_unit(&mut rng, d);
        for &c in &channels {
            content[c] = 0.0;
        }
        unit(&mut content);

        let bases = cfg
            .modalities
            .iter()
            .map(|_| (0..cfg.rank).map(|_| random_unit(&mut rng, d)).collect())
            .collect();
        let modalities = cfg
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| ModalityId::new(i as u16, m.name.clone()))
            .collect();
        let clean_norm = (cfg.offset * cfg.offset + cfg.rank as f32 + cfg.isotropic * cfg.isotropic * d as f32).sqrt();
        Ok(Self {
            cfg,
            modalities,
            content,
            bases,
            artifact,
            clean_norm,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn modalities(&self) -> &[ModalityId] {
        &self.modalities
    }

    /// Unit direction shared by every clean token.
    pub fn content_direction(&self) -> &[f32] {
        &self.content
    }

    /// Unit artifact pattern used by noise tokens.
    pub fn artifact_direction(&self) -> &[f32] {
        &self.artifact
    }

    fn clean_token(&self, rng: &mut ChaCha8Rng, m: usize, out: &mut [f32]) {
        for (o, c) in out.iter_mut().zip(&self.content) {
            *o = self.cfg.offset * c;
        }
        for b in &self.bases[m] {
            let coef = centered(rng);
            for (o, v) in out.iter_mut().zip(b) {
                *o += coef * v;
            }
        }
        for o in out.iter_mut() {
            *o += self.cfg.isotropic * centered(rng);
        }
    }

    fn noise_token(&self, rng: &mut ChaCha8Rng, noise: &NoiseConfig, out: &mut [f32]) {
        let d = self.cfg.d_model as f32;
        let magnitude = noise.scale * self.clean_norm;
        for (o, a) in out.iter_mut().zip(&self.artifact) {
            *o = magnitude * (a + noise.jitter * centered(rng) / d.sqrt());
        }
    }

    /// `count` sequences from `split`. `noise` replaces the named
    /// modality's tokens in every sequence.
    pub fn sample(&self, split: Split, count: usize, noise: Option<&NoiseConfig>) -> Result<Vec<TokenSequence>> {
        let noisy = match noise {
            Some(n) => Some(
                self.cfg
                    .modalities
                    .iter()
                    .position(|m| m.name == n.modality)
                    .ok_or_else(|| Error::Config(format!("no modality named `{}`", n.modality)))?,
            ),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(split.stream());
        let d = self.cfg.d_model;
        let n_tokens: usize = self.cfg.modalities.iter().map(|m| m.len).sum();
        let lengths: Vec<(ModalityId, usize)> = self
            .modalities
            .iter()
            .cloned()
            .zip(self.cfg.modalities.iter().map(|m| m.len))
            .collect();
        (0..count)
            .map(|_| {
                let mut data = vec![0.0; n_tokens * d];
                let mut row = 0;
                for (mi, ms) in self.cfg.modalities.iter().enumerate() {
                    for _ in 0..ms.len {
                        let out = &mut data[row * d..(row + 1) * d];
                        match (noisy, noise) {
                            (Some(k), Some(nc)) if k == mi => self.noise_token(&mut rng, nc, out),
                            _ => self.clean_token(&mut rng, mi, out),
                        }
                        row += 1;
                    }
                }
                TokenSequence::from_lengths(Matrix::from_vec(n_tokens, d, data)?, &lengths)
            })
            .collect()
    }
}

/// Unit mean direction of a layer's inputs over `probe`.
pub fn mean_input_direction(model: &ToyModel, probe: &[TokenSequence], id: LayerId) -> Result<Vec<f32>> {
    let flags = CaptureFlags {
        inputs: true,
        stop_after: Some(id.block + 1),
        ..CaptureFlags::none()
    };
    let cols = model.layer(id).weight().cols();
    let mut sum = vec![0.0f64; cols];
    for seq in probe {
        let (_, trace) = forward(model, seq, flags)?;
        for row in trace.input(id)?.iter_rows() {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += f64::from(*v);
            }
        }
    }
    let mut dir: Vec<f32> = sum.iter().map(|&v| v as f32).collect();
    unit(&mut dir);
    Ok(dir)
}

/// Replaces a weight with `scale·(g·u·dirᵀ + ε·W)`, a near rank-one map
/// whose outputs for inputs aligned with `dir` all point along `u`. `g`
/// gives the rank-one part the Frobenius norm of a typical random weight.
fn collapse_layer(model: &mut ToyModel, id: LayerId, dir: &[f32], u: &[f32], scale: f32, residue: f32) -> Result<()> {
    let w = model.layer(id).weight().clone();
    let (rows, cols) = w.shape();
    let g = (rows as f32 / 3.0).sqrt();
    let collapsed = Matrix::from_fn(rows, cols, |r, c| scale * (g * u[r] * dir[c] + residue * w.get(r, c)));
    model.layer_mut(id).set_weight(collapsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub seed: u64,
    /// Strength of the query/key component that makes content tokens
    /// attend to each other.
    pub relevance_gain: f32,
    /// Blocks whose projections are collapsed to near rank-one maps.
    pub redundant_blocks: Vec<usize>,
    pub redundant_scale: f32,
    pub redundant_residue: f32,
    pub probe_samples: usize,
}

impl ScenarioModelConfig {
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize, n_blocks: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_heads,
            d_ff,
            n_blocks,
            seed,
            relevance_gain: 0.0,
            redundant_blocks: Vec::new(),
            redundant_scale: 0.1,
            redundant_residue: 0.1,
            probe_samples: 8,
        }
    }
}

/// A random model shaped for `world`.
///
/// With a positive `relevance_gain`, every block's query and key
/// projections gain a rank-one term reading the mean direction of the
/// block's normalized input, so tokens carrying the shared content
/// direction attend mostly to one another. Redundant blocks have all
/// seven projections collapsed onto their mean input direction, giving
/// nearly collinear outputs at reduced scale.
pub fn scenario_model(cfg: &ScenarioModelConfig, world: &World) -> Result<ToyModel> {
    if world.config().d_model != cfg.d_model {
        return Err(Error::Config("world and model widths differ".into()));
    }
    if let Some(&b) = cfg.redundant_blocks.iter().find(|&&b| b >= cfg.n_blocks) {
        return Err(Error::Config(format!("redundant block {b} out of range")));
    }
    let mut model = init_synthetic(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_blocks, cfg.seed)?;
    let probe = world.sample(Split::Probe, cfg.probe_samples.max(1), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let id = |block, kind| LayerId { block, kind };

    for b in 0..cfg.n_blocks {
        if cfg.relevance_gain > 0.0 {
            let dir = mean_input_direction(&model, &probe, id(b, ProjKind::Q))?;
            let u = vec![1.0 / (cfg.d_model as f32).sqrt(); cfg.d_model];
            for kind in [ProjKind::Q, ProjKind::K] {
                let w = model.layer(id(b, kind)).weight().clone();
                let gated = Matrix::from_fn(cfg.d_model, cfg.d_model, |r, c| {
                    w.get(r, c) + cfg.relevance_gain * u[r] * dir[c]
                });
                model.layer_mut(id(b, kind)).set_weight(gated)?;
            }
        }
        if cfg.redundant_blocks.contains(&b) {
            // Each projection is collapsed onto the mean of the inputs it
            // sees once the projections before it are already collapsed.
            for kind in ProjKind::ALL {
                let dir = mean_input_direction(&model, &probe, id(b, kind))?;
                let rows = model.layer(id(b, kind)).weight().rows();
                let mut u = random_unit(&mut rng, rows);
                if kind == ProjKind::Gate {
                    // Keep gate pre-activations positive so the SiLU stays
                    // in its near-linear, sign-preserving range.
                    u.iter_mut().for_each(|x| *x = x.abs());
                }
                collapse_layer(&mut model, id(b, kind), &dir, &u, cfg.redundant_scale, cfg.redundant_residue)?;
            }
        }
    }
    Ok(model)
}

/// Two-block model for checking diversity-aware allocation: block 0's
/// value projection maps every content token onto one direction, block
/// 1's is a random rotation.
pub fn diversity_contrast_model(world: &World, n_heads: usize, d_ff: usize, seed: u64) -> Result<ToyModel> {
    let d = world.config().d_model;
    let mut model = init_synthetic(d, n_heads, d_ff, 2, seed)?;
    let probe = world.sample(Split::Probe, 8, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let low = LayerId::new(0, ProjKind::V);
    let dir = mean_input_direction(&model, &probe, low)?;
    let u = random_unit(&mut rng, d);
    collapse_layer(&mut model, low, &dir, &u, 1.0, 0.02)?;
    let rot = random_orthogonal(&mut rng, d);
    model.layer_mut(LayerId::new(1, ProjKind::V)).set_weight(rot)?;
    Ok(model)
}

/// Complete description of a generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub world: WorldConfig,
    pub model: ScenarioModelConfig,
    pub noise: Option<NoiseConfig>,
    pub calib_samples: usize,
    pub eval_samples: usize,
}

pub struct Scenario {
    pub world: World,
    pub model: ToyModel,
    pub calib: Vec<TokenSequence>,
    pub eval: Vec<TokenSequence>,
}

impl ScenarioConfig {
    /// The noisy-modality setting: visual, a numerous noisy audio stream,
    /// then language, with content-gated attention and two redundant blocks.
    pub fn noisy_modality(seed: u64) -> Self {
        let modalities = vec![
            ModalitySpec { name: "visual".into(), len: 16 },
            ModalitySpec { name: "audio".into(), len: 32 },
            ModalitySpec { name: "language".into(), len: 16 },
        ];
        let world = WorldConfig::new(32, modalities, seed);
        let mut model = ScenarioModelConfig::new(32, 4, 64, 4, seed.wrapping_add(1));
        model.relevance_gain = 2.5;
        model.redundant_blocks = vec![1, 3];
        Self {
            world,
            model,
            noise: Some(NoiseConfig::new("audio")),
            calib_samples: 64,
            eval_samples: 32,
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let world = World::new(self.world.clone())?;
        let model = scenario_model(&self.model, &world)?;
        let calib = world.sample(Split::Calibration, self.calib_samples, self.noise.as_ref())?;
        let eval = world.sample(Split::Evaluation, self.eval_samples, None)?;
        Ok(Scenario {
            world,
            model,
            calib,
            eval,
        })
    }
}
