//! The pruning target: a small pre-norm decoder with causal multi-head
//! attention and a gated FFN, plus the token sequences it consumes.
//!
//! Every block owns seven linear projections (`q`, `k`, `v`, `o` in attention,
//! `gate`, `up`, `down` in the FFN). Those projections are the only
//! parameters the pruner touches; norm scales are never pruned.

mod checkpoint;
mod data;
mod forward;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use checkpoint::{load_checkpoint, save_checkpoint, weights_checksum};
pub use data::{read_sequences, write_sequences};
pub use forward::{forward, ActivationTrace, BlockTrace, CaptureFlags, LayerCapture};

/// A modality tag: small integer id plus a human-readable name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModalityId {
    pub id: u16,
    pub name: String,
}

impl ModalityId {
    pub fn new(id: u16, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Contiguous run of tokens from one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub modality: ModalityId,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Pre-embedded tokens tagged with modality spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    embeddings: Matrix,
    spans: Vec<Span>,
}

impl TokenSequence {
    pub fn new(embeddings: Matrix, spans: Vec<Span>) -> Result<Self> {
        let n = embeddings.rows();
        if n == 0 {
            return Err(Error::Shape("token sequence must hold at least one token".into()));
        }
        if spans.is_empty() {
            return Err(Error::Shape("token sequence needs at least one span".into()));
        }
        let mut cursor = 0;
        for s in &spans {
            if s.start != cursor {
                return Err(Error::Shape(format!(
                    "span for {} starts at {} but previous span ended at {cursor}",
                    s.modality, s.start
                )));
            }
            cursor += s.len;
        }
        if cursor != n {
            return Err(Error::Shape(format!("spans cover {cursor} tokens, sequence has {n}")));
        }
        if !embeddings.is_finite() {
            return Err(Error::Shape("embeddings contain NaN or Inf".into()));
        }
        Ok(Self { embeddings, spans })
    }

    /// Lays out spans back to back from `(modality, len)` pairs.
    pub fn from_lengths(embeddings: Matrix, lengths: &[(ModalityId, usize)]) -> Result<Self> {
        let mut start = 0;
        let spans = lengths
            .iter()
            .map(|(m, len)| {
                let s = Span {
                    modality: m.clone(),
                    start,
                    len: *len,
                };
                start += len;
                s
            })
            .collect();
        Self::new(embeddings, spans)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Groups token indices by modality, merging repeated spans of the same
/// modality. Modalities come out ordered by id.
pub fn modality_groups(spans: &[Span]) -> Vec<(ModalityId, Vec<usize>)> {
    let mut groups: Vec<(ModalityId, Vec<usize>)> = Vec::new();
    for s in spans {
        match groups.iter_mut().find(|(m, _)| *m == s.modality) {
            Some((_, idx)) => idx.extend(s.range()),
            None => groups.push((s.modality.clone(), s.range().collect())),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    groups
}

/// The seven projection kinds of a block, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::Q,
        ProjKind::K,
        ProjKind::V,
        ProjKind::O,
        ProjKind::Gate,
        ProjKind::Up,
        ProjKind::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProjKind::Q => "q",
            ProjKind::K => "k",
            ProjKind::V => "v",
            ProjKind::O => "o",
            ProjKind::Gate => "gate",
            ProjKind::Up => "up",
            ProjKind::Down => "down",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O)
    }

    /// `(C_out, C_in)` for this projection in a model with the given dims.
    pub fn shape(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => (d_model, d_model),
            ProjKind::Gate | ProjKind::Up => (d_ff, d_model),
            ProjKind::Down => (d_model, d_ff),
        }
    }
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProjKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection kind `{s}`")))
    }
}

impl Serialize for ProjKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ProjKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identifies one prunable projection: `b{block}.{kind}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: ProjKind,
}

impl LayerId {
    pub fn new(block: usize, kind: ProjKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}.{}", self.block, self.kind)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed layer id `{s}` (expected b<block>.<kind>)"));
        let rest = s.strip_prefix('b').ok_or_else(bad)?;
        let (block, kind) = rest.split_once('.').ok_or_else(bad)?;
        Ok(LayerId {
            block: block.parse().map_err(|_| bad())?,
            kind: kind.parse()?,
        })
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Boolean keep/drop matrix, `true` = keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn all_keep(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask of {} entries cannot be {rows}x{cols}",
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.dropped() as f64 / self.keep.len() as f64
        }
    }

    /// Element-wise AND: an entry survives only if both masks keep it.
    pub fn intersect(&self, other: &KeepMask) -> Result<KeepMask> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("cannot intersect masks of different shapes".into()));
        }
        Ok(KeepMask {
            rows: self.rows,
            cols: self.cols,
            keep: self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub kind: ProjKind,
    pub block_index: usize,
    weight: Matrix,
    mask: Option<KeepMask>,
}

impl LinearLayer {
    pub fn new(kind: ProjKind, block_index: usize, weight: Matrix) -> Self {
        Self {
            kind,
            block_index,
            weight,
            mask: None,
        }
    }

    pub fn id(&self) -> LayerId {
        LayerId::new(self.block_index, self.kind)
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    /// Replaces the dense weight. Any existing mask is re-applied so masked
    /// entries stay zero.
    pub fn set_weight(&mut self, weight: Matrix) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::Shape(format!(
                "{}: new weight {:?} does not match {:?}",
                self.id(),
                weight.shape(),
                self.weight.shape()
            )));
        }
        self.weight = weight;
        if let Some(mask) = self.mask.take() {
            self.apply_mask(mask)?;
        }
        Ok(())
    }

    pub fn mask(&self) -> Option<&KeepMask> {
        self.mask.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }

    /// Zeroes every dropped entry and records the mask. Applying a second
    /// mask intersects it with the first.
    pub fn apply_mask(&mut self, mask: KeepMask) -> Result<()> {
        if mask.shape() != self.weight.shape() {
            return Err(Error::Shape(format!(
                "{}: mask {:?} does not match weight {:?}",
                self.id(),
                mask.shape(),
                self.weight.shape()
            )));
        }
        let mask = match &self.mask {
            Some(prev) => prev.intersect(&mask)?,
            None => mask,
        };
        for (w, keep) in self.weight.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            if !keep {
                *w = 0.0;
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub(crate) fn from_parts(
        kind: ProjKind,
        block_index: usize,
        weight: Matrix,
        mask: Option<KeepMask>,
    ) -> Self {
        Self {
            kind,
            block_index,
            weight,
            mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    layers: Vec<LinearLayer>,
}

impl Block {
    pub fn layer(&self, kind: ProjKind) -> &LinearLayer {
        &self.layers[kind.index()]
    }

    pub fn layer_mut(&mut self, kind: ProjKind) -> &mut LinearLayer {
        &mut self.layers[kind.index()]
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    fn reindex(&mut self, block_index: usize) {
        for l in &mut self.layers {
            l.block_index = block_index;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    blocks: Vec<Block>,
}

impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.config.d_ff
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block_mut(&mut self, i: usize) -> &mut Block {
        &mut self.blocks[i]
    }

    pub fn layer(&self, id: LayerId) -> &LinearLayer {
        self.blocks[id.block].layer(id.kind)
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut LinearLayer {
        self.blocks[id.block].layer_mut(id.kind)
    }

    /// All prunable layer ids in block-major, kind-minor order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|b| ProjKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    pub fn prunable_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .map(LinearLayer::param_count)
            .sum()
    }

    /// Fraction of prunable weights that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let total = self.prunable_params();
        if total == 0 {
            return 0.0;
        }
        let zeros: usize = self
            .blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .map(|l| l.weight.as_slice().iter().filter(|w| **w == 0.0).count())
            .sum();
        zeros as f64 / total as f64
    }

    /// Keeps only the listed blocks, in their original relative order, and
    /// renumbers them from zero.
    pub fn retain_blocks(&self, keep: &[usize]) -> Result<ToyModel> {
        if keep.is_empty() {
            return Err(Error::Config("cannot remove every block".into()));
        }
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != keep.len() || *sorted.last().unwrap() >= self.blocks.len() {
            return Err(Error::Config("block selection out of range or duplicated".into()));
        }
        let blocks = sorted
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let mut b = self.blocks[old].clone();
                b.reindex(new);
                b
            })
            .collect::<Vec<_>>();
        Ok(ToyModel {
            config: ModelConfig {
                n_blocks: blocks.len(),
                ..self.config
            },
            blocks,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, blocks: Vec<Block>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.n_blocks {
            return Err(Error::Config(format!(
                "config declares {} blocks, got {}",
                config.n_blocks,
                blocks.len()
            )));
        }
        for (bi, b) in blocks.iter().enumerate() {
            if b.layers.len() != ProjKind::ALL.len() {
                return Err(Error::Config(format!("block {bi} lacks some projections")));
            }
            for (l, kind) in b.layers.iter().zip(ProjKind::ALL) {
                let want = kind.shape(config.d_model, config.d_ff);
                if l.kind != kind || l.weight.shape() != want || l.block_index != bi {
                    return Err(Error::Shape(format!(
                        "block {bi} layer {kind}: expected {want:?}, got {:?}",
                        l.weight.shape()
                    )));
                }
                if !l.weight.is_finite() {
                    return Err(Error::Numeric {
                        block: bi,
                        layer: kind.to_string(),
                    });
                }
            }
            if b.attn_norm.len() != config.d_model || b.ffn_norm.len() != config.d_model {
                return Err(Error::Shape(format!("block {bi}: norm scale length")));
            }
        }
        Ok(Self { config, blocks })
    }

    pub(crate) fn block_from_layers(
        attn_norm: Vec<f32>,
        ffn_norm: Vec<f32>,
        layers: Vec<LinearLayer>,
    ) -> Block {
        Block {
            attn_norm,
            ffn_norm,
            layers,
        }
    }
}

/// Uniform sample in `[0, 1)` from the top 24 bits of one ChaCha8 word.
///
/// The ChaCha8 keystream is fixed by its seed, so this is reproducible
/// across platforms and `rand` releases.
pub(crate) fn unit_uniform(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Builds a model with weights drawn from `U(-1/√C_in, 1/√C_in)` and unit
/// norm scales.
///
/// One ChaCha8 stream seeded with `seed` fills the projections in block
/// order, then `q, k, v, o, gate, up, down`, each row-major.
pub fn init_synthetic(
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    n_blocks: usize,
    seed: u64,
) -> Result<ToyModel> {
    let config = ModelConfig {
        d_model,
        n_heads,
        d_ff,
        n_blocks,
        seed,
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let layers = ProjKind::ALL
            .into_iter()
            .map(|kind| {
                let (rows, cols) = kind.shape(d_model, d_ff);
                let bound = 1.0 / (cols as f32).sqrt();
                let w = Matrix::from_fn(rows, cols, |_, _| (2.0 * unit_uniform(&mut rng) - 1.0) * bound);
                LinearLayer::new(kind, b, w)
            })
            .collect();
        blocks.push(Block {
            attn_norm: vec![1.0; d_model],
            ffn_norm: vec![1.0; d_model],
            layers,
        });
    }
    ToyModel::from_parts(config, blocks)
}
