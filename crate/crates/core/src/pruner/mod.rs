//! Weight scoring, mask generation, and the pruning pipelines.

mod pipeline;
mod structural;

pub use pipeline::{
    calibration_diversity, prune_model, prune_with_plan, Allocation, ImportanceKind, LayerReport, Method,
    PruneConfig, PruneReport, SelectionSummary,
};
pub use structural::{
    block_prune, blocks_to_drop, das_block_importance, shortgpt_block_importance, BlockPruneReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KeepMask;
use crate::selection::SelectionKind;
use crate::tensor::Matrix;

/// Per-input-channel ℓ₂ norm of the chosen activation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputActivation {
    pub norms: Vec<f64>,
    pub token_count: usize,
    pub selection_kind: SelectionKind,
}

/// Running per-channel sum of squares across samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationAccumulator {
    sumsq: Vec<f64>,
    tokens: usize,
}

impl ActivationAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            sumsq: vec![0.0; channels],
            tokens: 0,
        }
    }

    /// Adds the listed rows of `x`, or every row when `rows` is `None`.
    pub fn add(&mut self, x: &Matrix, rows: Option<&[usize]>) -> Result<()> {
        if x.cols() != self.sumsq.len() {
            return Err(Error::Shape(format!(
                "activation width {} for {} channels",
                x.cols(),
                self.sumsq.len()
            )));
        }
        let mut push = |row: &[f32]| {
            for (s, &v) in self.sumsq.iter_mut().zip(row) {
                let v = f64::from(v);
                *s += v * v;
            }
        };
        match rows {
            Some(idx) => {
                for &r in idx {
                    push(x.row(r));
                }
                self.tokens += idx.len();
            }
            None => {
                for row in x.iter_rows() {
                    push(row);
                }
                self.tokens += x.rows();
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ActivationAccumulator) -> Result<()> {
        if other.sumsq.len() != self.sumsq.len() {
            return Err(Error::Shape("merging accumulators of different widths".into()));
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        self.tokens += other.tokens;
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn finish(&self, selection_kind: SelectionKind) -> Result<InputActivation> {
        if self.tokens == 0 {
            return Err(Error::InsufficientTokens { needed: 1, got: 0 });
        }
        Ok(InputActivation {
            norms: self.sumsq.iter().map(|s| s.sqrt()).collect(),
            token_count: self.tokens,
            selection_kind,
        })
    }
}

/// Norms over all rows of `x`.
pub fn input_activation(x: &Matrix, selection_kind: SelectionKind) -> Result<InputActivation> {
    let mut acc = ActivationAccumulator::new(x.cols());
    acc.add(x, None)?;
    acc.finish(selection_kind)
}

/// `|W|`.
pub fn importance_magnitude(w: &Matrix) -> Matrix<f64> {
    w.map(|v| f64::from(v.abs()))
}

/// `I[o, c] = ‖X_c‖₂ · |W[o, c]|`.
pub fn importance_wanda(w: &Matrix, act: &InputActivation) -> Result<Matrix<f64>> {
    if act.norms.len() != w.cols() {
        return Err(Error::Shape(format!(
            "{} activation norms for {} input channels",
            act.norms.len(),
            w.cols()
        )));
    }
    let cols = w.cols();
    Ok(Matrix::from_fn(w.rows(), cols, |r, c| act.norms[c] * f64::from(w.get(r, c).abs())))
}

/// Which weights are ranked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    #[default]
    PerOutputRow,
    PerLayer,
}

impl std::str::FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "per_output_row" => Ok(GroupKind::PerOutputRow),
            "layer" | "per_layer" => Ok(GroupKind::PerLayer),
            other => Err(Error::Config(format!("unknown group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub keep: KeepMask,
    pub achieved_ratio: f64,
}

/// Entries dropped from a group of `n` at `ratio`. The small slack keeps
/// products such as `0.3 · 10` from landing just under an integer.
pub fn drop_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Drops the lowest-importance entries of each group; equal scores drop
/// the lower flattened index first.
pub fn make_mask(importance: &Matrix<f64>, ratio: f64, group: GroupKind) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let (rows, cols) = importance.shape();
    let mut keep = vec![true; rows * cols];
    let scores = importance.as_slice();
    let mut drop_lowest = |range: std::ops::Range<usize>| {
        let mut order: Vec<usize> = range.collect();
        let k = drop_count(ratio, order.len());
        if k == 0 {
            return;
        }
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        for &i in &order[..k] {
            keep[i] = false;
        }
    };
    match group {
        GroupKind::PerOutputRow => {
            for r in 0..rows {
                drop_lowest(r * cols..(r + 1) * cols);
            }
        }
        GroupKind::PerLayer => drop_lowest(0..rows * cols),
    }
    let keep = KeepMask::from_vec(rows, cols, keep)?;
    let achieved_ratio = keep.sparsity();
    Ok(PruneMask { keep, achieved_ratio })
}
