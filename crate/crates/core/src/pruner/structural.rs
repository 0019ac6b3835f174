//! Depth pruning: removing whole blocks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diversity::{block_input_output_similarity, ImportanceMode, PairSampling};
use crate::error::{Error, Result};
use crate::model::{forward, CaptureFlags, TokenSequence, ToyModel};
use crate::pruner::{calibration_diversity, drop_count};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPruneReport {
    pub importances: Vec<f64>,
    /// Original indices of the removed blocks, ascending.
    pub removed: Vec<usize>,
}

/// Blocks to remove at `ratio`: the lowest scores, deeper blocks first
/// among equals.
pub fn blocks_to_drop(importances: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("block ratio {ratio} outside [0, 1]")));
    }
    if let Some(v) = importances.iter().find(|v| !v.is_finite()) {
        return Err(Error::Config(format!("block importance {v} is not finite")));
    }
    let n = importances.len();
    let k = drop_count(ratio, n);
    if k >= n {
        return Err(Error::Config(format!("ratio {ratio} would remove all {n} blocks")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| importances[a].total_cmp(&importances[b]).then(b.cmp(&a)));
    let mut drop = order[..k].to_vec();
    drop.sort_unstable();
    Ok(drop)
}

/// Removes the `⌊ratio · n_blocks⌋` least important blocks.
pub fn block_prune(model: &ToyModel, importances: &[f64], ratio: f64) -> Result<(ToyModel, BlockPruneReport)> {
    if importances.len() != model.n_blocks() {
        return Err(Error::Shape(format!(
            "{} block scores for {} blocks",
            importances.len(),
            model.n_blocks()
        )));
    }
    let removed = blocks_to_drop(importances, ratio)?;
    let keep: Vec<usize> = (0..model.n_blocks()).filter(|b| !removed.contains(b)).collect();
    let reduced = model.retain_blocks(&keep)?;
    Ok((
        reduced,
        BlockPruneReport {
            importances: importances.to_vec(),
            removed,
        },
    ))
}

/// `1 − mean cos(block input, block output)` per block, averaged over the
/// calibration samples.
pub fn shortgpt_block_importance(model: &ToyModel, calib: &[TokenSequence]) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(Error::Config("block importance needs calibration data".into()));
    }
    let flags = CaptureFlags {
        block_io: true,
        ..CaptureFlags::none()
    };
    let per_sample: Vec<Vec<f64>> = calib
        .par_iter()
        .map(|seq| {
            let (_, trace) = forward(model, seq, flags)?;
            (0..model.n_blocks())
                .map(|b| {
                    let (i, o) = trace.block_io(b)?;
                    block_input_output_similarity(i, o)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; model.n_blocks()];
    for s in &per_sample {
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
    }
    Ok(sums.into_iter().map(|s| 1.0 - s / calib.len() as f64).collect())
}

/// Mean output diversity of each block's seven projections.
pub fn das_block_importance(
    model: &ToyModel,
    calib: &[TokenSequence],
    mode: ImportanceMode,
    sampling: PairSampling,
) -> Result<Vec<f64>> {
    let stats = calibration_diversity(model, calib, mode, sampling)?;
    let mut sums = vec![(0.0, 0usize); model.n_blocks()];
    for (id, s) in &stats {
        sums[id.block].0 += s.importance;
        sums[id.block].1 += 1;
    }
    Ok(sums.into_iter().map(|(s, n)| s / n as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_drop_deeper_blocks() {
        assert_eq!(blocks_to_drop(&[0.5, 0.5, 0.5, 0.5], 0.5).unwrap(), vec![2, 3]);
        assert_eq!(blocks_to_drop(&[0.9, 0.1, 0.8, 0.7], 0.25).unwrap(), vec![1]);
        assert!(blocks_to_drop(&[0.9, 0.1], 1.0).is_err());
        assert_eq!(blocks_to_drop(&[0.9, 0.1], 0.0).unwrap(), Vec::<usize>::new());
    }
}
