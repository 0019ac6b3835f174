//! Per-layer sparsity ratios under a parameter-weighted global budget.
//!
//! Every non-uniform allocator maps scores to a bounded deviation around
//! the target, `δ_l = λ·(1 − 2ŝ_l)` with `ŝ` the min-max normalized score,
//! then finds the shift `c` for which `Σ w_l·clamp(c + δ_l, 0, 1) / Σ w_l`
//! hits the target exactly. Higher scores always get lower ratios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerId;
use crate::tensor::Matrix;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_OWL_M: f64 = 5.0;
pub const DEFAULT_OWL_LAMBDA: f64 = 0.08;

/// Tolerance on the parameter-weighted mean ratio.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: LayerId,
    pub param_count: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub target: f64,
    pub lambda: f64,
    pub entries: Vec<PlanEntry>,
}

impl SparsityPlan {
    pub fn ratio_of(&self, id: &LayerId) -> Option<f64> {
        self.entries.iter().find(|e| e.layer == *id).map(|e| e.ratio)
    }

    /// Parameter-weighted mean ratio.
    pub fn achieved(&self) -> f64 {
        let (num, den) = self.entries.iter().fold((0.0, 0.0), |(n, d), e| {
            let w = e.param_count as f64;
            (n + w * e.ratio, d + w)
        });
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// `layer id → ratio`, keyed by the display form (`b0.q`).
    pub fn ratio_map(&self) -> BTreeMap<String, f64> {
        self.entries.iter().map(|e| (e.layer.to_string(), e.ratio)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| !(0.0..=1.0).contains(&e.ratio)) {
            return Err(Error::Config(format!("ratio {} of {} is outside [0, 1]", e.ratio, e.layer)));
        }
        let got = self.achieved();
        if (got - self.target).abs() > BUDGET_TOLERANCE {
            return Err(Error::Config(format!("plan averages {got} but targets {}", self.target)));
        }
        Ok(())
    }
}

/// One prunable layer with its score for allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: LayerId,
    pub param_count: usize,
    pub importance: f64,
}

fn check_target(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("target sparsity {p} must lie in (0, 1)")));
    }
    Ok(())
}

/// Min-max normalization; a constant vector maps to 0.5 everywhere.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Solves for ratios `clamp(c + δ_l, 0, 1)` with weighted mean `p`.
fn solve_shift(deltas: &[f64], weights: &[f64], p: f64, labels: &dyn Fn(usize) -> String) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("layers carry no parameters".into()));
    }
    if deltas.iter().all(|&d| d == deltas[0]) {
        // Common case (λ = 0 or flat scores): every layer sits at the target.
        let c = p - deltas[0];
        let r = (c + deltas[0]).clamp(0.0, 1.0);
        return Ok(vec![r; deltas.len()]);
    }
    let mean_at = |c: f64| -> f64 {
        deltas
            .iter()
            .zip(weights)
            .map(|(d, w)| w * (c + d).clamp(0.0, 1.0))
            .sum::<f64>()
            / total
    };
    let mut breaks: Vec<f64> = deltas.iter().flat_map(|d| [-d, 1.0 - d]).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    // The weighted mean is continuous and non-decreasing in c, from 0 at the
    // first breakpoint to 1 at the last; find the linear piece holding p.
    let mut lo = breaks[0];
    let mut hi = breaks[breaks.len() - 1];
    for w in breaks.windows(2) {
        if mean_at(w[1]) >= p {
            lo = w[0];
            hi = w[1];
            break;
        }
    }
    let mid = 0.5 * (lo + hi);
    let mut upper = 0.0;
    let mut free_w = 0.0;
    let mut free_d = 0.0;
    for (d, w) in deltas.iter().zip(weights) {
        let r = mid + d;
        if r >= 1.0 {
            upper += w;
        } else if r > 0.0 {
            free_w += w;
            free_d += w * d;
        }
    }
    let c = if free_w > 0.0 {
        ((p * total - upper - free_d) / free_w).clamp(lo, hi)
    } else {
        lo
    };
    let ratios: Vec<f64> = deltas.iter().map(|d| (c + d).clamp(0.0, 1.0)).collect();
    let got = ratios.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>() / total;
    if (got - p).abs() > BUDGET_TOLERANCE {
        let binding = ratios
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == 0.0 || r == 1.0)
            .map(|(i, _)| labels(i))
            .collect();
        return Err(Error::Infeasible { binding });
    }
    Ok(ratios)
}

/// Ratios for raw scores: higher score, lower ratio.
pub fn deviation_ratios(scores: &[f64], param_counts: &[usize], p: f64, lambda: f64) -> Result<Vec<f64>> {
    check_inputs(scores, param_counts, p, lambda)?;
    let s_hat = normalize_min_max(scores);
    let deltas: Vec<f64> = s_hat.iter().map(|s| lambda * (1.0 - 2.0 * s)).collect();
    let weights: Vec<f64> = param_counts.iter().map(|&c| c as f64).collect();
    solve_shift(&deltas, &weights, p, &|i| format!("#{i}"))
}

fn check_inputs(scores: &[f64], param_counts: &[usize], p: f64, lambda: f64) -> Result<()> {
    check_target(p)?;
    if scores.is_empty() {
        return Err(Error::Config("no layers to allocate".into()));
    }
    if scores.len() != param_counts.len() {
        return Err(Error::Shape(format!("{} scores for {} layers", scores.len(), param_counts.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda {lambda} must be finite and non-negative")));
    }
    if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Config(format!("importance {s} must be finite and non-negative")));
    }
    Ok(())
}

fn plan_from(scores: &[LayerScore], p: f64, lambda: f64) -> Result<SparsityPlan> {
    let values: Vec<f64> = scores.iter().map(|s| s.importance).collect();
    let counts: Vec<usize> = scores.iter().map(|s| s.param_count).collect();
    check_inputs(&values, &counts, p, lambda)?;
    let s_hat = normalize_min_max(&values);
    let deltas: Vec<f64> = s_hat.iter().map(|s| lambda * (1.0 - 2.0 * s)).collect();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let ratios = solve_shift(&deltas, &weights, p, &|i| scores[i].layer.to_string())?;
    Ok(SparsityPlan {
        target: p,
        lambda,
        entries: scores
            .iter()
            .zip(ratios)
            .map(|(s, ratio)| PlanEntry {
                layer: s.layer,
                param_count: s.param_count,
                ratio,
            })
            .collect(),
    })
}

/// Diversity-aware allocation over individual layers.
pub fn allocate_das(scores: &[LayerScore], p: f64, lambda: f64) -> Result<SparsityPlan> {
    plan_from(scores, p, lambda)
}

/// Allocation at block granularity: each block's score is the mean of its
/// layers' scores and its weight the sum of their parameters.
pub fn allocate_blockwise_das(scores: &[LayerScore], p: f64, lambda: f64) -> Result<SparsityPlan> {
    let mut blocks: BTreeMap<usize, (f64, usize, usize)> = BTreeMap::new();
    for s in scores {
        let e = blocks.entry(s.layer.block).or_insert((0.0, 0, 0));
        e.0 += s.importance;
        e.1 += 1;
        e.2 += s.param_count;
    }
    let order: Vec<usize> = blocks.keys().copied().collect();
    let block_scores: Vec<f64> = blocks.values().map(|(sum, n, _)| sum / *n as f64).collect();
    let block_params: Vec<usize> = blocks.values().map(|b| b.2).collect();
    check_inputs(&block_scores, &block_params, p, lambda)?;
    let ratios = {
        let s_hat = normalize_min_max(&block_scores);
        let deltas: Vec<f64> = s_hat.iter().map(|s| lambda * (1.0 - 2.0 * s)).collect();
        let weights: Vec<f64> = block_params.iter().map(|&c| c as f64).collect();
        solve_shift(&deltas, &weights, p, &|i| format!("block {}", order[i]))?
    };
    let by_block: BTreeMap<usize, f64> = order.into_iter().zip(ratios).collect();
    Ok(SparsityPlan {
        target: p,
        lambda,
        entries: scores
            .iter()
            .map(|s| PlanEntry {
                layer: s.layer,
                param_count: s.param_count,
                ratio: by_block[&s.layer.block],
            })
            .collect(),
    })
}

/// Same ratio for every layer.
pub fn allocate_uniform(layers: &[(LayerId, usize)], p: f64) -> Result<SparsityPlan> {
    check_target(p)?;
    if layers.is_empty() {
        return Err(Error::Config("no layers to allocate".into()));
    }
    Ok(SparsityPlan {
        target: p,
        lambda: 0.0,
        entries: layers
            .iter()
            .map(|&(layer, param_count)| PlanEntry {
                layer,
                param_count,
                ratio: p,
            })
            .collect(),
    })
}

/// Fraction of entries of `importance` strictly above `m` times its mean.
pub fn owl_outlier_ratio(importance: &Matrix<f64>, m: f64) -> Result<f64> {
    if !(m > 1.0) {
        return Err(Error::Config(format!("outlier multiplier {m} must exceed 1")));
    }
    let n = importance.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mean = importance.as_slice().iter().sum::<f64>() / n as f64;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let cut = m * mean;
    let count = importance.as_slice().iter().filter(|&&v| v > cut).count();
    Ok(count as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwlStats {
    pub m: f64,
    pub ratios: Vec<(LayerId, f64)>,
}

/// Outlier-weighted allocation: layers with more outliers keep more weights.
pub fn allocate_owl(stats: &OwlStats, param_counts: &[usize], p: f64, lambda: f64) -> Result<SparsityPlan> {
    if stats.ratios.len() != param_counts.len() {
        return Err(Error::Shape(format!(
            "{} outlier ratios for {} layers",
            stats.ratios.len(),
            param_counts.len()
        )));
    }
    let scores: Vec<LayerScore> = stats
        .ratios
        .iter()
        .zip(param_counts)
        .map(|(&(layer, r), &param_count)| LayerScore {
            layer,
            param_count,
            importance: r,
        })
        .collect();
    plan_from(&scores, p, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProjKind;

    fn score(block: usize, kind: ProjKind, params: usize, importance: f64) -> LayerScore {
        LayerScore {
            layer: LayerId { block, kind },
            param_count: params,
            importance,
        }
    }

    #[test]
    fn equal_scores_give_uniform() {
        let s = vec![score(0, ProjKind::Q, 10, 0.3), score(0, ProjKind::K, 30, 0.3)];
        let plan = allocate_das(&s, 0.5, 0.1).unwrap();
        assert!(plan.entries.iter().all(|e| e.ratio == 0.5));
    }

    #[test]
    fn clamped_layers_push_the_rest() {
        let r = deviation_ratios(&[0.0, 1.0, 1.0], &[1, 1, 1], 0.95, 0.2).unwrap();
        assert_eq!(r[0], 1.0);
        let mean = r.iter().sum::<f64>() / 3.0;
        assert!((mean - 0.95).abs() < 1e-12);
        assert!(r[1] < 1.0 && r[1] == r[2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(deviation_ratios(&[1.0], &[1], 1.0, 0.1).is_err());
        assert!(deviation_ratios(&[1.0], &[1], 0.5, -0.1).is_err());
        assert!(deviation_ratios(&[f64::NAN], &[1], 0.5, 0.1).is_err());
        assert!(deviation_ratios(&[], &[], 0.5, 0.1).is_err());
        assert!(matches!(deviation_ratios(&[1.0, 2.0], &[0, 0], 0.5, 0.1), Err(Error::Degenerate(_))));
        assert!(allocate_uniform(&[], 0.5).is_err());
    }

    #[test]
    fn owl_ratio_arithmetic() {
        let i = Matrix::from_vec(1, 8, vec![0.0, 0.0, 0.0, 1000.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(owl_outlier_ratio(&i, 5.0).unwrap(), 0.125);
        assert_eq!(owl_outlier_ratio(&Matrix::zeros(2, 2), 5.0).unwrap(), 0.0);
        assert!(owl_outlier_ratio(&i, 1.0).is_err());
    }
}
