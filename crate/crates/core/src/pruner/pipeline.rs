//! End-to-end unstructured pruning of a [`ToyModel`].
//!
//! Calibration statistics are streamed: each sample is run through the
//! model, reduced to per-layer sums on the spot, and dropped. Samples are
//! processed in parallel and their sums merged in sample order, so results
//! do not depend on the thread count.
//!
//! Masks for every layer are computed first and applied afterwards. With
//! `sequential` set, blocks are instead pruned one at a time and later
//! blocks see activations of the already-pruned prefix.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    allocate_blockwise_das, allocate_das, allocate_owl, allocate_uniform, owl_outlier_ratio, LayerScore, OwlStats,
    SparsityPlan, DEFAULT_LAMBDA, DEFAULT_OWL_LAMBDA, DEFAULT_OWL_M,
};
use crate::diversity::{DiversityAccumulator, DiversityStats, ImportanceMode, PairSampling, SampleDiversity};
use crate::error::{Error, Result};
use crate::model::{forward, modality_groups, CaptureFlags, LayerId, ProjKind, TokenSequence, ToyModel};
use crate::pruner::{
    importance_magnitude, importance_wanda, make_mask, ActivationAccumulator, GroupKind, InputActivation,
};
use crate::selection::{select_variant, token_contributions, AmiaParams, SelectionInputs, SelectionKind, StopReason};
use crate::tensor::Matrix;

/// Named method presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Magnitude,
    Wanda,
    Owl,
    Das,
    Amia,
    Tamp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Magnitude,
        Method::Wanda,
        Method::Owl,
        Method::Das,
        Method::Amia,
        Method::Tamp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::Owl => "owl",
            Method::Das => "das",
            Method::Amia => "amia",
            Method::Tamp => "tamp",
        }
    }

    pub fn importance(self) -> ImportanceKind {
        match self {
            Method::Magnitude => ImportanceKind::Magnitude,
            _ => ImportanceKind::Wanda,
        }
    }

    pub fn allocation(self) -> Allocation {
        match self {
            Method::Magnitude | Method::Wanda | Method::Amia => Allocation::Uniform,
            Method::Owl => Allocation::Owl,
            Method::Das | Method::Tamp => Allocation::Das,
        }
    }

    pub fn selection(self) -> SelectionKind {
        match self {
            Method::Amia | Method::Tamp => SelectionKind::Amia,
            _ => SelectionKind::Full,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Magnitude,
    Wanda,
}

/// How per-layer ratios are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Uniform,
    /// Modality-aware output diversity per layer.
    Das,
    /// Diversity over all tokens, ignoring modality.
    AllTokenDas,
    /// Diversity averaged per block, one ratio per block.
    BlockDas,
    Owl,
}

impl Allocation {
    pub fn as_str(self) -> &'static str {
        match self {
            Allocation::Uniform => "uniform",
            Allocation::Das => "das",
            Allocation::AllTokenDas => "all-token-das",
            Allocation::BlockDas => "block-das",
            Allocation::Owl => "owl",
        }
    }

    fn uses_diversity(self) -> bool {
        matches!(self, Allocation::Das | Allocation::AllTokenDas | Allocation::BlockDas)
    }
}

impl std::str::FromStr for Allocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Allocation::Uniform,
            Allocation::Das,
            Allocation::AllTokenDas,
            Allocation::BlockDas,
            Allocation::Owl,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown allocation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    pub sparsity: f64,
    pub lambda: f64,
    pub owl_m: f64,
    pub owl_lambda: f64,
    pub group: GroupKind,
    /// Overrides the method's allocation.
    pub allocation: Option<Allocation>,
    /// Overrides the method's token selection.
    pub selection: Option<SelectionKind>,
    pub amia: AmiaParams,
    pub pair_sampling: PairSampling,
    pub seed: u64,
    pub sequential: bool,
}

impl PruneConfig {
    pub fn new(method: Method, sparsity: f64) -> Self {
        Self {
            method,
            sparsity,
            lambda: DEFAULT_LAMBDA,
            owl_m: DEFAULT_OWL_M,
            owl_lambda: DEFAULT_OWL_LAMBDA,
            group: GroupKind::default(),
            allocation: None,
            selection: None,
            amia: AmiaParams::default(),
            pair_sampling: PairSampling::default(),
            seed: 0,
            sequential: false,
        }
    }

    pub fn resolved_allocation(&self) -> Allocation {
        self.allocation.unwrap_or_else(|| self.method.allocation())
    }

    pub fn resolved_selection(&self) -> SelectionKind {
        self.selection.unwrap_or_else(|| self.method.selection())
    }

    fn diversity_mode(&self) -> ImportanceMode {
        match self.resolved_allocation() {
            Allocation::AllTokenDas => ImportanceMode::AllToken,
            _ => ImportanceMode::ModalityAware,
        }
    }

    fn needs_diversity(&self) -> bool {
        self.resolved_allocation().uses_diversity() || self.resolved_selection() == SelectionKind::Amia
    }

    fn needs_activations(&self) -> bool {
        self.method.importance() == ImportanceKind::Wanda
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::Config(format!("sparsity {} must lie in (0, 1)", self.sparsity)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.owl_lambda >= 0.0 && self.owl_lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if !(self.owl_m > 1.0) {
            return Err(Error::Config(format!("outlier multiplier {} must exceed 1", self.owl_m)));
        }
        if self.resolved_allocation() == Allocation::Owl && self.method.importance() == ImportanceKind::Magnitude {
            return Err(Error::Config("outlier allocation needs activation-aware importance".into()));
        }
        self.amia.validate()
    }
}

/// Per-layer view of how the adaptive or ablation selection behaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub kind: SelectionKind,
    pub samples: usize,
    pub tokens_total: usize,
    pub tokens_selected: usize,
    /// `(modality, total, selected)` in modality-id order.
    pub per_modality: Vec<(String, usize, usize)>,
    pub fallbacks: usize,
    pub stopped_threshold: usize,
    pub stopped_exhausted: usize,
    pub stopped_max_count: usize,
    pub threshold: Option<f64>,
    pub mean_final_mmd: Option<f64>,
    /// MMD after each pick for the first calibration sample.
    pub first_trace: Vec<f64>,
}

impl SelectionSummary {
    fn new(kind: SelectionKind) -> Self {
        Self {
            kind,
            samples: 0,
            tokens_total: 0,
            tokens_selected: 0,
            per_modality: Vec::new(),
            fallbacks: 0,
            stopped_threshold: 0,
            stopped_exhausted: 0,
            stopped_max_count: 0,
            threshold: None,
            mean_final_mmd: None,
            first_trace: Vec::new(),
        }
    }

    fn merge(&mut self, other: SelectionSummary) {
        let n_before = self.stopped_threshold + self.stopped_exhausted + self.stopped_max_count;
        let n_other = other.stopped_threshold + other.stopped_exhausted + other.stopped_max_count;
        self.mean_final_mmd = match (self.mean_final_mmd, other.mean_final_mmd) {
            (Some(a), Some(b)) => Some((a * n_before as f64 + b * n_other as f64) / (n_before + n_other) as f64),
            (a, b) => a.or(b),
        };
        if self.samples == 0 {
            self.first_trace = other.first_trace;
        }
        self.samples += other.samples;
        self.tokens_total += other.tokens_total;
        self.tokens_selected += other.tokens_selected;
        for (name, total, sel) in other.per_modality {
            match self.per_modality.iter_mut().find(|(n, _, _)| *n == name) {
                Some(e) => {
                    e.1 += total;
                    e.2 += sel;
                }
                None => self.per_modality.push((name, total, sel)),
            }
        }
        self.fallbacks += other.fallbacks;
        self.stopped_threshold += other.stopped_threshold;
        self.stopped_exhausted += other.stopped_exhausted;
        self.stopped_max_count += other.stopped_max_count;
        self.threshold = self.threshold.or(other.threshold);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: LayerId,
    pub param_count: usize,
    pub planned_ratio: f64,
    pub achieved_ratio: f64,
    pub diversity: Option<DiversityStats>,
    pub outlier_ratio: Option<f64>,
    pub selection: Option<SelectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: Method,
    pub allocation: Allocation,
    pub selection: SelectionKind,
    pub group: GroupKind,
    pub sequential: bool,
    pub calibration_samples: usize,
    pub target: f64,
    /// Parameter-weighted fraction of zeroed weights after pruning.
    pub achieved: f64,
    pub plan: SparsityPlan,
    pub layers: Vec<LayerReport>,
}

fn wrap(id: LayerId) -> impl Fn(Error) -> Error {
    move |e| Error::Layer {
        layer: id.to_string(),
        source: Box::new(e),
    }
}

fn layer_index(id: LayerId) -> usize {
    id.block * ProjKind::ALL.len() + id.kind.index()
}

fn sample_seed(seed: u64, sample: usize, layer: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [sample as u64, layer as u64] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Output diversity of every layer over the calibration set.
pub fn calibration_diversity(
    model: &ToyModel,
    calib: &[TokenSequence],
    mode: ImportanceMode,
    sampling: PairSampling,
) -> Result<Vec<(LayerId, DiversityStats)>> {
    if calib.is_empty() {
        return Err(Error::Config("diversity needs at least one calibration sample".into()));
    }
    let ids = model.layer_ids();
    let flags = CaptureFlags {
        outputs: true,
        ..CaptureFlags::none()
    };
    let per_sample: Vec<Vec<SampleDiversity>> = calib
        .par_iter()
        .map(|seq| {
            let (_, trace) = forward(model, seq, flags)?;
            ids.iter()
                .map(|&id| Ok(SampleDiversity::compute(trace.output(id)?, seq.spans(), sampling)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut accs = vec![DiversityAccumulator::new(); ids.len()];
    for sample in &per_sample {
        for (acc, s) in accs.iter_mut().zip(sample) {
            acc.add(s);
        }
    }
    ids.iter()
        .zip(accs)
        .map(|(&id, acc)| Ok((id, acc.finish(mode).map_err(wrap(id))?)))
        .collect()
}

struct LayerStats {
    acc: ActivationAccumulator,
    summary: SelectionSummary,
}

/// Activation sums for every layer of `blocks`, using `selection` to pick
/// rows. `diversity` supplies each layer's threshold scale when needed.
fn activation_pass(
    model: &ToyModel,
    calib: &[TokenSequence],
    blocks: Range<usize>,
    selection: SelectionKind,
    diversity: Option<&[f64]>,
    cfg: &PruneConfig,
) -> Result<Vec<LayerStats>> {
    let ids: Vec<LayerId> = model.layer_ids().into_iter().filter(|id| blocks.contains(&id.block)).collect();
    let needs_attention = matches!(selection, SelectionKind::Amia | SelectionKind::AttentionAboveMean);
    let flags = CaptureFlags {
        inputs: true,
        outputs: selection == SelectionKind::Amia,
        attention: needs_attention,
        block_io: false,
        stop_after: Some(blocks.end),
    };
    if selection == SelectionKind::Amia && diversity.is_none() {
        return Err(Error::Config("adaptive selection needs layer diversity".into()));
    }

    let per_sample: Vec<Vec<LayerStats>> = calib
        .par_iter()
        .enumerate()
        .map(|(si, seq)| {
            let (_, trace) = forward(model, seq, flags)?;
            let groups = modality_groups(seq.spans());
            let mut block_a: Option<(usize, Vec<f64>)> = None;
            ids.iter()
                .map(|&id| {
                    let x = trace.input(id)?;
                    let mut acc = ActivationAccumulator::new(x.cols());
                    let mut summary = SelectionSummary::new(selection);
                    if selection == SelectionKind::Full {
                        acc.add(x, None)?;
                        summary.samples = 1;
                        summary.tokens_total = x.rows();
                        summary.tokens_selected = x.rows();
                        summary.per_modality = groups
                            .iter()
                            .map(|(m, idx)| (m.name.clone(), idx.len(), idx.len()))
                            .collect();
                        return Ok(LayerStats { acc, summary });
                    }
                    if needs_attention && block_a.as_ref().map(|(b, _)| *b) != Some(id.block) {
                        block_a = Some((id.block, token_contributions(trace.attention(id.block)?)?.a));
                    }
                    let empty: Vec<f64> = Vec::new();
                    let a = block_a.as_ref().map(|(_, a)| a).unwrap_or(&empty);
                    let z = if selection == SelectionKind::Amia { trace.output(id)? } else { x };
                    let s = diversity.map(|d| d[layer_index(id)]).unwrap_or(0.0);
                    let chosen = select_variant(
                        selection,
                        SelectionInputs {
                            a,
                            z,
                            diversity: s,
                            params: &cfg.amia,
                            seed: sample_seed(cfg.seed, si, layer_index(id)),
                        },
                    )
                    .map_err(wrap(id))?;
                    acc.add(x, Some(&chosen.indices))?;

                    summary.samples = 1;
                    summary.tokens_total = x.rows();
                    summary.tokens_selected = chosen.indices.len();
                    let mut picked = vec![false; x.rows()];
                    for &i in &chosen.indices {
                        picked[i] = true;
                    }
                    summary.per_modality = groups
                        .iter()
                        .map(|(m, idx)| (m.name.clone(), idx.len(), idx.iter().filter(|&&i| picked[i]).count()))
                        .collect();
                    summary.fallbacks = usize::from(chosen.fell_back);
                    if let Some(r) = chosen.result {
                        match r.stopped_by {
                            StopReason::Threshold => summary.stopped_threshold = 1,
                            StopReason::Exhausted => summary.stopped_exhausted = 1,
                            StopReason::MaxCount => summary.stopped_max_count = 1,
                        }
                        summary.threshold = Some(r.threshold);
                        summary.mean_final_mmd = r.mmd_trace.last().copied();
                        summary.first_trace = r.mmd_trace;
                    }
                    Ok(LayerStats { acc, summary })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<LayerStats> = ids
        .iter()
        .map(|&id| {
            let cols = model.layer(id).weight().cols();
            LayerStats {
                acc: ActivationAccumulator::new(cols),
                summary: SelectionSummary::new(selection),
            }
        })
        .collect();
    for sample in per_sample {
        for (dst, src) in out.iter_mut().zip(sample) {
            dst.acc.merge(&src.acc)?;
            dst.summary.merge(src.summary);
        }
    }
    Ok(out)
}

fn importance_for(model: &ToyModel, id: LayerId, act: Option<&InputActivation>) -> Result<Matrix<f64>> {
    let w = model.layer(id).weight();
    match act {
        None => Ok(importance_magnitude(w)),
        Some(a) => importance_wanda(w, a).map_err(wrap(id)),
    }
}

struct Importances {
    matrices: Vec<Matrix<f64>>,
    summaries: Vec<Option<SelectionSummary>>,
}

/// Importance matrices for the layers of `blocks` on `model`'s current
/// weights and activations.
fn block_importances(
    model: &ToyModel,
    calib: &[TokenSequence],
    blocks: Range<usize>,
    diversity: Option<&[f64]>,
    cfg: &PruneConfig,
) -> Result<Importances> {
    let ids: Vec<LayerId> = model.layer_ids().into_iter().filter(|id| blocks.contains(&id.block)).collect();
    if !cfg.needs_activations() {
        let matrices = ids.iter().map(|&id| importance_for(model, id, None)).collect::<Result<_>>()?;
        return Ok(Importances {
            matrices,
            summaries: vec![None; ids.len()],
        });
    }
    if calib.is_empty() {
        return Err(Error::Config(format!("method {} needs calibration data", cfg.method)));
    }
    let selection = cfg.resolved_selection();
    let stats = activation_pass(model, calib, blocks, selection, diversity, cfg)?;
    let mut matrices = Vec::with_capacity(ids.len());
    let mut summaries = Vec::with_capacity(ids.len());
    for (&id, st) in ids.iter().zip(stats) {
        let act = st.acc.finish(selection).map_err(wrap(id))?;
        matrices.push(importance_for(model, id, Some(&act))?);
        summaries.push(Some(st.summary));
    }
    Ok(Importances { matrices, summaries })
}

fn plan_for(
    model: &ToyModel,
    cfg: &PruneConfig,
    diversity: Option<&[(LayerId, DiversityStats)]>,
    dense_importance: Option<&[Matrix<f64>]>,
) -> Result<(SparsityPlan, Vec<Option<f64>>)> {
    let ids = model.layer_ids();
    let counts: Vec<usize> = ids.iter().map(|&id| model.layer(id).param_count()).collect();
    let div_scores = || -> Result<Vec<LayerScore>> {
        let d = diversity.ok_or_else(|| Error::Config("diversity allocation without diversity stats".into()))?;
        Ok(d.iter()
            .zip(&counts)
            .map(|((id, s), &param_count)| LayerScore {
                layer: *id,
                param_count,
                importance: s.importance,
            })
            .collect())
    };
    let mut outliers = vec![None; ids.len()];
    let plan = match cfg.resolved_allocation() {
        Allocation::Uniform => {
            let layers: Vec<(LayerId, usize)> = ids.iter().copied().zip(counts.iter().copied()).collect();
            allocate_uniform(&layers, cfg.sparsity)?
        }
        Allocation::Das | Allocation::AllTokenDas => allocate_das(&div_scores()?, cfg.sparsity, cfg.lambda)?,
        Allocation::BlockDas => allocate_blockwise_das(&div_scores()?, cfg.sparsity, cfg.lambda)?,
        Allocation::Owl => {
            let imp = dense_importance.ok_or_else(|| Error::Config("outlier allocation without importance".into()))?;
            let ratios = ids
                .iter()
                .zip(imp)
                .map(|(&id, i)| Ok((id, owl_outlier_ratio(i, cfg.owl_m).map_err(wrap(id))?)))
                .collect::<Result<Vec<_>>>()?;
            for (o, (_, r)) in outliers.iter_mut().zip(&ratios) {
                *o = Some(*r);
            }
            allocate_owl(&OwlStats { m: cfg.owl_m, ratios }, &counts, cfg.sparsity, cfg.owl_lambda)?
        }
    };
    Ok((plan, outliers))
}

/// Plans per-layer ratios according to `cfg` and prunes.
pub fn prune_model(model: &ToyModel, calib: &[TokenSequence], cfg: &PruneConfig) -> Result<(ToyModel, PruneReport)> {
    cfg.validate()?;
    let diversity = if cfg.needs_diversity() {
        Some(calibration_diversity(model, calib, cfg.diversity_mode(), cfg.pair_sampling)?)
    } else {
        None
    };
    let div_values: Option<Vec<f64>> = diversity.as_ref().map(|d| d.iter().map(|(_, s)| s.importance).collect());
    let all = 0..model.n_blocks();

    // One dense pass feeds both the outlier statistics and, when pruning in
    // one shot, the masks themselves.
    let dense = if !cfg.sequential || cfg.resolved_allocation() == Allocation::Owl {
        Some(block_importances(model, calib, all, div_values.as_deref(), cfg)?)
    } else {
        None
    };
    let (plan, outliers) = plan_for(model, cfg, diversity.as_deref(), dense.as_ref().map(|d| d.matrices.as_slice()))?;
    let dense = if cfg.sequential { None } else { dense };
    finish(model, calib, cfg, plan, diversity, outliers, div_values, dense)
}

/// Prunes every layer at the ratio `plan` assigns it.
pub fn prune_with_plan(
    model: &ToyModel,
    calib: &[TokenSequence],
    cfg: &PruneConfig,
    plan: &SparsityPlan,
) -> Result<(ToyModel, PruneReport)> {
    cfg.amia.validate()?;
    let diversity = if cfg.resolved_selection() == SelectionKind::Amia && cfg.needs_activations() {
        Some(calibration_diversity(model, calib, cfg.diversity_mode(), cfg.pair_sampling)?)
    } else {
        None
    };
    let div_values: Option<Vec<f64>> = diversity.as_ref().map(|d| d.iter().map(|(_, s)| s.importance).collect());
    let outliers = vec![None; model.layer_ids().len()];
    finish(model, calib, cfg, plan.clone(), diversity, outliers, div_values, None)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &ToyModel,
    calib: &[TokenSequence],
    cfg: &PruneConfig,
    plan: SparsityPlan,
    diversity: Option<Vec<(LayerId, DiversityStats)>>,
    outliers: Vec<Option<f64>>,
    div_values: Option<Vec<f64>>,
    precomputed: Option<Importances>,
) -> Result<(ToyModel, PruneReport)> {
    let ids = model.layer_ids();
    let ratios: Vec<f64> = ids
        .iter()
        .map(|id| {
            plan.ratio_of(id)
                .ok_or_else(|| Error::Config(format!("plan does not cover layer {id}")))
        })
        .collect::<Result<_>>()?;

    let mut pruned = model.clone();
    let mut summaries: Vec<Option<SelectionSummary>> = vec![None; ids.len()];
    let mut achieved = vec![0.0; ids.len()];

    let mut commit = |pruned: &mut ToyModel, imp: Importances, offset: usize| -> Result<()> {
        let masks = imp
            .matrices
            .par_iter()
            .enumerate()
            .map(|(i, m)| make_mask(m, ratios[offset + i], cfg.group).map_err(wrap(ids[offset + i])))
            .collect::<Result<Vec<_>>>()?;
        for (i, (mask, summary)) in masks.into_iter().zip(imp.summaries).enumerate() {
            let id = ids[offset + i];
            pruned.layer_mut(id).apply_mask(mask.keep).map_err(wrap(id))?;
            achieved[offset + i] = mask.achieved_ratio;
            summaries[offset + i] = summary;
        }
        Ok(())
    };

    if cfg.sequential {
        for b in 0..model.n_blocks() {
            let imp = block_importances(&pruned, calib, b..b + 1, div_values.as_deref(), cfg)?;
            commit(&mut pruned, imp, b * ProjKind::ALL.len())?;
        }
    } else {
        let imp = match precomputed {
            Some(p) => p,
            None => block_importances(model, calib, 0..model.n_blocks(), div_values.as_deref(), cfg)?,
        };
        commit(&mut pruned, imp, 0)?;
    }

    let mut div_iter = diversity.map(|d| d.into_iter().map(|(_, s)| s).collect::<Vec<_>>());
    let layers: Vec<LayerReport> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| LayerReport {
            layer: id,
            param_count: model.layer(id).param_count(),
            planned_ratio: ratios[i],
            achieved_ratio: achieved[i],
            diversity: div_iter.as_mut().map(|d| d[i].clone()),
            outlier_ratio: outliers[i],
            selection: summaries[i].take(),
        })
        .collect();
    let total: usize = layers.iter().map(|l| l.param_count).sum();
    let dropped: f64 = layers.iter().map(|l| l.achieved_ratio * l.param_count as f64).sum();
    let report = PruneReport {
        method: cfg.method,
        allocation: cfg.resolved_allocation(),
        selection: cfg.resolved_selection(),
        group: cfg.group,
        sequential: cfg.sequential,
        calibration_samples: calib.len(),
        target: plan.target,
        achieved: if total == 0 { 0.0 } else { dropped / total as f64 },
        plan,
        layers,
    };
    Ok((pruned, report))
}
