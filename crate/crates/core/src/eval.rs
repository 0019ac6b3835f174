//! Fidelity metrics and analysis summaries.
//!
//! Pruned models are judged by how closely they reproduce the dense
//! model's layer outputs and final hidden states on held-out sequences.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::SparsityPlan;
use crate::error::{Error, Result};
use crate::model::{forward, ActivationTrace, CaptureFlags, LayerId, ModalityId, ProjKind, Span, TokenSequence, ToyModel};
use crate::tensor::{dot_f64, Matrix};

/// Relative error restricted to one modality's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityValue {
    pub modality: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: LayerId,
    /// `‖Z_dense − Z_pruned‖_F / ‖Z_dense‖_F` over all eval tokens.
    pub relative_error: f64,
    pub by_modality: Vec<ModalityValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub sequences: usize,
    pub tokens: usize,
    pub layers: Vec<LayerError>,
    /// Mean per-token cosine similarity of final hidden states.
    pub final_cosine: f64,
    pub final_cosine_by_modality: Vec<ModalityValue>,
    /// Relative Frobenius error of final hidden states.
    pub final_error: f64,
    pub final_error_by_modality: Vec<ModalityValue>,
}

impl EvalMetrics {
    /// Mean of the per-layer relative errors.
    pub fn mean_layer_error(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.relative_error).sum::<f64>() / self.layers.len() as f64
    }

    /// Reconstruction-derived task scores against a dense reference of 1:
    /// the clamped final cosine for each modality and for all tokens.
    pub fn task_scores(&self) -> Vec<TaskScore> {
        let mut out: Vec<TaskScore> = self
            .final_cosine_by_modality
            .iter()
            .map(|m| TaskScore {
                task: m.modality.clone(),
                pruned: m.value.max(0.0),
                reference: 1.0,
            })
            .collect();
        out.push(TaskScore {
            task: "all".into(),
            pruned: self.final_cosine.max(0.0),
            reference: 1.0,
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub pruned: f64,
    pub reference: f64,
}

/// Mean over tasks of `100 · pruned / reference`.
pub fn rel_avg(scores: &[TaskScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("no task scores".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(s.reference > 0.0)) {
        return Err(Error::Config(format!("reference score of `{}` must be positive", s.task)));
    }
    Ok(scores
        .iter()
        .map(|s| if s.pruned == s.reference { 100.0 } else { 100.0 * s.pruned / s.reference })
        .sum::<f64>()
        / scores.len() as f64)
}

/// Cosine of two rows; identical rows give exactly 1 and two zero rows
/// count as identical.
pub fn row_cosine(u: &[f32], v: &[f32]) -> f64 {
    let nu = dot_f64(u, u);
    let nv = dot_f64(v, v);
    if nu == 0.0 && nv == 0.0 {
        return 1.0;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot_f64(u, v) / (nu * nv).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Default)]
struct ErrSums {
    diff: f64,
    base: f64,
}

impl ErrSums {
    fn add_rows(&mut self, a: &Matrix, b: &Matrix, rows: impl Iterator<Item = usize>) {
        for r in rows {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                let (x, y) = (f64::from(*x), f64::from(*y));
                self.diff += (x - y) * (x - y);
                self.base += x * x;
            }
        }
    }

    fn merge(&mut self, o: &ErrSums) {
        self.diff += o.diff;
        self.base += o.base;
    }

    fn relative(&self) -> f64 {
        if self.diff == 0.0 {
            0.0
        } else if self.base == 0.0 {
            f64::INFINITY
        } else {
            (self.diff / self.base).sqrt()
        }
    }
}

#[derive(Debug, Clone, Default)]
struct SeqSums {
    tokens: usize,
    layers: Vec<(ErrSums, BTreeMap<ModalityId, ErrSums>)>,
    cos_sum: f64,
    cos_by: BTreeMap<ModalityId, (f64, usize)>,
    fin: ErrSums,
    fin_by: BTreeMap<ModalityId, ErrSums>,
}

impl SeqSums {
    fn merge(&mut self, o: SeqSums) {
        self.tokens += o.tokens;
        if self.layers.is_empty() {
            self.layers = vec![Default::default(); o.layers.len()];
        }
        for ((a, am), (b, bm)) in self.layers.iter_mut().zip(o.layers) {
            a.merge(&b);
            for (m, s) in bm {
                am.entry(m).or_default().merge(&s);
            }
        }
        self.cos_sum += o.cos_sum;
        for (m, (s, n)) in o.cos_by {
            let e = self.cos_by.entry(m).or_insert((0.0, 0));
            e.0 += s;
            e.1 += n;
        }
        self.fin.merge(&o.fin);
        for (m, s) in o.fin_by {
            self.fin_by.entry(m).or_default().merge(&s);
        }
    }
}

fn same_architecture(a: &ToyModel, b: &ToyModel) -> Result<()> {
    let (ca, cb) = (a.config(), b.config());
    if ca.d_model != cb.d_model || ca.d_ff != cb.d_ff || ca.n_heads != cb.n_heads || ca.n_blocks != cb.n_blocks {
        return Err(Error::Shape(format!("architectures differ: {ca:?} vs {cb:?}")));
    }
    Ok(())
}

/// Layer-wise and end-to-end fidelity of `pruned` against `dense`. Both
/// models run on the same sequences.
pub fn reconstruction_report(dense: &ToyModel, pruned: &ToyModel, eval: &[TokenSequence]) -> Result<EvalMetrics> {
    same_architecture(dense, pruned)?;
    compare_models(dense, pruned, eval, true)
}

/// End-to-end fidelity only; the models need to share `d_model` but may
/// differ in depth.
pub fn end_to_end_report(dense: &ToyModel, pruned: &ToyModel, eval: &[TokenSequence]) -> Result<EvalMetrics> {
    if dense.d_model() != pruned.d_model() {
        return Err(Error::Shape(format!("d_model {} vs {}", dense.d_model(), pruned.d_model())));
    }
    compare_models(dense, pruned, eval, false)
}

fn compare_models(dense: &ToyModel, pruned: &ToyModel, eval: &[TokenSequence], layers: bool) -> Result<EvalMetrics> {
    if eval.is_empty() {
        return Err(Error::Config("no evaluation sequences".into()));
    }
    let ids = if layers { dense.layer_ids() } else { Vec::new() };
    let flags = CaptureFlags {
        outputs: layers,
        ..CaptureFlags::none()
    };
    let per_seq: Vec<SeqSums> = eval
        .par_iter()
        .map(|seq| {
            let (hd, td) = forward(dense, seq, flags)?;
            let (hp, tp) = forward(pruned, seq, flags)?;
            let mut s = SeqSums {
                tokens: seq.len(),
                ..Default::default()
            };
            for &id in &ids {
                let (zd, zp) = (td.output(id)?, tp.output(id)?);
                let mut all = ErrSums::default();
                all.add_rows(zd, zp, 0..zd.rows());
                let mut by = BTreeMap::new();
                for sp in seq.spans() {
                    by.entry(sp.modality.clone())
                        .or_insert_with(ErrSums::default)
                        .add_rows(zd, zp, sp.range());
                }
                s.layers.push((all, by));
            }
            s.fin.add_rows(&hd, &hp, 0..hd.rows());
            for sp in seq.spans() {
                s.fin_by.entry(sp.modality.clone()).or_default().add_rows(&hd, &hp, sp.range());
                for r in sp.range() {
                    let c = row_cosine(hd.row(r), hp.row(r));
                    s.cos_sum += c;
                    let e = s.cos_by.entry(sp.modality.clone()).or_insert((0.0, 0));
                    e.0 += c;
                    e.1 += 1;
                }
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut total = SeqSums::default();
    for s in per_seq {
        total.merge(s);
    }
    let named = |m: &ModalityId, value: f64| ModalityValue {
        modality: m.name.clone(),
        value,
    };
    Ok(EvalMetrics {
        sequences: eval.len(),
        tokens: total.tokens,
        layers: ids
            .iter()
            .zip(&total.layers)
            .map(|(&layer, (all, by))| LayerError {
                layer,
                relative_error: all.relative(),
                by_modality: by.iter().map(|(m, s)| named(m, s.relative())).collect(),
            })
            .collect(),
        final_cosine: if total.tokens == 0 { 1.0 } else { total.cos_sum / total.tokens as f64 },
        final_cosine_by_modality: total
            .cos_by
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(m, (s, n))| named(m, s / *n as f64))
            .collect(),
        final_error: total.fin.relative(),
        final_error_by_modality: total.fin_by.iter().map(|(m, s)| named(m, s.relative())).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAttention {
    pub block: usize,
    /// Mean attention mass per modality, in modality-id order.
    pub masses: Vec<ModalityValue>,
}

/// Mean over the rows of `a` of the mass each modality's key span receives,
/// in modality-id order.
pub fn attention_mass_by_modality(a: &Matrix, spans: &[Span]) -> Result<Vec<ModalityValue>> {
    let n = a.rows();
    let covered: usize = spans.iter().map(|s| s.len).sum();
    if a.cols() != covered {
        return Err(Error::Shape(format!("attention over {} keys for {covered} span tokens", a.cols())));
    }
    let mut ids: Vec<&ModalityId> = spans.iter().map(|s| &s.modality).collect();
    ids.sort();
    ids.dedup();
    let mut masses = vec![0.0; ids.len()];
    for q in 0..n {
        let row = a.row(q);
        for sp in spans {
            let slot = ids.binary_search(&&sp.modality).expect("modality collected above");
            masses[slot] += sp.range().map(|k| f64::from(row[k])).sum::<f64>();
        }
    }
    Ok(ids
        .iter()
        .zip(masses)
        .map(|(m, s)| ModalityValue {
            modality: m.name.clone(),
            value: if n == 0 { 0.0 } else { s / n as f64 },
        })
        .collect())
}

/// For each block, the attention mass that lands on each modality's keys,
/// averaged over queries.
pub fn attention_by_modality(trace: &ActivationTrace) -> Result<Vec<BlockAttention>> {
    (0..trace.blocks.len())
        .map(|b| {
            Ok(BlockAttention {
                block: b,
                masses: attention_mass_by_modality(trace.attention(b)?, &trace.spans)?,
            })
        })
        .collect()
}

/// [`attention_by_modality`] averaged over sequences. A modality absent
/// from a sequence contributes zero mass for it.
pub fn attention_by_modality_over(model: &ToyModel, seqs: &[TokenSequence]) -> Result<Vec<BlockAttention>> {
    if seqs.is_empty() {
        return Err(Error::Config("no sequences".into()));
    }
    let flags = CaptureFlags {
        attention: true,
        ..CaptureFlags::none()
    };
    let per: Vec<Vec<BlockAttention>> = seqs
        .par_iter()
        .map(|s| {
            let (_, t) = forward(model, s, flags)?;
            attention_by_modality(&t)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<ModalityId> = seqs.iter().flat_map(|s| s.spans().iter().map(|sp| sp.modality.clone())).collect();
    order.sort();
    order.dedup();
    Ok((0..model.n_blocks())
        .map(|b| {
            let masses = order
                .iter()
                .map(|m| {
                    let sum: f64 = per
                        .iter()
                        .map(|p| {
                            p[b].masses
                                .iter()
                                .find(|v| v.modality == m.name)
                                .map_or(0.0, |v| v.value)
                        })
                        .sum();
                    ModalityValue {
                        modality: m.name.clone(),
                        value: sum / seqs.len() as f64,
                    }
                })
                .collect();
            BlockAttention { block: b, masses }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSparsity {
    pub kind: ProjKind,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSparsity {
    pub block: usize,
    /// Unweighted mean over the block's seven projections.
    pub mean: f64,
    /// Parameter-weighted fraction of the block's weights removed.
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub by_kind: Vec<KindSparsity>,
    pub by_block: Vec<BlockSparsity>,
    pub global: f64,
}

fn summarize(entries: &[(LayerId, usize, f64)]) -> Result<SparsityReport> {
    if entries.is_empty() {
        return Err(Error::Config("nothing to summarize".into()));
    }
    let by_kind = ProjKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let v: Vec<f64> = entries.iter().filter(|e| e.0.kind == kind).map(|e| e.2).collect();
            (!v.is_empty()).then(|| KindSparsity {
                kind,
                mean: v.iter().sum::<f64>() / v.len() as f64,
            })
        })
        .collect();
    let mut blocks: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for &(id, n, r) in entries {
        blocks.entry(id.block).or_default().push((n, r));
    }
    let weighted = |v: &[(usize, f64)]| {
        let tot: usize = v.iter().map(|x| x.0).sum();
        if tot == 0 {
            0.0
        } else {
            v.iter().map(|&(n, r)| n as f64 * r).sum::<f64>() / tot as f64
        }
    };
    let by_block = blocks
        .iter()
        .map(|(&block, v)| BlockSparsity {
            block,
            mean: v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64,
            weighted: weighted(v),
        })
        .collect();
    let all: Vec<(usize, f64)> = entries.iter().map(|e| (e.1, e.2)).collect();
    Ok(SparsityReport {
        by_kind,
        by_block,
        global: weighted(&all),
    })
}

/// Per-kind and per-block summary of planned ratios.
pub fn sparsity_report_plan(plan: &SparsityPlan) -> Result<SparsityReport> {
    let entries: Vec<_> = plan.entries.iter().map(|e| (e.layer, e.param_count, e.ratio)).collect();
    summarize(&entries)
}

/// Per-kind and per-block summary of the masks stored in a model. Layers
/// without a mask count as dense.
pub fn sparsity_report_model(model: &ToyModel) -> Result<SparsityReport> {
    let entries: Vec<_> = model
        .layer_ids()
        .into_iter()
        .map(|id| {
            let l = model.layer(id);
            (id, l.param_count(), l.mask().map_or(0.0, |m| m.sparsity()))
        })
        .collect();
    summarize(&entries)
}
