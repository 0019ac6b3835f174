use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{LayerId, ProjKind, Span, TokenSequence, ToyModel};
use crate::tensor::Matrix;

const RMS_EPS: f32 = 1e-6;

/// What a forward pass should record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureFlags {
    /// Per-projection inputs `X`.
    pub inputs: bool,
    /// Per-projection outputs `Z`.
    pub outputs: bool,
    /// Head-averaged post-softmax attention per block.
    pub attention: bool,
    /// Residual stream entering and leaving each block.
    pub block_io: bool,
    /// Stop after this many blocks. The returned hidden state is the residual
    /// stream at that point.
    pub stop_after: Option<usize>,
}

impl CaptureFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            inputs: true,
            outputs: true,
            attention: true,
            block_io: true,
            stop_after: None,
        }
    }
}

/// Captured input/output of one projection for one sequence. Inputs that
/// several projections share (q/k/v, gate/up) point at the same buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerCapture {
    pub input: Option<Arc<Matrix>>,
    pub output: Option<Matrix>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockTrace {
    /// Indexed by [`ProjKind::index`].
    pub layers: Vec<LayerCapture>,
    pub attention: Option<Matrix>,
    pub input: Option<Matrix>,
    pub output: Option<Matrix>,
}

/// Everything recorded from one forward pass over one sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    pub spans: Vec<Span>,
    pub blocks: Vec<BlockTrace>,
}

impl ActivationTrace {
    pub fn input(&self, id: LayerId) -> Result<&Matrix> {
        self.blocks
            .get(id.block)
            .and_then(|b| b.layers.get(id.kind.index()))
            .and_then(|l| l.input.as_deref())
            .ok_or_else(|| Error::MissingCapture(format!("input of {id}")))
    }

    pub fn output(&self, id: LayerId) -> Result<&Matrix> {
        self.blocks
            .get(id.block)
            .and_then(|b| b.layers.get(id.kind.index()))
            .and_then(|l| l.output.as_ref())
            .ok_or_else(|| Error::MissingCapture(format!("output of {id}")))
    }

    pub fn attention(&self, block: usize) -> Result<&Matrix> {
        self.blocks
            .get(block)
            .and_then(|b| b.attention.as_ref())
            .ok_or_else(|| Error::MissingCapture(format!("attention of block {block}")))
    }

    pub fn block_io(&self, block: usize) -> Result<(&Matrix, &Matrix)> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::MissingCapture(format!("block {block}")))?;
        match (&b.input, &b.output) {
            (Some(i), Some(o)) => Ok((i, o)),
            _ => Err(Error::MissingCapture(format!("residual stream of block {block}"))),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }
}

fn rms_norm(x: &Matrix, scale: &[f32]) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / d;
        let inv = 1.0 / ((ms as f32) + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(scale) {
            *v = *v * inv * g;
        }
    }
    out
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn checked(z: Matrix, block: usize, layer: &str) -> Result<Matrix> {
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::Numeric {
            block,
            layer: layer.to_string(),
        })
    }
}

/// Causal multi-head attention over already projected q, k, v.
///
/// Returns the concatenated per-head context (`N × d_model`) and the
/// post-softmax probabilities averaged over heads (`N × N`).
fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> (Matrix, Matrix) {
    let n = q.rows();
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut avg = Matrix::<f32>::zeros(n, n);
    let mut probs = vec![0.0f32; n];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[cols.clone()];
                let s = crate::tensor::dot_f32(qi, kj) * scale;
                probs[j] = s;
                max = max.max(s);
            }
            let mut denom = 0.0f32;
            for p in probs.iter_mut().take(i + 1) {
                *p = (*p - max).exp();
                denom += *p;
            }
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let p = probs[j] / denom;
                probs[j] = p;
                let vj = &v.row(j)[cols.clone()];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
            let arow = avg.row_mut(i);
            for j in 0..=i {
                arow[j] += probs[j];
            }
        }
    }
    let inv_heads = 1.0 / n_heads as f32;
    for a in avg.as_mut_slice() {
        *a *= inv_heads;
    }
    (ctx, avg)
}

/// Runs the model on one sequence and returns the final residual stream
/// plus whatever `flags` asked to capture.
///
/// Each block computes
/// `h ← h + W_o · attn(W_q a, W_k a, W_v a)` with `a = rms(h)`, then
/// `h ← h + W_down · (silu(W_gate b) ⊙ W_up b)` with `b = rms(h)`.
pub fn forward(
    model: &ToyModel,
    seq: &TokenSequence,
    flags: CaptureFlags,
) -> Result<(Matrix, ActivationTrace)> {
    let d = model.d_model();
    if seq.dim() != d {
        return Err(Error::Shape(format!(
            "sequence width {} does not match d_model {d}",
            seq.dim()
        )));
    }
    let stop = flags.stop_after.unwrap_or(model.n_blocks()).min(model.n_blocks());
    let mut h = seq.embeddings().clone();
    let mut trace = ActivationTrace {
        spans: seq.spans().to_vec(),
        blocks: Vec::with_capacity(stop),
    };

    for (bi, block) in model.blocks().iter().enumerate().take(stop) {
        let mut bt = BlockTrace {
            layers: vec![LayerCapture::default(); ProjKind::ALL.len()],
            ..Default::default()
        };
        if flags.block_io {
            bt.input = Some(h.clone());
        }
        let proj = |kind: ProjKind, x: &Matrix| -> Result<Matrix> {
            let z = x.matmul_t(block.layer(kind).weight())?;
            checked(z, bi, kind.as_str())
        };

        let a = Arc::new(rms_norm(&h, &block.attn_norm));
        let q = proj(ProjKind::Q, &a)?;
        let k = proj(ProjKind::K, &a)?;
        let v = proj(ProjKind::V, &a)?;
        let (ctx, attn) = causal_attention(&q, &k, &v, model.n_heads());
        let ctx = Arc::new(checked(ctx, bi, "attention")?);
        let o = proj(ProjKind::O, &ctx)?;
        for (x, y) in h.as_mut_slice().iter_mut().zip(o.as_slice()) {
            *x += y;
        }

        let b = Arc::new(rms_norm(&h, &block.ffn_norm));
        let g = proj(ProjKind::Gate, &b)?;
        let u = proj(ProjKind::Up, &b)?;
        let mut m = g.clone();
        for (x, y) in m.as_mut_slice().iter_mut().zip(u.as_slice()) {
            *x = silu(*x) * y;
        }
        let m = Arc::new(checked(m, bi, "ffn")?);
        let down = proj(ProjKind::Down, &m)?;
        for (x, y) in h.as_mut_slice().iter_mut().zip(down.as_slice()) {
            *x += y;
        }
        if !h.is_finite() {
            return Err(Error::Numeric {
                block: bi,
                layer: "residual".into(),
            });
        }

        if flags.inputs {
            for (kind, x) in [
                (ProjKind::Q, &a),
                (ProjKind::K, &a),
                (ProjKind::V, &a),
                (ProjKind::O, &ctx),
                (ProjKind::Gate, &b),
                (ProjKind::Up, &b),
                (ProjKind::Down, &m),
            ] {
                bt.layers[kind.index()].input = Some(Arc::clone(x));
            }
        }
        if flags.outputs {
            for (kind, z) in [
                (ProjKind::Q, q),
                (ProjKind::K, k),
                (ProjKind::V, v),
                (ProjKind::O, o),
                (ProjKind::Gate, g),
                (ProjKind::Up, u),
                (ProjKind::Down, down),
            ] {
                bt.layers[kind.index()].output = Some(z);
            }
        }
        if flags.attention {
            bt.attention = Some(attn);
        }
        if flags.block_io {
            bt.output = Some(h.clone());
        }
        trace.blocks.push(bt);
    }
    Ok((h, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_synthetic, ModalityId};

    fn seq(n: usize, d: usize, seed: u64) -> TokenSequence {
        let mut s = seed;
        let e = Matrix::from_fn(n, d, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
        });
        TokenSequence::from_lengths(e, &[(ModalityId::new(0, "visual"), n - 2), (ModalityId::new(1, "language"), 2)])
            .unwrap()
    }

    #[test]
    fn attention_is_causal_and_row_stochastic() {
        let model = init_synthetic(8, 2, 16, 2, 3).unwrap();
        let (_, trace) = forward(&model, &seq(6, 8, 1), CaptureFlags::all()).unwrap();
        for b in 0..2 {
            let a = trace.attention(b).unwrap();
            for i in 0..6 {
                let row = a.row(i);
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "row {i} sums to {sum}");
                for &p in &row[i + 1..] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn captures_respect_flags_and_shapes() {
        let model = init_synthetic(8, 2, 12, 3, 5).unwrap();
        let s = seq(5, 8, 2);
        let (_, none) = forward(&model, &s, CaptureFlags::none()).unwrap();
        assert!(none.attention(0).is_err());
        assert!(none.input(LayerId::new(0, ProjKind::Q)).is_err());

        let (_, t) = forward(&model, &s, CaptureFlags::all()).unwrap();
        let down = LayerId::new(2, ProjKind::Down);
        assert_eq!(t.input(down).unwrap().shape(), (5, 12));
        assert_eq!(t.output(down).unwrap().shape(), (5, 8));
        assert_eq!(t.output(LayerId::new(1, ProjKind::Gate)).unwrap().shape(), (5, 12));
        let (i, o) = t.block_io(1).unwrap();
        assert_eq!(i.shape(), o.shape());
    }

    #[test]
    fn stop_after_truncates() {
        let model = init_synthetic(8, 2, 12, 3, 5).unwrap();
        let s = seq(4, 8, 9);
        let (h1, t) = forward(&model, &s, CaptureFlags { block_io: true, stop_after: Some(1), ..Default::default() }).unwrap();
        assert_eq!(t.blocks.len(), 1);
        assert_eq!(&h1, t.block_io(0).unwrap().1);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let model = init_synthetic(8, 2, 12, 1, 5).unwrap();
        assert!(matches!(forward(&model, &seq(4, 6, 1), CaptureFlags::none()), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_weight_names_the_layer() {
        let mut model = init_synthetic(4, 1, 4, 2, 5).unwrap();
        let id = LayerId::new(1, ProjKind::Up);
        let mut w = model.layer(id).weight().clone();
        w.set(0, 0, f32::INFINITY);
        model.layer_mut(id).set_weight(w).unwrap();
        match forward(&model, &seq(3, 4, 1), CaptureFlags::none()) {
            Err(Error::Numeric { block: 1, layer }) => assert_eq!(layer, "up"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
