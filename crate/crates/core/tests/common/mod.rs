//! Reference implementations written with plain loops in f64, plus the
//! worked examples they check. Shared by the per-module tests and the
//! acceptance harness.
#![allow(dead_code)]

pub mod derived;

use mmprune::model::{LayerId, ModalityId, ProjKind, TokenSequence, ToyModel};
use mmprune::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

/// `|actual − expected| ≤ 1e-6 · max(|expected|, scale)`. `scale` is the
/// magnitude of the tensor the value belongs to (0 for lone scalars).
pub fn close(actual: f64, expected: f64, scale: f64) -> bool {
    let bound = 1e-6 * expected.abs().max(scale);
    if bound == 0.0 {
        return actual.abs() <= 1e-12;
    }
    (actual - expected).abs() <= bound
}

pub fn ensure_close(label: &str, actual: f64, expected: f64) -> Check {
    ensure_close_scaled(label, actual, expected, 0.0)
}

pub fn ensure_close_scaled(label: &str, actual: f64, expected: f64, scale: f64) -> Check {
    if close(actual, expected, scale) {
        Ok(())
    } else {
        Err(format!("{label}: got {actual}, expected {expected}"))
    }
}

pub fn ensure_all_close(label: &str, actual: &[f64], expected: &[f64]) -> Check {
    if actual.len() != expected.len() {
        return Err(format!("{label}: length {} vs {}", actual.len(), expected.len()));
    }
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        ensure_close_scaled(&format!("{label}[{i}]"), *a, *e, scale)?;
    }
    Ok(())
}

pub fn ensure(cond: bool, msg: impl Into<String>) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0))
}

pub fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

pub fn modality(id: u16, name: &str) -> ModalityId {
    ModalityId::new(id, name)
}

/// A sequence of seeded embeddings split into the listed spans.
pub fn seeded_sequence(d: usize, spans: &[(&str, usize)], seed: u64) -> TokenSequence {
    let n: usize = spans.iter().map(|s| s.1).sum();
    let lengths: Vec<(ModalityId, usize)> = spans
        .iter()
        .enumerate()
        .map(|(i, (name, len))| (modality(i as u16, name), *len))
        .collect();
    TokenSequence::from_lengths(seeded_matrix(n, d, seed), &lengths).unwrap()
}

pub fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

// ---- vector algebra -------------------------------------------------------

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        s += u[i] * v[i];
    }
    s
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u).max(1e-12);
    let nv = norm(v).max(1e-12);
    1.0 - dot(u, v) / (nu * nv)
}

// ---- model forward --------------------------------------------------------

pub struct OracleForward {
    /// `[block][query][key]`, averaged over heads.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[block][kind index][token][channel]`.
    pub outputs: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[block][kind index][token][channel]`.
    pub inputs: Vec<Vec<Vec<Vec<f64>>>>,
    pub hidden: Vec<Vec<f64>>,
}

fn weight_rows(model: &ToyModel, block: usize, kind: ProjKind) -> Vec<Vec<f64>> {
    rows_f64(model.layer(LayerId::new(block, kind)).weight())
}

fn linear(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|xi| w.iter().map(|wo| dot(xi, wo)).collect()).collect()
}

fn rms(x: &[Vec<f64>], g: &[f32]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|xi| {
            let ms = xi.iter().map(|v| v * v).sum::<f64>() / xi.len() as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            xi.iter().zip(g).map(|(v, g)| v * inv * f64::from(*g)).collect()
        })
        .collect()
}

/// Scalar evaluation of the decoder: pre-norm attention then pre-norm
/// gated FFN, both residual.
pub fn oracle_forward(model: &ToyModel, x: &Matrix) -> OracleForward {
    let n = x.rows();
    let d = model.d_model();
    let heads = model.n_heads();
    let dh = d / heads;
    let mut h = rows_f64(x);
    let mut out = OracleForward {
        attention: Vec::new(),
        outputs: Vec::new(),
        inputs: Vec::new(),
        hidden: Vec::new(),
    };
    for b in 0..model.n_blocks() {
        let blk = &model.blocks()[b];
        let a = rms(&h, &blk.attn_norm);
        let q = linear(&a, &weight_rows(model, b, ProjKind::Q));
        let k = linear(&a, &weight_rows(model, b, ProjKind::K));
        let v = linear(&a, &weight_rows(model, b, ProjKind::V));
        let mut ctx = vec![vec![0.0; d]; n];
        let mut avg = vec![vec![0.0; n]; n];
        for hd in 0..heads {
            let c0 = hd * dh;
            for i in 0..n {
                let mut logits = Vec::new();
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in c0..c0 + dh {
                        s += q[i][c] * k[j][c];
                    }
                    logits.push(s / (dh as f64).sqrt());
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    let p = e[j] / z;
                    avg[i][j] += p / heads as f64;
                    for c in c0..c0 + dh {
                        ctx[i][c] += p * v[j][c];
                    }
                }
            }
        }
        let o = linear(&ctx, &weight_rows(model, b, ProjKind::O));
        for i in 0..n {
            for c in 0..d {
                h[i][c] += o[i][c];
            }
        }
        let bn = rms(&h, &blk.ffn_norm);
        let g = linear(&bn, &weight_rows(model, b, ProjKind::Gate));
        let u = linear(&bn, &weight_rows(model, b, ProjKind::Up));
        let m: Vec<Vec<f64>> = g
            .iter()
            .zip(&u)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let down = linear(&m, &weight_rows(model, b, ProjKind::Down));
        for i in 0..n {
            for c in 0..d {
                h[i][c] += down[i][c];
            }
        }
        out.attention.push(avg);
        out.inputs.push(vec![a.clone(), a.clone(), a, ctx, bn.clone(), bn, m]);
        out.outputs.push(vec![q, k, v, o, g, u, down]);
    }
    out.hidden = h;
    out
}

// ---- diversity ------------------------------------------------------------

pub fn intra_loop(z: &[Vec<f64>], idx: &[usize]) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for a in 0..idx.len() {
        for b in 0..idx.len() {
            if a < b {
                s += cos_dist(&z[idx[a]], &z[idx[b]]);
                n += 1;
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

pub fn inter_loop(z: &[Vec<f64>], ia: &[usize], ib: &[usize]) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for &i in ia {
        for &j in ib {
            s += cos_dist(&z[i], &z[j]);
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Modality-aware layer importance over several samples: each term is
/// averaged over the samples where it exists, then all terms are averaged.
pub fn layer_importance_loop(samples: &[(Vec<Vec<f64>>, Vec<Vec<usize>>)]) -> f64 {
    let m = samples[0].1.len();
    let mut intra = vec![(0.0, 0usize); m];
    let mut inter = vec![vec![(0.0, 0usize); m]; m];
    for (z, groups) in samples {
        for a in 0..m {
            if let Some(v) = intra_loop(z, &groups[a]) {
                intra[a].0 += v;
                intra[a].1 += 1;
            }
            for b in a + 1..m {
                if let Some(v) = inter_loop(z, &groups[a], &groups[b]) {
                    inter[a][b].0 += v;
                    inter[a][b].1 += 1;
                }
            }
        }
    }
    let mut terms = Vec::new();
    for a in 0..m {
        if intra[a].1 > 0 {
            terms.push(intra[a].0 / intra[a].1 as f64);
        }
        for b in a + 1..m {
            if inter[a][b].1 > 0 {
                terms.push(inter[a][b].0 / inter[a][b].1 as f64);
            }
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

// ---- allocation -----------------------------------------------------------

fn budget_at(c: f64, deltas: &[f64], counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    let mut s = 0.0;
    for i in 0..deltas.len() {
        s += counts[i] * (c + deltas[i]).clamp(0.0, 1.0);
    }
    s / total
}

/// Diversity-aware ratios by scanning the shift `c` on successively finer
/// grids until the weighted mean hits `p`.
pub fn das_search(importances: &[f64], counts: &[usize], p: f64, lambda: f64) -> Vec<f64> {
    let lo = importances.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = importances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let deltas: Vec<f64> = importances
        .iter()
        .map(|s| {
            let s_hat = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
            lambda * (1.0 - 2.0 * s_hat)
        })
        .collect();
    let counts: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    // The budget is nondecreasing in `c`; keep the grid cell where it
    // crosses `p`.
    let (mut a, mut b) = (-2.0, 2.0);
    for _ in 0..40 {
        let steps = 200;
        let at = |t: usize| a + (b - a) * t as f64 / steps as f64;
        let t = (0..steps).rev().find(|&t| budget_at(at(t), &deltas, &counts) <= p).unwrap_or(0);
        (a, b) = (at(t), at(t + 1));
    }
    let lo_err = (budget_at(a, &deltas, &counts) - p).abs();
    let hi_err = (budget_at(b, &deltas, &counts) - p).abs();
    let best = if lo_err <= hi_err { a } else { b };
    deltas.iter().map(|d| (best + d).clamp(0.0, 1.0)).collect()
}

// ---- selection ------------------------------------------------------------

/// Neighbours of every token as `(index, distance)`, nearest first, ties
/// toward the lower index.
pub fn knn_sort(z: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..z.len())
        .map(|i| {
            let mut all: Vec<(usize, f64)> = (0..z.len())
                .filter(|&j| j != i)
                .map(|j| (j, cos_dist(&z[i], &z[j]).max(0.0)))
                .collect();
            all.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
            all.truncate(k);
            all
        })
        .collect()
}

pub fn forward_update_loop(a: &[f64], knn: &[Vec<(usize, f64)>], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..a.len() {
        out[i] = a[i];
        for &(j, d) in &knn[i] {
            out[i] += (-gamma * d).exp() * a[j];
        }
    }
    out
}

pub fn mmd_direct(z: &[Vec<f64>], c: &[usize], cp: &[usize], gamma: f64) -> f64 {
    let kern = |i: usize, j: usize| (-gamma * cos_dist(&z[i], &z[j]).max(0.0)).exp();
    let mean = |x: &[usize], y: &[usize]| {
        let mut s = 0.0;
        for &i in x {
            for &j in y {
                s += kern(i, j);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    (mean(c, c) + mean(cp, cp) - 2.0 * mean(c, cp)).max(0.0)
}

/// Greedy reverse pass: take the highest remaining score (lowest index on
/// ties), subtract `e·score` from its neighbours, stop once at least
/// `min_count` are picked and MMD to the full set falls below `threshold`.
pub fn reverse_loop(
    a: &[f64],
    knn: &[Vec<(usize, f64)>],
    z: &[Vec<f64>],
    gamma: f64,
    threshold: f64,
    min_count: usize,
) -> Vec<usize> {
    let n = a.len();
    let all: Vec<usize> = (0..n).collect();
    let mut score = a.to_vec();
    let mut taken = vec![false; n];
    let mut picked = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best.is_none() || score[i] > score[best.unwrap()] {
                best = Some(i);
            }
        }
        let p = best.unwrap();
        taken[p] = true;
        picked.push(p);
        for &(j, d) in &knn[p] {
            score[j] -= (-gamma * d).exp() * score[p];
        }
        if picked.len() == n {
            return picked;
        }
        if picked.len() >= min_count && mmd_direct(z, &all, &picked, gamma) < threshold {
            return picked;
        }
    }
}

// ---- pruning --------------------------------------------------------------

/// Keep flags after dropping `⌊ratio·n⌋` smallest entries per group, ties
/// toward the lower flattened index.
pub fn mask_sort(imp: &[Vec<f64>], ratio: f64, per_row: bool) -> Vec<Vec<bool>> {
    let rows = imp.len();
    let cols = imp[0].len();
    let mut keep = vec![vec![true; cols]; rows];
    let groups: Vec<Vec<(usize, usize)>> = if per_row {
        (0..rows).map(|r| (0..cols).map(|c| (r, c)).collect()).collect()
    } else {
        vec![(0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()]
    };
    for g in groups {
        let drop = (ratio * g.len() as f64 + 1e-9).floor() as usize;
        let mut order = g.clone();
        order.sort_by(|x, y| {
            imp[x.0][x.1]
                .partial_cmp(&imp[y.0][y.1])
                .unwrap()
                .then((x.0 * cols + x.1).cmp(&(y.0 * cols + y.1)))
        });
        for &(r, c) in &order[..drop] {
            keep[r][c] = false;
        }
    }
    keep
}

pub fn channel_norms(rows: &[Vec<f64>]) -> Vec<f64> {
    let cols = rows[0].len();
    (0..cols).map(|c| rows.iter().map(|r| r[c] * r[c]).sum::<f64>().sqrt()).collect()
}
