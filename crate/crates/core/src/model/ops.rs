//! Forward/backward primitives on packed `n x d` row-major activations.

use rand::Rng;

use super::params::{Attention, LayerNorm, Linear};
use crate::linalg::gemm;

pub const LN_EPS: f64 = 1e-6;

pub fn linear_fwd(p: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    let (i, o) = (p.in_dim(), p.out_dim());
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(&p.b.data);
    }
    gemm(n, i, o, 1.0, x, false, &p.w.data, false, 1.0, &mut y);
    y
}

/// Accumulates weight gradients into `g` and returns `dx`.
pub fn linear_bwd(p: &Linear, g: &mut Linear, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let (i, o) = (p.in_dim(), p.out_dim());
    gemm(i, n, o, 1.0, x, true, dy, false, 1.0, &mut g.w.data);
    for row in dy.chunks(o) {
        for (gb, d) in g.b.data.iter_mut().zip(row) {
            *gb += d;
        }
    }
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, 1.0, dy, false, &p.w.data, true, 0.0, &mut dx);
    dx
}

pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub fn layer_norm_fwd(p: &LayerNorm, x: &[f64], d: usize) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    let mut y = vec![0.0; x.len()];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * p.gain.data[c] + p.bias.data[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_bwd(p: &LayerNorm, g: &mut LayerNorm, cache: &LayerNormCache, dy: &[f64], d: usize) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            g.gain.data[c] += dyr[c] * xh[c];
            g.bias.data[c] += dyr[c];
            dxhat[c] = dyr[c] * p.gain.data[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Inverted dropout mask: entries are `0` or `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(x: &mut [f64], mask: Option<&Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Sinusoidal encoding: even columns `sin(pos / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(pos: usize, d: usize, out: &mut [f64]) {
    for i in 0..d / 2 + d % 2 {
        let freq = 1.0 / 10000f64.powf((2 * i) as f64 / d as f64);
        let angle = pos as f64 * freq;
        out[2 * i] = angle.sin();
        if 2 * i + 1 < d {
            out[2 * i + 1] = angle.cos();
        }
    }
}

/// One attention segment: a run of query rows attending to a run of
/// key/value rows (one sentence, or one hypothesis during decoding).
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

pub struct AttentionCache {
    q_in: Vec<f64>,
    kv_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities per (segment, head), each `q_len x k_len`.
    probs: Vec<Vec<f64>>,
    concat: Vec<f64>,
    nq: usize,
    nk: usize,
}

pub fn attention_fwd(
    p: &Attention,
    q_in: &[f64],
    kv_in: &[f64],
    segments: &[Segment],
    heads: usize,
    causal: bool,
    d: usize,
) -> (Vec<f64>, AttentionCache) {
    let nq = q_in.len() / d;
    let nk = kv_in.len() / d;
    let q = linear_fwd(&p.q, q_in, nq);
    let k = linear_fwd(&p.k, kv_in, nk);
    let v = linear_fwd(&p.v, kv_in, nk);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; nq * d];
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        for h in 0..heads {
            let off = h * dh;
            let mut pm = vec![0.0; seg.q_len * seg.k_len];
            for i in 0..seg.q_len {
                let qi = &q[(seg.q_start + i) * d + off..(seg.q_start + i) * d + off + dh];
                let limit = if causal { (i + 1).min(seg.k_len) } else { seg.k_len };
                let row = &mut pm[i * seg.k_len..(i + 1) * seg.k_len];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate().take(limit) {
                    let kj = &k[(seg.k_start + j) * d + off..(seg.k_start + j) * d + off + dh];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *r = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut().take(limit) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut().take(limit) {
                    *r /= sum;
                }
                let out = &mut concat[(seg.q_start + i) * d + off..(seg.q_start + i) * d + off + dh];
                for (j, &pij) in row.iter().enumerate().take(limit) {
                    let vj = &v[(seg.k_start + j) * d + off..(seg.k_start + j) * d + off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(pm);
        }
    }
    let y = linear_fwd(&p.o, &concat, nq);
    (
        y,
        AttentionCache {
            q_in: q_in.to_vec(),
            kv_in: kv_in.to_vec(),
            q,
            k,
            v,
            probs,
            concat,
            nq,
            nk,
        },
    )
}

/// Returns `(d q_in, d kv_in)`.
pub fn attention_bwd(
    p: &Attention,
    g: &mut Attention,
    cache: &AttentionCache,
    segments: &[Segment],
    heads: usize,
    dy: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (nq, nk) = (cache.nq, cache.nk);
    let dconcat = linear_bwd(&p.o, &mut g.o, &cache.concat, dy, nq);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut idx = 0;
    for seg in segments {
        for h in 0..heads {
            let off = h * dh;
            let pm = &cache.probs[idx];
            idx += 1;
            let mut dp = vec![0.0; seg.k_len];
            for i in 0..seg.q_len {
                let qrow = (seg.q_start + i) * d + off;
                let dout = &dconcat[qrow..qrow + dh];
                let prow = &pm[i * seg.k_len..(i + 1) * seg.k_len];
                let mut dot_pd = 0.0;
                for j in 0..seg.k_len {
                    let krow = (seg.k_start + j) * d + off;
                    let vj = &cache.v[krow..krow + dh];
                    dp[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot_pd += dp[j] * prow[j];
                    if prow[j] != 0.0 {
                        for c in 0..dh {
                            dv[krow + c] += prow[j] * dout[c];
                        }
                    }
                }
                for j in 0..seg.k_len {
                    let ds = prow[j] * (dp[j] - dot_pd) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (seg.k_start + j) * d + off;
                    for c in 0..dh {
                        dq[qrow + c] += ds * cache.k[krow + c];
                        dk[krow + c] += ds * cache.q[qrow + c];
                    }
                }
            }
        }
    }
    let dq_in = linear_bwd(&p.q, &mut g.q, &cache.q_in, &dq, nq);
    let mut dkv = linear_bwd(&p.k, &mut g.k, &cache.kv_in, &dk, nk);
    let dkv_v = linear_bwd(&p.v, &mut g.v, &cache.kv_in, &dv, nk);
    for (a, b) in dkv.iter_mut().zip(&dkv_v) {
        *a += b;
    }
    (dq_in, dkv)
}
