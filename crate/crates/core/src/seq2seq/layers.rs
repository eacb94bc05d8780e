//! Differentiable building blocks with explicit forward caches.
//!
//! Activations are row-major `rows x dim` buffers. Every `backward`
//! accumulates parameter gradients into `grad` (same layout as the
//! parameter buffer) and returns the gradient with respect to its input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamGroup, ParamStore, Slot};
use crate::vecmath::{axpy, dot_f64};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, n_in: usize, n_out: usize, group: ParamGroup, init: Init) -> Self {
        let w = ps.alloc(format!("{name}.weight"), &[n_out, n_in], group, init);
        let b = ps.alloc(format!("{name}.bias"), &[n_out], group, Init::Zeros);
        Self { w, b, n_in, n_out }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.n_in);
        let bias = self.b.of(p);
        let mut y = vec![0.0; rows * self.n_out];
        for t in 0..rows {
            let xt = &x[t * self.n_in..(t + 1) * self.n_in];
            let yt = &mut y[t * self.n_out..(t + 1) * self.n_out];
            for (o, yo) in yt.iter_mut().enumerate() {
                *yo = bias[o] + dot_f64(self.w.row(p, o, self.n_in), xt);
            }
        }
        y
    }

    pub fn backward(&self, p: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.n_in];
        for t in 0..rows {
            let xt = &x[t * self.n_in..(t + 1) * self.n_in];
            let dyt = &dy[t * self.n_out..(t + 1) * self.n_out];
            let dxt = &mut dx[t * self.n_in..(t + 1) * self.n_in];
            for (o, &g) in dyt.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[self.b.off + o] += g;
                axpy(g, xt, self.w.row_mut(grad, o, self.n_in));
                axpy(g, self.w.row(p, o, self.n_in), dxt);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub dim: usize,
}

pub struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = ps.alloc(format!("{name}.gain"), &[dim], group, Init::Ones);
        let bias = ps.alloc(format!("{name}.bias"), &[dim], group, Init::Zeros);
        Self { gain, bias, dim }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, LnCache) {
        let d = self.dim;
        let (g, b) = (self.gain.of(p), self.bias.of(p));
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for t in 0..rows {
            let xt = &x[t * d..(t + 1) * d];
            let mean = xt.iter().sum::<f64>() / d as f64;
            let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[t] = r;
            for j in 0..d {
                let h = (xt[j] - mean) * r;
                xhat[t * d + j] = h;
                y[t * d + j] = g[j] * h + b[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, p: &[f64], grad: &mut [f64], cache: &LnCache, dy: &[f64], rows: usize) -> Vec<f64> {
        let d = self.dim;
        let g = self.gain.of(p);
        let mut dx = vec![0.0; rows * d];
        let mut dxhat = vec![0.0; d];
        for t in 0..rows {
            let xh = &cache.xhat[t * d..(t + 1) * d];
            let dyt = &dy[t * d..(t + 1) * d];
            for j in 0..d {
                grad[self.gain.off + j] += dyt[j] * xh[j];
                grad[self.bias.off + j] += dyt[j];
                dxhat[j] = dyt[j] * g[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot_f64(&dxhat, xh) / d as f64;
            let r = cache.rstd[t];
            for j in 0..d {
                dx[t * d + j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FfnCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: ParamGroup, init: Init) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, group, init),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, group, init),
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, FfnCache) {
        let pre = self.up.forward(p, x, rows);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(p, &act, rows);
        (
            y,
            FfnCache {
                x: x.to_vec(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, p: &[f64], grad: &mut [f64], cache: &FfnCache, dy: &[f64], rows: usize) -> Vec<f64> {
        let mut da = self.down.backward(p, grad, &cache.act, dy, rows);
        for (d, &u) in da.iter_mut().zip(&cache.pre) {
            *d *= gelu_grad(u);
        }
        self.up.backward(p, grad, &cache.x, &da, rows)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    nq: usize,
    nk: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, group: ParamGroup, init: Init) -> Self {
        assert!(dim % heads == 0, "attention dim must divide into heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, group, init),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, group, init),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, group, init),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, group, init),
            heads,
            dim,
        }
    }

    /// `key_mask[j] == false` removes key `j`. A query with no visible key
    /// gets a zero context vector.
    pub fn forward(
        &self,
        p: &[f64],
        xq: &[f64],
        nq: usize,
        xkv: &[f64],
        nk: usize,
        key_mask: Option<&[bool]>,
    ) -> (Vec<f64>, AttnCache) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(p, xq, nq);
        let k = self.k.forward(p, xkv, nk);
        let v = self.v.forward(p, xkv, nk);
        let mut probs = vec![0.0; self.heads * nq * nk];
        let mut ctx = vec![0.0; nq * d];
        let visible = |j: usize| key_mask.is_none_or(|m| m[j]);
        for h in 0..self.heads {
            let hs = h * dh;
            for i in 0..nq {
                let qi = &q[i * d + hs..i * d + hs + dh];
                let row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    if visible(j) {
                        let s = dot_f64(qi, &k[j * d + hs..j * d + hs + dh]) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..nk {
                    if visible(j) {
                        row[j] = (row[j] - max).exp();
                        z += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                let c = &mut ctx[i * d + hs..i * d + hs + dh];
                for j in 0..nk {
                    row[j] /= z;
                    if row[j] != 0.0 {
                        axpy(row[j], &v[j * d + hs..j * d + hs + dh], c);
                    }
                }
            }
        }
        let out = self.o.forward(p, &ctx, nq);
        (
            out,
            AttnCache {
                xq: xq.to_vec(),
                xkv: xkv.to_vec(),
                nq,
                nk,
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(d_xq, d_xkv)`.
    pub fn backward(&self, p: &[f64], grad: &mut [f64], c: &AttnCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (c.nq, c.nk);
        let dctx = self.o.backward(p, grad, &c.ctx, dout, nq);
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nk];
        for h in 0..self.heads {
            let hs = h * dh;
            for i in 0..nq {
                let row = &c.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let dci = &dctx[i * d + hs..i * d + hs + dh];
                let mut weighted = 0.0;
                for j in 0..nk {
                    if row[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot_f64(dci, &c.v[j * d + hs..j * d + hs + dh]);
                    weighted += row[j] * dp[j];
                    axpy(row[j], dci, &mut dv[j * d + hs..j * d + hs + dh]);
                }
                for j in 0..nk {
                    if row[j] == 0.0 {
                        continue;
                    }
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    axpy(ds, &c.k[j * d + hs..j * d + hs + dh], &mut dq[i * d + hs..i * d + hs + dh]);
                    axpy(ds, &c.q[i * d + hs..i * d + hs + dh], &mut dk[j * d + hs..j * d + hs + dh]);
                }
            }
        }
        let dxq = self.q.backward(p, grad, &c.xq, &dq, nq);
        let mut dxkv = self.k.backward(p, grad, &c.xkv, &dk, nk);
        let dxv = self.v.backward(p, grad, &c.xkv, &dv, nk);
        for (a, b) in dxkv.iter_mut().zip(dxv) {
            *a += b;
        }
        (dxq, dxkv)
    }
}

/// Inverted dropout applied in place; returns the scale mask for backward.
pub fn dropout(x: &mut [f64], rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub fn apply_mask(dy: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}
