//! Single-precision forward kernels used only for timing.
//!
//! These mirror one DiT block of each variant without building a graph.
//! Softmax attention is evaluated in query blocks so its working set stays
//! at `block x T` scores even when `T x T` would not fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Variant;

const QUERY_BLOCK: usize = 64;
const LN_EPS: f32 = 1e-6;
const LINEAR_EPS: f32 = 1e-6;

fn randn(n: usize, std: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| {
        let v: f64 = StandardNormal.sample(rng);
        std * v as f32
    }).collect::<Vec<f32>>()
}

/// Lane-parallel dot product; plain `zip().sum()` does not vectorize.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f32>()
}

/// `out[r] = x[r] W (+ b)`, `W: [cin, cout]`.
fn linear(x: &[f32], cin: usize, w: &[f32], b: Option<&[f32]>, cout: usize) -> Vec<f32> {
    let rows = x.len() / cin;
    let mut out = vec![0f32; rows * cout];
    for (xr, or) in x.chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        if let Some(b) = b {
            or.copy_from_slice(b);
        }
        for (k, &xv) in xr.iter().enumerate() {
            for (o, &wv) in or.iter_mut().zip(&w[k * cout..(k + 1) * cout]) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn layer_norm(x: &[f32], c: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for r in out.chunks_exact_mut(c) {
        let mean = r.iter().sum::<f32>() / c as f32;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        r.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

fn silu(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v /= 1.0 + (-*v).exp());
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

struct Attn {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
}

impl Attn {
    fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (c as f32).sqrt();
        Attn { wq: randn(c * c, s, rng), wk: randn(c * c, s, rng), wv: randn(c * c, s, rng), wo: randn(c * c, s, rng) }
    }

    /// Softmax attention over all `x.len() / c` tokens.
    fn softmax(&self, x: &[f32], c: usize) -> Vec<f32> {
        let t = x.len() / c;
        let q = linear(x, c, &self.wq, None, c);
        let kt = transpose(&linear(x, c, &self.wk, None, c), t, c);
        let vt = transpose(&linear(x, c, &self.wv, None, c), t, c);
        let scale = 1.0 / (c as f32).sqrt();
        let mut out = vec![0f32; t * c];
        let mut scores = vec![0f32; QUERY_BLOCK * t];
        for q0 in (0..t).step_by(QUERY_BLOCK) {
            let nb = QUERY_BLOCK.min(t - q0);
            for i in 0..nb {
                let s = &mut scores[i * t..(i + 1) * t];
                s.iter_mut().for_each(|v| *v = 0.0);
                let qi = &q[(q0 + i) * c..(q0 + i + 1) * c];
                for ch in 0..c {
                    let qv = qi[ch] * scale;
                    for (sv, &kv) in s.iter_mut().zip(&kt[ch * t..(ch + 1) * t]) {
                        *sv += qv * kv;
                    }
                }
                let mx = s.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for v in s.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                let o = &mut out[(q0 + i) * c..(q0 + i + 1) * c];
                for ch in 0..c {
                    o[ch] = dot(s, &vt[ch * t..(ch + 1) * t]) / z;
                }
            }
        }
        linear(&out, c, &self.wo, None, c)
    }

    /// Linear attention, `phi = relu`, key-value summary first.
    fn linear(&self, x: &[f32], c: usize) -> Vec<f32> {
        let t = x.len() / c;
        let relu = |v: Vec<f32>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let q = relu(linear(x, c, &self.wq, None, c));
        let k = relu(linear(x, c, &self.wk, None, c));
        let v = linear(x, c, &self.wv, None, c);
        let mut kv = vec![0f32; c * c];
        let mut ksum = vec![0f32; c];
        for r in 0..t {
            let (kr, vr) = (&k[r * c..(r + 1) * c], &v[r * c..(r + 1) * c]);
            for a in 0..c {
                ksum[a] += kr[a];
                for (o, &vv) in kv[a * c..(a + 1) * c].iter_mut().zip(vr) {
                    *o += kr[a] * vv;
                }
            }
        }
        let mut out = linear(&q, c, &kv, None, c);
        for (qr, or) in q.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let den = dot(qr, &ksum) + LINEAR_EPS;
            or.iter_mut().for_each(|v| *v /= den);
        }
        linear(&out, c, &self.wo, None, c)
    }
}

struct Stitch {
    depthwise: Vec<f32>,
    dw_bias: Vec<f32>,
    pointwise: Vec<f32>,
    pw_bias: Vec<f32>,
    pooled: Vec<f32>,
    pooled_bias: Vec<f32>,
}

impl Stitch {
    fn new(m: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (c as f32).sqrt();
        Stitch {
            depthwise: randn(c * m, 0.5, rng),
            dw_bias: randn(c, 0.1, rng),
            pointwise: randn(c * c, s, rng),
            pw_bias: randn(c, 0.1, rng),
            pooled: randn(c * c, s, rng),
            pooled_bias: randn(c, 0.1, rng),
        }
    }

    /// `x: [M, N, C]` to the residual update `Δ`, same layout.
    fn delta(&self, x: &[f32], m: usize, c: usize) -> Vec<f32> {
        let n = x.len() / (m * c);
        let pad = (m - 1) / 2;
        let mut mixed = vec![0f32; x.len()];
        let mut mean = vec![0f32; n * c];
        for mi in 0..m {
            for p in 0..n {
                let o = (mi * n + p) * c;
                for ch in 0..c {
                    mean[p * c + ch] += x[o + ch] / m as f32;
                    let mut s = self.dw_bias[ch];
                    for j in 0..m {
                        let src = mi as isize + j as isize - pad as isize;
                        if (0..m as isize).contains(&src) {
                            s += self.depthwise[ch * m + j] * x[(src as usize * n + p) * c + ch];
                        }
                    }
                    mixed[o + ch] = s;
                }
            }
        }
        let mut out = linear(&mixed, c, &self.pointwise, Some(&self.pw_bias), c);
        let pooled = linear(&mean, c, &self.pooled, Some(&self.pooled_bias), c);
        for mi in 0..m {
            for (o, &v) in out[mi * n * c..(mi + 1) * n * c].iter_mut().zip(&pooled) {
                *o += v;
            }
        }
        out
    }
}

/// One block with random weights, ready to time.
pub(crate) struct BlockKernel {
    variant: Variant,
    m: usize,
    h: usize,
    w: usize,
    c: usize,
    attn: Attn,
    cross_attn: Attn,
    stitch: Stitch,
    ffn1: Vec<f32>,
    ffn_conv: Vec<f32>,
    ffn2: Vec<f32>,
    hidden: usize,
    pub(crate) input: Vec<f32>,
}

impl BlockKernel {
    pub(crate) fn new(variant: Variant, m: usize, h: usize, w: usize, c: usize, ffn_mult: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = ffn_mult * c;
        BlockKernel {
            variant,
            m,
            h,
            w,
            c,
            attn: Attn::new(c, &mut rng),
            cross_attn: Attn::new(c, &mut rng),
            stitch: Stitch::new(m, c, &mut rng),
            ffn1: randn(c * hidden, 1.0 / (c as f32).sqrt(), &mut rng),
            ffn_conv: randn(9 * hidden, 1.0 / 3.0, &mut rng),
            ffn2: randn(hidden * c, 1.0 / (hidden as f32).sqrt(), &mut rng),
            hidden,
            input: randn(m * h * w * c, 1.0, &mut rng),
        }
    }

    fn conv3(&self, x: &[f32]) -> Vec<f32> {
        let (h, w, k) = (self.h, self.w, self.hidden);
        let mut out = vec![0f32; x.len()];
        for base in (0..x.len()).step_by(h * w * k) {
            for i in 0..h {
                for j in 0..w {
                    let o = base + (i * w + j) * k;
                    for a in 0..3 {
                        let si = (i + h + a - 1) % h;
                        for b in 0..3 {
                            let s = base + (si * w + (j + w + b - 1) % w) * k;
                            let wk = &self.ffn_conv[(a * 3 + b) * k..(a * 3 + b + 1) * k];
                            for ((ov, &xv), &wv) in out[o..o + k].iter_mut().zip(&x[s..s + k]).zip(wk) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass; returns a checksum so the work cannot be elided.
    pub(crate) fn forward(&self) -> f32 {
        let (m, c) = (self.m, self.c);
        let per_map = self.h * self.w * c;
        let mut x = self.input.clone();
        let h = layer_norm(&x, c);
        let mut a = Vec::with_capacity(x.len());
        for mi in 0..m {
            a.extend(self.attn.linear(&h[mi * per_map..(mi + 1) * per_map], c));
        }
        let delta = match self.variant {
            Variant::Attention => self.cross_attn.softmax(&a, c),
            Variant::LinearAttention => self.cross_attn.linear(&a, c),
            Variant::CrossStitch => self.stitch.delta(&a, m, c),
        };
        for ((xv, av), dv) in x.iter_mut().zip(&a).zip(&delta) {
            *xv += av + dv;
        }
        let h = layer_norm(&x, c);
        let mut f = self.conv3(&linear(&h, c, &self.ffn1, None, self.hidden));
        silu(&mut f);
        let f = linear(&f, self.hidden, &self.ffn2, None, c);
        x.iter().zip(&f).map(|(a, b)| a + b).sum()
    }
}
