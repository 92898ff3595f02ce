//! CrossStitch: per-pixel communication across the map axis of a map stack.
//!
//! For every pixel the `M` feature vectors form a `[C, M]` slab. Two
//! branches act on it and their sum is added back residually:
//!
//! * a depthwise 1-D convolution along the map axis (kernel length `M`,
//!   zero "same" padding) followed by pointwise `C -> C` mixing per map;
//! * the mean over maps, mixed `C -> C` and broadcast to every map.
//!
//! All parameters start at zero, which makes a fresh module the identity.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{HimatError, Result};
use crate::params::{bind_constant, join, ParamTree};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossStitchParams<T = Tensor> {
    /// `[C, M]`, one kernel per channel.
    pub depthwise: T,
    /// `[C]`
    pub depthwise_bias: T,
    /// `[C_in, C_out]`
    pub pointwise: T,
    /// `[C]`
    pub pointwise_bias: T,
    /// `[C_in, C_out]`
    pub pooled: T,
    /// `[C]`
    pub pooled_bias: T,
}

impl CrossStitchParams<Tensor> {
    pub fn maps(&self) -> usize {
        self.depthwise.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn is_zero(&self) -> bool {
        let mut zero = true;
        crate::params::visit(self, &mut |_, t: &Tensor| zero &= t.data().iter().all(|&x| x == 0.0));
        zero
    }

    fn validate(&self) -> Result<()> {
        let (c, m) = (self.channels(), self.maps());
        let expect: [(&str, &Tensor, Vec<usize>); 6] = [
            ("depthwise", &self.depthwise, vec![c, m]),
            ("depthwise_bias", &self.depthwise_bias, vec![c]),
            ("pointwise", &self.pointwise, vec![c, c]),
            ("pointwise_bias", &self.pointwise_bias, vec![c]),
            ("pooled", &self.pooled, vec![c, c]),
            ("pooled_bias", &self.pooled_bias, vec![c]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(HimatError::shape("crossstitch", format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Zero-initialized module for `m` maps of `c` channels.
pub fn crossstitch_init(m: usize, c: usize) -> CrossStitchParams {
    CrossStitchParams {
        depthwise: Tensor::zeros(&[c, m]),
        depthwise_bias: Tensor::zeros(&[c]),
        pointwise: Tensor::zeros(&[c, c]),
        pointwise_bias: Tensor::zeros(&[c]),
        pooled: Tensor::zeros(&[c, c]),
        pooled_bias: Tensor::zeros(&[c]),
    }
}

impl<T> ParamTree<T> for CrossStitchParams<T> {
    type With<U> = CrossStitchParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> CrossStitchParams<U> {
        CrossStitchParams {
            depthwise: f(&join(prefix, "depthwise"), &self.depthwise),
            depthwise_bias: f(&join(prefix, "depthwise_bias"), &self.depthwise_bias),
            pointwise: f(&join(prefix, "pointwise"), &self.pointwise),
            pointwise_bias: f(&join(prefix, "pointwise_bias"), &self.pointwise_bias),
            pooled: f(&join(prefix, "pooled"), &self.pooled),
            pooled_bias: f(&join(prefix, "pooled_bias"), &self.pooled_bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "depthwise"), &mut self.depthwise);
        f(&join(prefix, "depthwise_bias"), &mut self.depthwise_bias);
        f(&join(prefix, "pointwise"), &mut self.pointwise);
        f(&join(prefix, "pointwise_bias"), &mut self.pointwise_bias);
        f(&join(prefix, "pooled"), &mut self.pooled);
        f(&join(prefix, "pooled_bias"), &mut self.pooled_bias);
    }
}

/// Returns only the residual `Δ` for `f: [M,H,W,C]` or `[B,M,H,W,C]`.
pub fn crossstitch_delta_graph(g: &mut Graph, f: Var, p: &CrossStitchParams<Var>) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    let (c, m) = (g.shape(p.depthwise)[0], g.shape(p.depthwise)[1]);
    let (b, lead) = match shape.len() {
        4 => (1, 0),
        5 => (shape[0], 1),
        _ => return Err(HimatError::shape("crossstitch", format!("expected [M,H,W,C] or [B,M,H,W,C], got {shape:?}"))),
    };
    let (ms, h, w, cs) = (shape[lead], shape[lead + 1], shape[lead + 2], shape[lead + 3]);
    if ms != m || cs != c {
        return Err(HimatError::shape("crossstitch", format!("stack {shape:?} for M = {m}, C = {c}")));
    }
    let px = b * h * w;

    // m h w c -> (h w) m c
    let x = g.reshape(f, &[b, m, h, w, c])?;
    let x = g.permute(x, &[0, 2, 3, 1, 4])?;
    let x = g.reshape(x, &[px, m, c])?;

    let slab = g.transpose_last(x)?;
    let dw = g.depthwise_map_conv(slab, p.depthwise)?;
    let db = g.reshape(p.depthwise_bias, &[1, c, 1])?;
    let dw = g.add_bcast(dw, db)?;
    let dw = g.transpose_last(dw)?;
    let local = g.linear(dw, p.pointwise, Some(p.pointwise_bias))?;

    let pooled = g.mean_axis(x, 1)?;
    let pooled = g.linear(pooled, p.pooled, Some(p.pooled_bias))?;
    let delta = g.add_bcast(local, pooled)?;

    // (h w) m c -> m h w c
    let delta = g.reshape(delta, &[b, h, w, m, c])?;
    let delta = g.permute(delta, &[0, 3, 1, 2, 4])?;
    g.reshape(delta, &shape)
}

/// `f + Δ(f)`.
pub fn crossstitch_graph(g: &mut Graph, f: Var, p: &CrossStitchParams<Var>) -> Result<Var> {
    let delta = crossstitch_delta_graph(g, f, p)?;
    g.add(f, delta)
}

pub fn crossstitch_forward(f: &Tensor, p: &CrossStitchParams) -> Result<Tensor> {
    p.validate()?;
    let mut g = Graph::new();
    let bound = bind_constant(p, &mut g);
    let x = g.constant(f.clone());
    let y = crossstitch_graph(&mut g, x, &bound)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossStitchCost {
    pub time_flops: u128,
    pub space_units: u128,
    pub params: u128,
}

/// Analytic cost for an `[M, H, W, C]` stack; a multiply-add counts as 2.
///
/// Per pixel:
/// * depthwise: `M` outputs x `M` taps x `C` channels, `2 M^2 C`
/// * pointwise: `M` vectors through `C x C`, `2 M C^2`
/// * map mean: `M C`
/// * pooled mixing: `2 C^2`
///
/// Bias and residual additions are not counted. Parameters are
/// `C M + 2 C^2` kernel weights plus `3 C` biases. Space counts the input,
/// depthwise and pointwise activations (`3 M C`) and the pooled vector
/// before and after mixing (`2 C`), per pixel.
pub fn crossstitch_cost(m: usize, h: usize, w: usize, c: usize) -> CrossStitchCost {
    let (m, hw, c) = (m as u128, (h * w) as u128, c as u128);
    CrossStitchCost {
        time_flops: hw * (2 * m * m * c + 2 * m * c * c + m * c + 2 * c * c),
        space_units: hw * (3 * m * c + 2 * c),
        params: c * m + 2 * c * c + 3 * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_layer_flops, AttentionVariant};
    use crate::autograd::finite_difference_check_many;
    use crate::params::{count_params, visit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(m: usize, c: usize, seed: u64) -> CrossStitchParams {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = crossstitch_init(m, c);
        p.visit_mut("", &mut |_, t| *t = Tensor::randn(t.shape(), &mut r));
        p
    }

    /// Nested-loop reference for `Δ` on `[M, H, W, C]`.
    fn delta_loops(f: &Tensor, p: &CrossStitchParams) -> Tensor {
        let s = f.shape();
        let (m, h, w, c) = (s[0], s[1], s[2], s[3]);
        let pad = (m - 1) / 2;
        let mut out = Tensor::zeros(s);
        for i in 0..h {
            for j in 0..w {
                let mut dw = vec![vec![0.0; c]; m];
                for (mi, row) in dw.iter_mut().enumerate() {
                    for (ch, v) in row.iter_mut().enumerate() {
                        let mut acc = p.depthwise_bias.get(&[ch]);
                        for k in 0..m {
                            let src = mi as isize + k as isize - pad as isize;
                            if (0..m as isize).contains(&src) {
                                acc += p.depthwise.get(&[ch, k]) * f.get(&[src as usize, i, j, ch]);
                            }
                        }
                        *v = acc;
                    }
                }
                let mean: Vec<f64> = (0..c).map(|ch| (0..m).map(|mi| f.get(&[mi, i, j, ch])).sum::<f64>() / m as f64).collect();
                let pooled: Vec<f64> = (0..c)
                    .map(|o| p.pooled_bias.get(&[o]) + (0..c).map(|ci| mean[ci] * p.pooled.get(&[ci, o])).sum::<f64>())
                    .collect();
                for mi in 0..m {
                    for o in 0..c {
                        let pw: f64 = p.pointwise_bias.get(&[o]) + (0..c).map(|ci| dw[mi][ci] * p.pointwise.get(&[ci, o])).sum::<f64>();
                        out.set(&[mi, i, j, o], pw + pooled[o]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn init_shapes_and_zeros() {
        let p = crossstitch_init(3, 8);
        assert_eq!(p.depthwise.shape(), [8, 3]);
        assert_eq!(p.pointwise.shape(), [8, 8]);
        assert_eq!(p.pooled.shape(), [8, 8]);
        assert!(p.is_zero());
        let single = crossstitch_init(1, 4);
        assert_eq!(single.maps(), 1);
        assert_eq!(count_params(&p) as u128, crossstitch_cost(3, 1, 1, 8).params);
    }

    #[test]
    fn zero_init_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for shape in [[3usize, 4, 4, 8], [1, 2, 3, 4]] {
            let f = Tensor::randn(&shape, &mut r);
            let p = crossstitch_init(shape[0], shape[3]);
            assert_eq!(crossstitch_forward(&f, &p).unwrap(), f);
        }
    }

    #[test]
    fn single_map_pooled_branch_is_channel_map() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[1, 3, 3, 4], &mut r);
        let mut p = crossstitch_init(1, 4);
        p.pooled = Tensor::eye(4).scale(2.0);
        let out = crossstitch_forward(&f, &p).unwrap();
        assert_eq!(out, f.scale(3.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn(&[3, 4, 4, 2], &mut r);
        let p = random_params(3, 2, 3);
        let want = f.add(&delta_loops(&f, &p)).unwrap();
        let got = crossstitch_forward(&f, &p).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn even_map_count_uses_left_padding() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::randn(&[4, 2, 2, 3], &mut r);
        let p = random_params(4, 3, 4);
        let got = crossstitch_forward(&f, &p).unwrap();
        let want = f.add(&delta_loops(&f, &p)).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn batched_equals_per_item() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::randn(&[2, 3, 2, 2, 3], &mut r);
        let p = random_params(3, 3, 5);
        let all = crossstitch_forward(&f, &p).unwrap();
        for i in 0..2 {
            assert_eq!(all.index_first(i), crossstitch_forward(&f.index_first(i), &p).unwrap());
        }
    }

    #[test]
    fn pixel_locality() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::randn(&[3, 4, 4, 2], &mut r);
        let p = random_params(3, 2, 6);
        let base = crossstitch_forward(&f, &p).unwrap();
        let mut g = f.clone();
        for m in 0..3 {
            g.set(&[m, 1, 2, 0], g.get(&[m, 1, 2, 0]) + 1.0);
        }
        let moved = crossstitch_forward(&g, &p).unwrap();
        for m in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    for c in 0..2 {
                        let same = base.get(&[m, i, j, c]) == moved.get(&[m, i, j, c]);
                        assert_eq!(same, (i, j) != (1, 2), "pixel ({i},{j}) map {m} ch {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn not_equivariant_over_maps() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let f = Tensor::randn(&[3, 2, 2, 2], &mut r);
        let p = random_params(3, 2, 7);
        let swap = |t: &Tensor| Tensor::stack(&[t.index_first(1), t.index_first(0), t.index_first(2)]).unwrap();
        let a = swap(&crossstitch_forward(&f, &p).unwrap());
        let b = crossstitch_forward(&swap(&f), &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn gradient_check() {
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let f = Tensor::randn(&[3, 2, 3, 2], &mut r);
            let p = random_params(3, 2, 100 + seed);
            let mut inputs = vec![f];
            visit(&p, &mut |_, t: &Tensor| inputs.push(t.clone()));
            let rep = finite_difference_check_many(
                |g, v| {
                    let b = CrossStitchParams {
                        depthwise: v[1],
                        depthwise_bias: v[2],
                        pointwise: v[3],
                        pointwise_bias: v[4],
                        pooled: v[5],
                        pooled_bias: v[6],
                    };
                    let y = crossstitch_graph(g, v[0], &b)?;
                    g.sum_squares(y)
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = crossstitch_init(3, 2);
        assert!(matches!(crossstitch_forward(&Tensor::zeros(&[2, 2, 2, 2]), &p), Err(HimatError::ShapeMismatch { .. })));
    }

    #[test]
    fn cost_examples() {
        assert_eq!(crossstitch_cost(1, 1, 1, 1).params, 6);
        let a = crossstitch_cost(3, 8, 8, 16).time_flops;
        assert_eq!(crossstitch_cost(3, 16, 8, 16).time_flops, 2 * a);
        for c in [8usize, 16, 32, 64, 256, 2240] {
            for side in [4usize, 16, 64, 128] {
                let m = 3;
                let n = m * side * side;
                let cs = crossstitch_cost(m, side, side, c).time_flops;
                assert!(cs < attention_layer_flops(n, c, AttentionVariant::Linear), "C={c}, side={side}");
            }
        }
    }
}
