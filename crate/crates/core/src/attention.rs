//! Single-head softmax and linear attention, plus their analytic cost models.
//!
//! Inputs are token matrices `[N, C]` or batches of them `[G, N, C]`; each
//! batch entry attends only within itself. There is no positional encoding,
//! so both variants are equivariant to permutations of the tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{HimatError, Result};
use crate::params::{join, normal, ParamTree};
use crate::tensor::Tensor;

/// Denominator guard for linear attention.
pub const LINEAR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Softmax,
    Linear,
}

/// Square projection matrices `W_q, W_k, W_v, W_o: [C, C]`, applied as `x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub variant: AttentionVariant,
}

impl AttentionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c: usize, variant: AttentionVariant, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        AttentionParams {
            wq: normal(&[c, c], std, rng),
            wk: normal(&[c, c], std, rng),
            wv: normal(&[c, c], std, rng),
            wo: normal(&[c, c], std, rng),
            variant,
        }
    }

    pub fn identity(c: usize, variant: AttentionVariant) -> Self {
        AttentionParams { wq: Tensor::eye(c), wk: Tensor::eye(c), wv: Tensor::eye(c), wo: Tensor::eye(c), variant }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    /// Head dimension; equals `C` in single-head mode.
    pub fn d_k(&self) -> usize {
        self.channels()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.shape() != [c, c] {
                return Err(HimatError::shape("attention", format!("{name} is {:?}, expected [{c}, {c}]", w.shape())));
            }
        }
        Ok(())
    }
}

impl<T> ParamTree<T> for AttentionParams<T> {
    type With<U> = AttentionParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&join(prefix, "wq"), &self.wq),
            wk: f(&join(prefix, "wk"), &self.wk),
            wv: f(&join(prefix, "wv"), &self.wv),
            wo: f(&join(prefix, "wo"), &self.wo),
            variant: self.variant,
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

/// Lifts `[N, C]` to `[1, N, C]`; returns the batched var and whether it was lifted.
fn as_batched(g: &mut Graph, s: Var, c: usize) -> Result<(Var, bool)> {
    let shape = g.shape(s).to_vec();
    match shape.as_slice() {
        [n, sc] if *sc == c => Ok((g.reshape(s, &[1, *n, c])?, true)),
        [_, _, sc] if *sc == c => Ok((s, false)),
        _ => Err(HimatError::shape("attention", format!("input {shape:?} for C = {c}"))),
    }
}

fn projections(g: &mut Graph, s: Var, p: &AttentionParams<Var>) -> Result<(Var, Var, Var, usize)> {
    let c = g.shape(p.wq)[0];
    for w in [p.wk, p.wv, p.wo] {
        if g.shape(w) != [c, c] {
            return Err(HimatError::shape("attention", format!("projection {:?} for C = {c}", g.shape(w))));
        }
    }
    let q = g.linear(s, p.wq, None)?;
    let k = g.linear(s, p.wk, None)?;
    let v = g.linear(s, p.wv, None)?;
    Ok((q, k, v, c))
}

fn finish(g: &mut Graph, out: Var, p: &AttentionParams<Var>, lifted: bool) -> Result<Var> {
    let y = g.linear(out, p.wo, None)?;
    if lifted {
        let s = g.shape(y).to_vec();
        g.reshape(y, &s[1..])
    } else {
        Ok(y)
    }
}

/// `Softmax(Q K^T / sqrt(d_k)) V`, then the output projection.
pub fn softmax_attention_graph(g: &mut Graph, s: Var, p: &AttentionParams<Var>) -> Result<Var> {
    let c = g.shape(p.wq)[0];
    let (s, lifted) = as_batched(g, s, c)?;
    let (q, k, v, c) = projections(g, s, p)?;
    let kt = g.transpose_last(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let weights = g.softmax_last(scores)?;
    let out = g.bmm(weights, v)?;
    finish(g, out, p, lifted)
}

/// `ReLU(Q) (ReLU(K)^T V) / (ReLU(Q) (ReLU(K)^T 1) + eps)`, then the output
/// projection. The `C x C` key-value product is formed first, so no `N x N`
/// intermediate ever exists; the largest intermediate is `max(N C, C^2)`
/// elements per batch entry.
pub fn linear_attention_graph(g: &mut Graph, s: Var, p: &AttentionParams<Var>, eps: f64) -> Result<Var> {
    let c = g.shape(p.wq)[0];
    let (s, lifted) = as_batched(g, s, c)?;
    let (q, k, v, _) = projections(g, s, p)?;
    let q = g.relu(q)?;
    let k = g.relu(k)?;
    let kt = g.transpose_last(k)?;
    let kv = g.bmm(kt, v)?;
    let num = g.bmm(q, kv)?;
    let ksum = g.sum_axis(k, 1)?;
    let ksum_t = g.transpose_last(ksum)?;
    let den = g.bmm(q, ksum_t)?;
    let den = g.add_scalar(den, eps)?;
    let shape = g.shape(num).to_vec();
    let den = g.broadcast(den, &shape)?;
    let out = g.div(num, den)?;
    finish(g, out, p, lifted)
}

/// Dispatches on `p.variant`.
pub fn attend_graph(g: &mut Graph, s: Var, p: &AttentionParams<Var>) -> Result<Var> {
    match p.variant {
        AttentionVariant::Softmax => softmax_attention_graph(g, s, p),
        AttentionVariant::Linear => linear_attention_graph(g, s, p, LINEAR_EPS),
    }
}

fn eager(s: &Tensor, p: &AttentionParams, f: impl FnOnce(&mut Graph, Var, &AttentionParams<Var>) -> Result<Var>) -> Result<Tensor> {
    p.validate()?;
    let mut g = Graph::new();
    let bound = crate::params::bind_constant(p, &mut g);
    let x = g.constant(s.clone());
    let y = f(&mut g, x, &bound)?;
    Ok(g.value(y).clone())
}

/// Softmax attention on a `[N, C]` (or `[G, N, C]`) tensor.
pub fn attention(s: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    eager(s, p, softmax_attention_graph)
}

/// Linear attention on a `[N, C]` (or `[G, N, C]`) tensor.
pub fn linear_attention(s: &Tensor, p: &AttentionParams, eps: f64) -> Result<Tensor> {
    eager(s, p, |g, x, b| linear_attention_graph(g, x, b, eps))
}

/// How the softmax projection term is counted in [`attention_cost_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionTerm {
    /// The printed polynomial, `3NC`.
    #[default]
    Verbatim,
    /// Three dense `C x C` projections, `3NC^2`.
    Corrected,
}

/// Symbolic time and space complexity of one attention evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub time_flops: u128,
    pub space_units: u128,
}

/// Evaluates the closed-form complexity polynomials:
///
/// | variant | time                  | space (elements)   |
/// |---------|-----------------------|--------------------|
/// | softmax | `3NC + NC^2 + N^2 C`  | `2N^2 + 4NC`       |
/// | linear  | `2NC^2 + 7NC`         | `N + NC + C^2`     |
pub fn attention_cost(n: usize, c: usize, variant: AttentionVariant) -> AttentionCost {
    attention_cost_with(n, c, variant, ProjectionTerm::Verbatim)
}

pub fn attention_cost_with(n: usize, c: usize, variant: AttentionVariant, proj: ProjectionTerm) -> AttentionCost {
    let (n, c) = (n as u128, c as u128);
    match variant {
        AttentionVariant::Softmax => {
            let projection = match proj {
                ProjectionTerm::Verbatim => 3 * n * c,
                ProjectionTerm::Corrected => 3 * n * c * c,
            };
            AttentionCost { time_flops: projection + n * c * c + n * n * c, space_units: 2 * n * n + 4 * n * c }
        }
        AttentionVariant::Linear => {
            AttentionCost { time_flops: 2 * n * c * c + 7 * n * c, space_units: n + n * c + c * c }
        }
    }
}

/// Operation count of a full attention layer as executed here, counting a
/// multiply-add as 2 and including all four projections.
///
/// * softmax: projections `8NC^2`, `QK^T` and `PV` `4N^2 C`, scaling and
///   softmax `5N^2` (scale, max-subtract, exp, sum, divide).
/// * linear: projections `8NC^2`, `K^T V` and `Q (K^T V)` `4NC^2`, ReLUs
///   `2NC`, key sum `NC`, denominator `2NC`, division `NC`, guard `N`.
pub fn attention_layer_flops(n: usize, c: usize, variant: AttentionVariant) -> u128 {
    let (n, c) = (n as u128, c as u128);
    match variant {
        AttentionVariant::Softmax => 8 * n * c * c + 4 * n * n * c + 5 * n * n,
        AttentionVariant::Linear => 12 * n * c * c + 6 * n * c + n,
    }
}

/// Peak live elements of an attention layer: input, Q, K, V and output
/// plus the variant's mixing intermediates (`2N^2` scores/weights, or the
/// `C^2 + C + N` key-value state and denominators).
pub fn attention_layer_memory(n: usize, c: usize, variant: AttentionVariant) -> u128 {
    let (n, c) = (n as u128, c as u128);
    match variant {
        AttentionVariant::Softmax => 5 * n * c + 2 * n * n,
        AttentionVariant::Linear => 5 * n * c + c * c + c + n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check_many;
    use crate::params::bind_constant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct evaluation of softmax attention with explicit loops.
    fn softmax_loop(s: &Tensor, p: &AttentionParams) -> Tensor {
        let (n, c) = (s.shape()[0], s.shape()[1]);
        let q = s.matmul(&p.wq).unwrap();
        let k = s.matmul(&p.wk).unwrap();
        let v = s.matmul(&p.wv).unwrap();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|d| q.get(&[i, d]) * k.get(&[j, d])).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
            for d in 0..c {
                let val: f64 = (0..n).map(|j| (scores[j] - m).exp() / z * v.get(&[j, d])).sum();
                out.set(&[i, d], val);
            }
        }
        out.matmul(&p.wo).unwrap()
    }

    #[test]
    fn single_token_returns_value_row() {
        let s = Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let p = AttentionParams::identity(3, AttentionVariant::Softmax);
        assert!(attention(&s, &p).unwrap().max_abs_diff(&s).unwrap() < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        // keys identical <=> all rows identical under identity projections would make
        // values identical too, so use distinct W_v rows: zero W_k makes all keys 0.
        let mut p = AttentionParams::identity(2, AttentionVariant::Softmax);
        p.wk = Tensor::zeros(&[2, 2]);
        let s = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5]).unwrap();
        let out = attention(&s, &p).unwrap();
        let mean = [(1.0 + 3.0 - 1.0) / 3.0, (2.0 + 5.0 + 0.5) / 3.0];
        for i in 0..3 {
            for d in 0..2 {
                assert!((out.get(&[i, d]) - mean[d]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_matches_loop_oracle() {
        let mut r = rng(11);
        let s = Tensor::randn(&[3, 2], &mut r);
        let p = AttentionParams::init(2, AttentionVariant::Softmax, &mut r);
        let got = attention(&s, &p).unwrap();
        assert!(got.max_abs_diff(&softmax_loop(&s, &p)).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_convex_combinations() {
        let mut r = rng(12);
        let s = Tensor::randn(&[6, 4], &mut r);
        let mut p = AttentionParams::init(4, AttentionVariant::Softmax, &mut r);
        p.wo = Tensor::eye(4);
        let out = attention(&s, &p).unwrap();
        let v = s.matmul(&p.wv).unwrap();
        for d in 0..4 {
            let col: Vec<f64> = (0..6).map(|j| v.get(&[j, d])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..6 {
                let x = out.get(&[i, d]);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn linear_single_token_positive() {
        let s = Tensor::new(&[1, 3], vec![0.5, 1.5, 2.0]).unwrap();
        let p = AttentionParams::identity(3, AttentionVariant::Linear);
        assert_eq!(linear_attention(&s, &p, 0.0).unwrap(), s);
        assert!(linear_attention(&s, &p, LINEAR_EPS).unwrap().max_abs_diff(&s).unwrap() < 1e-6);
    }

    #[test]
    fn linear_negative_query_row_is_zero() {
        let s = Tensor::new(&[2, 2], vec![-1.0, -2.0, 3.0, 4.0]).unwrap();
        let p = AttentionParams::identity(2, AttentionVariant::Linear);
        let out = linear_attention(&s, &p, LINEAR_EPS).unwrap();
        assert_eq!(&out.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn linear_never_materializes_n_by_n() {
        let mut r = rng(13);
        let (n, c) = (64, 4);
        let p = AttentionParams::init(c, AttentionVariant::Linear, &mut r);
        let mut g = Graph::new();
        let b = bind_constant(&p, &mut g);
        let x = g.constant(Tensor::randn(&[n, c], &mut r));
        linear_attention_graph(&mut g, x, &b, LINEAR_EPS).unwrap();
        assert!(g.max_intermediate_numel() <= (n * c).max(c * c));
    }

    #[test]
    fn batched_equals_per_entry() {
        let mut r = rng(14);
        let s = Tensor::randn(&[3, 5, 4], &mut r);
        for variant in [AttentionVariant::Softmax, AttentionVariant::Linear] {
            let p = AttentionParams::init(4, variant, &mut r);
            let f = |x: &Tensor| match variant {
                AttentionVariant::Softmax => attention(x, &p),
                AttentionVariant::Linear => linear_attention(x, &p, LINEAR_EPS),
            };
            let all = f(&s).unwrap();
            for i in 0..3 {
                assert_eq!(all.index_first(i), f(&s.index_first(i)).unwrap());
            }
        }
    }

    #[test]
    fn gradients_both_variants() {
        for seed in 0..5u64 {
            let mut r = rng(200 + seed);
            for variant in [AttentionVariant::Softmax, AttentionVariant::Linear] {
                let p = AttentionParams::init(3, variant, &mut r);
                let s = Tensor::randn(&[4, 3], &mut r);
                let inputs = vec![s, p.wq.clone(), p.wk.clone(), p.wv.clone(), p.wo.clone()];
                let rep = finite_difference_check_many(
                    |g, v| {
                        let b = AttentionParams { wq: v[1], wk: v[2], wv: v[3], wo: v[4], variant };
                        let y = attend_graph(g, v[0], &b)?;
                        g.sum_squares(y)
                    },
                    &inputs,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(rep.pass, "{variant:?} seed {seed}: {rep:?}");
            }
        }
    }

    /// Linear attention evaluated in the naive order: the `N x N` weight
    /// matrix `ReLU(Q) ReLU(K)^T` first, then row-normalized against `V`.
    fn linear_naive(s: &Tensor, p: &AttentionParams, eps: f64) -> Tensor {
        let (n, c) = (s.shape()[0], s.shape()[1]);
        let q = s.matmul(&p.wq).unwrap().map(|x| x.max(0.0));
        let k = s.matmul(&p.wk).unwrap().map(|x| x.max(0.0));
        let v = s.matmul(&p.wv).unwrap();
        let a = q.matmul(&k.transpose().unwrap()).unwrap();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let den: f64 = (0..n).map(|j| a.get(&[i, j])).sum::<f64>() + eps;
            for d in 0..c {
                let num: f64 = (0..n).map(|j| a.get(&[i, j]) * v.get(&[j, d])).sum();
                out.set(&[i, d], num / den);
            }
        }
        out.matmul(&p.wo).unwrap()
    }

    #[test]
    fn linear_matches_naive_order() {
        let mut r = rng(5);
        let s = Tensor::randn(&[4, 3], &mut r);
        let p = AttentionParams::init(3, AttentionVariant::Linear, &mut r);
        let got = linear_attention(&s, &p, LINEAR_EPS).unwrap();
        assert!(got.max_abs_diff(&linear_naive(&s, &p, LINEAR_EPS)).unwrap() < 1e-10);
    }

    #[test]
    fn permutation_equivariance() {
        let mut r = rng(15);
        let s = Tensor::randn(&[5, 3], &mut r);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor| Tensor::stack(&perm.iter().map(|&i| t.index_first(i)).collect::<Vec<_>>()).unwrap();
        for variant in [AttentionVariant::Softmax, AttentionVariant::Linear] {
            let p = AttentionParams::init(3, variant, &mut r);
            let f = |x: &Tensor| match variant {
                AttentionVariant::Softmax => attention(x, &p).unwrap(),
                AttentionVariant::Linear => linear_attention(x, &p, LINEAR_EPS).unwrap(),
            };
            assert!(permute(&f(&s)).max_abs_diff(&f(&permute(&s))).unwrap() < 1e-12);
        }
    }

    #[test]
    fn cost_polynomials_by_substitution() {
        assert_eq!(attention_cost(2, 3, AttentionVariant::Softmax).time_flops, 48);
        assert_eq!(attention_cost(2, 3, AttentionVariant::Linear).time_flops, 78);
        assert_eq!(attention_cost(2, 3, AttentionVariant::Softmax).space_units, 2 * 4 + 4 * 6);
        assert_eq!(attention_cost(2, 3, AttentionVariant::Linear).space_units, 2 + 6 + 9);
        assert_eq!(
            attention_cost_with(2, 3, AttentionVariant::Softmax, ProjectionTerm::Corrected).time_flops,
            3 * 2 * 9 + 2 * 9 + 4 * 3
        );
    }

    #[test]
    fn cost_asymptotics() {
        let c = 8;
        let n = 1 << 20;
        let ratio = |v| attention_cost(2 * n, c, v).time_flops as f64 / attention_cost(n, c, v).time_flops as f64;
        assert!((ratio(AttentionVariant::Softmax) - 4.0).abs() < 1e-3);
        assert!((ratio(AttentionVariant::Linear) - 2.0).abs() < 1e-12);
    }
}
