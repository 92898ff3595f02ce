//! Wavelet-domain velocity supervision.
//!
//! Reduction convention for both losses: squared subband differences are
//! summed over maps, channels and pixels, then averaged over the batch.
//! Stacks are `[M, H, W, C]` (batch of one) or `[B, M, H, W, C]`.
//!
//! Because the transforms are linear, `W(pred) - W(target)` is evaluated as
//! `W(pred - target)`.

use serde::{Deserialize, Serialize};

use super::basis::WaveletBasis;
use super::transform::{FilterSpec, SpatialAxes};
use crate::autograd::{Graph, Var};
use crate::error::{HimatError, Result};
use crate::tensor::Tensor;

/// Per-subband loss weights. Defaults favour the high-frequency bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubbandWeights {
    pub ll: f64,
    pub lh: f64,
    pub hl: f64,
    pub hh: f64,
}

impl Default for SubbandWeights {
    fn default() -> Self {
        SubbandWeights { ll: 0.5, lh: 2.0, hl: 2.0, hh: 2.5 }
    }
}

impl SubbandWeights {
    pub fn uniform(w: f64) -> Self {
        SubbandWeights { ll: w, lh: w, hl: w, hh: w }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.ll, self.lh, self.hl, self.hh].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(HimatError::InvalidConfig(format!("subband weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

struct GraphBands {
    ll: Var,
    lh: Var,
    hl: Var,
    hh: Var,
}

fn graph_level(g: &mut Graph, x: Var, b: &WaveletBasis, axes: SpatialAxes, dilation: usize, decimate: bool) -> Result<GraphBands> {
    let f = |axis: usize, taps: &[f64]| FilterSpec { axis, taps: taps.to_vec(), dilation, decimate };
    let lo_w = g.periodic_filter(x, f(axes.w, &b.dec_lo))?;
    let hi_w = g.periodic_filter(x, f(axes.w, &b.dec_hi))?;
    Ok(GraphBands {
        ll: g.periodic_filter(lo_w, f(axes.h, &b.dec_lo))?,
        lh: g.periodic_filter(lo_w, f(axes.h, &b.dec_hi))?,
        hl: g.periodic_filter(hi_w, f(axes.h, &b.dec_lo))?,
        hh: g.periodic_filter(hi_w, f(axes.h, &b.dec_hi))?,
    })
}

fn batch_size(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        4 => Ok(1),
        5 => Ok(shape[0]),
        _ => Err(HimatError::shape("wavelet_loss", format!("expected [M,H,W,C] or [B,M,H,W,C], got {shape:?}"))),
    }
}

fn diff(g: &mut Graph, pred: Var, target: Var) -> Result<(Var, usize)> {
    if g.shape(pred) != g.shape(target) {
        return Err(HimatError::shape("wavelet_loss", format!("{:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    let batch = batch_size(g.shape(pred))?;
    Ok((g.sub(pred, target)?, batch))
}

fn weighted(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(band, w) in terms {
        let e = g.sum_squares(band)?;
        let e = g.scale(e, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, e)?,
            None => e,
        });
    }
    Ok(acc.expect("at least one term"))
}

/// `lambda * ||DWT(pred) - DWT(target)||^2` over all four one-level subbands.
pub fn dwt_loss_graph(g: &mut Graph, pred: Var, target: Var, lambda: f64, b: &WaveletBasis) -> Result<Var> {
    let (d, batch) = diff(g, pred, target)?;
    let shape = g.shape(d).to_vec();
    let axes = SpatialAxes::stack(shape.len());
    if shape[axes.h] % 2 != 0 || shape[axes.w] % 2 != 0 {
        return Err(HimatError::OddDimensions(shape[axes.h], shape[axes.w]));
    }
    let bands = graph_level(g, d, b, axes, 1, true)?;
    let total = weighted(g, &[(bands.ll, 1.0), (bands.lh, 1.0), (bands.hl, 1.0), (bands.hh, 1.0)])?;
    g.scale(total, lambda / batch as f64)
}

/// Weighted SWT loss. For `levels > 1` the detail bands of every level are
/// weighted and the LL weight applies to the coarsest approximation only.
pub fn swt_loss_graph(
    g: &mut Graph,
    pred: Var,
    target: Var,
    w: &SubbandWeights,
    b: &WaveletBasis,
    levels: usize,
) -> Result<Var> {
    if levels == 0 {
        return Err(HimatError::InvalidConfig("swt loss needs at least one level".into()));
    }
    let (d, batch) = diff(g, pred, target)?;
    let axes = SpatialAxes::stack(g.shape(d).len());
    let mut cur = d;
    let mut terms = Vec::with_capacity(3 * levels + 1);
    for j in 0..levels {
        let bands = graph_level(g, cur, b, axes, 1 << j, false)?;
        terms.extend([(bands.lh, w.lh), (bands.hl, w.hl), (bands.hh, w.hh)]);
        cur = bands.ll;
    }
    terms.push((cur, w.ll));
    let total = weighted(g, &terms)?;
    g.scale(total, 1.0 / batch as f64)
}

pub fn dwt_loss(pred: &Tensor, target: &Tensor, lambda: f64, b: &WaveletBasis) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = dwt_loss_graph(&mut g, p, t, lambda, b)?;
    Ok(g.value(l).item())
}

pub fn swt_loss(pred: &Tensor, target: &Tensor, w: &SubbandWeights, b: &WaveletBasis, levels: usize) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = swt_loss_graph(&mut g, p, t, w, b, levels)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check_many;
    use crate::wavelet::basis::load_basis;
    use crate::wavelet::transform::{dwt2, swt2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64, shape: &[usize]) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(shape, &mut r), Tensor::randn(shape, &mut r))
    }

    /// Channel `c` of map `m` as an `[H, W]` image.
    fn plane(x: &Tensor, m: usize, c: usize) -> Tensor {
        let s = x.shape();
        Tensor::from_fn(&[s[1], s[2]], |i| x.get(&[m, i[0], i[1], c]))
    }

    #[test]
    fn default_weights() {
        let w = SubbandWeights::default();
        assert_eq!((w.ll, w.lh, w.hl, w.hh), (0.5, 2.0, 2.0, 2.5));
    }

    #[test]
    fn identical_inputs_and_zero_lambda_give_zero() {
        let b = load_basis("sym4").unwrap();
        let (p, t) = pair(1, &[2, 8, 8, 3]);
        assert_eq!(dwt_loss(&p, &p, 1.0, &b).unwrap(), 0.0);
        assert_eq!(dwt_loss(&p, &t, 0.0, &b).unwrap(), 0.0);
        assert_eq!(swt_loss(&p, &p, &SubbandWeights::default(), &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dwt_loss_matches_per_subband_loop() {
        let b = load_basis("haar").unwrap();
        let (p, t) = pair(2, &[3, 8, 6, 2]);
        let mut want = 0.0;
        for m in 0..3 {
            for c in 0..2 {
                let sp = dwt2(&plane(&p, m, c), &b).unwrap();
                let st = dwt2(&plane(&t, m, c), &b).unwrap();
                for ((_, x), (_, y)) in sp.levels[0].bands().iter().zip(st.levels[0].bands().iter()) {
                    want += x.sub(y).unwrap().sum_squares();
                }
            }
        }
        let got = dwt_loss(&p, &t, 1.0, &b).unwrap();
        assert!((got - want).abs() < 1e-10 * want.max(1.0));
    }

    #[test]
    fn swt_loss_matches_brute_force() {
        let b = load_basis("sym4").unwrap();
        let w = SubbandWeights::default();
        let (p, t) = pair(3, &[3, 8, 8, 2]);
        let mut want = 0.0;
        for m in 0..3 {
            for c in 0..2 {
                let sp = swt2(&plane(&p, m, c), &b, 1).unwrap();
                let st = swt2(&plane(&t, m, c), &b, 1).unwrap();
                let weights = [w.ll, w.lh, w.hl, w.hh];
                for (((_, x), (_, y)), lw) in sp.levels[0].bands().iter().zip(st.levels[0].bands().iter()).zip(weights) {
                    want += lw * x.sub(y).unwrap().sum_squares();
                }
            }
        }
        let got = swt_loss(&p, &t, &w, &b, 1).unwrap();
        assert!((got - want).abs() < 1e-10 * want.max(1.0));
    }

    #[test]
    fn batch_dimension_is_averaged() {
        let b = load_basis("haar").unwrap();
        let w = SubbandWeights::default();
        let (p, t) = pair(4, &[2, 3, 4, 4, 2]);
        let per: f64 = (0..2).map(|i| swt_loss(&p.index_first(i), &t.index_first(i), &w, &b, 1).unwrap()).sum();
        let got = swt_loss(&p, &t, &w, &b, 1).unwrap();
        assert!((got - per / 2.0).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch() {
        let b = load_basis("haar").unwrap();
        let (p, _) = pair(5, &[1, 4, 4, 1]);
        let q = Tensor::zeros(&[1, 4, 6, 1]);
        assert!(matches!(swt_loss(&p, &q, &SubbandWeights::default(), &b, 1), Err(HimatError::ShapeMismatch { .. })));
    }

    #[test]
    fn swt_loss_gradient() {
        let b = load_basis("sym4").unwrap();
        let (p, t) = pair(6, &[2, 6, 6, 2]);
        let r = finite_difference_check_many(
            |g, v| swt_loss_graph(g, v[0], v[1], &SubbandWeights::default(), &b, 2),
            &[p, t],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }
}
