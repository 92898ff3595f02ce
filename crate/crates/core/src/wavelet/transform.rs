//! Separable 2-D DWT and SWT with periodic boundaries.
//!
//! Both transforms are built from one primitive, a circular correlation
//! along a single axis:
//!
//! ```text
//! y[i] = sum_k taps[k] * x[(stride*i + dilation*k) mod n]
//! ```
//!
//! The DWT uses stride 2 (orthogonal analysis, so the inverse is the
//! adjoint). The SWT uses stride 1 with à-trous dilation `2^(level-1)`; its
//! analysis operator `A` satisfies `A^T A = 4 I` in 2-D, so the inverse is
//! `A^T / 4` per level.

use serde::{Deserialize, Serialize};

use super::basis::WaveletBasis;
use crate::error::{HimatError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub axis: usize,
    pub taps: Vec<f64>,
    pub dilation: usize,
    pub decimate: bool,
}

impl FilterSpec {
    fn stride(&self) -> usize {
        if self.decimate {
            2
        } else {
            1
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn periodic_filter(x: &Tensor, spec: &FilterSpec) -> Result<Tensor> {
    let shape = x.shape();
    if spec.axis >= shape.len() {
        return Err(HimatError::shape("periodic_filter", format!("axis {} for {shape:?}", spec.axis)));
    }
    let (outer, n, inner) = split_axis(shape, spec.axis);
    if spec.decimate && n % 2 != 0 {
        return Err(HimatError::shape("periodic_filter", format!("odd length {n} cannot be decimated")));
    }
    let s = spec.stride();
    let out_n = n / s;
    let xd = x.data();
    let mut out = vec![0.0; outer * out_n * inner];
    for o in 0..outer {
        for i in 0..out_n {
            let dst = &mut out[(o * out_n + i) * inner..(o * out_n + i + 1) * inner];
            for (k, &t) in spec.taps.iter().enumerate() {
                let src = (s * i + spec.dilation * k) % n;
                let row = &xd[(o * n + src) * inner..(o * n + src + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += t * v;
                }
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[spec.axis] = out_n;
    Ok(Tensor::from_parts(out_shape, out))
}

/// Transpose of [`periodic_filter`]: scatters `gy` back onto an input of `in_shape`.
pub(crate) fn periodic_filter_adjoint(gy: &Tensor, in_shape: &[usize], spec: &FilterSpec) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(in_shape, spec.axis);
    let s = spec.stride();
    let out_n = n / s;
    if gy.shape()[spec.axis] != out_n {
        return Err(HimatError::shape("periodic_filter_adjoint", format!("{:?} vs {in_shape:?}", gy.shape())));
    }
    let gd = gy.data();
    let mut gx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for i in 0..out_n {
            let src_row = &gd[(o * out_n + i) * inner..(o * out_n + i + 1) * inner];
            for (k, &t) in spec.taps.iter().enumerate() {
                let dst = (s * i + spec.dilation * k) % n;
                let row = &mut gx[(o * n + dst) * inner..(o * n + dst + 1) * inner];
                for (d, &v) in row.iter_mut().zip(src_row) {
                    *d += t * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), gx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Dwt,
    Swt,
}

/// One decomposition level. `lh` is lowpass along width and highpass along
/// height; `hl` is the converse.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandLevel {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubbandLevel {
    pub fn bands(&self) -> [(&'static str, &Tensor); 4] {
        [("LL", &self.ll), ("LH", &self.lh), ("HL", &self.hl), ("HH", &self.hh)]
    }
}

/// Multi-level decomposition; `levels[0]` is the finest.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub kind: TransformKind,
    pub levels: Vec<SubbandLevel>,
}

/// Axes of the two spatial dims inside a tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SpatialAxes {
    pub h: usize,
    pub w: usize,
}

impl SpatialAxes {
    /// `[H, W]` images.
    pub const IMAGE: SpatialAxes = SpatialAxes { h: 0, w: 1 };

    /// `[..., H, W, C]` stacks.
    pub fn stack(rank: usize) -> SpatialAxes {
        SpatialAxes { h: rank - 3, w: rank - 2 }
    }
}

fn spec(axis: usize, taps: &[f64], dilation: usize, decimate: bool) -> FilterSpec {
    FilterSpec { axis, taps: taps.to_vec(), dilation, decimate }
}

pub(crate) fn analysis_level(
    x: &Tensor,
    b: &WaveletBasis,
    axes: SpatialAxes,
    dilation: usize,
    decimate: bool,
) -> Result<SubbandLevel> {
    let lo_w = periodic_filter(x, &spec(axes.w, &b.dec_lo, dilation, decimate))?;
    let hi_w = periodic_filter(x, &spec(axes.w, &b.dec_hi, dilation, decimate))?;
    Ok(SubbandLevel {
        ll: periodic_filter(&lo_w, &spec(axes.h, &b.dec_lo, dilation, decimate))?,
        lh: periodic_filter(&lo_w, &spec(axes.h, &b.dec_hi, dilation, decimate))?,
        hl: periodic_filter(&hi_w, &spec(axes.h, &b.dec_lo, dilation, decimate))?,
        hh: periodic_filter(&hi_w, &spec(axes.h, &b.dec_hi, dilation, decimate))?,
    })
}

fn synthesis_level(
    s: &SubbandLevel,
    b: &WaveletBasis,
    axes: SpatialAxes,
    out_shape: &[usize],
    dilation: usize,
    decimate: bool,
) -> Result<Tensor> {
    let mut mid_shape = s.ll.shape().to_vec();
    mid_shape[axes.h] = out_shape[axes.h];
    let up = |t: &Tensor, taps: &[f64], axis: usize, shape: &[usize]| {
        periodic_filter_adjoint(t, shape, &spec(axis, taps, dilation, decimate))
    };
    let lo_w = up(&s.ll, &b.dec_lo, axes.h, &mid_shape)?.add(&up(&s.lh, &b.dec_hi, axes.h, &mid_shape)?)?;
    let hi_w = up(&s.hl, &b.dec_lo, axes.h, &mid_shape)?.add(&up(&s.hh, &b.dec_hi, axes.h, &mid_shape)?)?;
    let x = up(&lo_w, &b.dec_lo, axes.w, out_shape)?.add(&up(&hi_w, &b.dec_hi, axes.w, out_shape)?)?;
    Ok(if decimate { x } else { x.scale(0.25) })
}

fn check_image(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(HimatError::shape("wavelet", format!("expected [H, W], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// One-level 2-D DWT with periodic boundary; subbands are `H/2 x W/2`.
pub fn dwt2(x: &Tensor, b: &WaveletBasis) -> Result<Subbands> {
    let (h, w) = check_image(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(HimatError::OddDimensions(h, w));
    }
    let level = analysis_level(x, b, SpatialAxes::IMAGE, 1, true)?;
    Ok(Subbands { kind: TransformKind::Dwt, levels: vec![level] })
}

pub fn idwt2(s: &Subbands, b: &WaveletBasis) -> Result<Tensor> {
    if s.kind != TransformKind::Dwt || s.levels.len() != 1 {
        return Err(HimatError::shape("idwt2", "expected one DWT level"));
    }
    let lvl = &s.levels[0];
    check_bands_consistent(lvl)?;
    let (h, w) = check_image(&lvl.ll)?;
    synthesis_level(lvl, b, SpatialAxes::IMAGE, &[2 * h, 2 * w], 1, true)
}

/// Undecimated 2-D wavelet transform (à-trous). Every subband keeps the
/// input's `H x W` shape; level `j` uses filters dilated by `2^(j-1)` and
/// operates on the previous level's LL.
pub fn swt2(x: &Tensor, b: &WaveletBasis, levels: usize) -> Result<Subbands> {
    check_image(x)?;
    swt_axes(x, b, levels, SpatialAxes::IMAGE)
}

pub(crate) fn swt_axes(x: &Tensor, b: &WaveletBasis, levels: usize, axes: SpatialAxes) -> Result<Subbands> {
    if levels == 0 {
        return Err(HimatError::InvalidConfig("swt needs at least one level".into()));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for j in 0..levels {
        let lvl = analysis_level(&cur, b, axes, 1 << j, false)?;
        cur = lvl.ll.clone();
        out.push(lvl);
    }
    Ok(Subbands { kind: TransformKind::Swt, levels: out })
}

pub fn iswt2(s: &Subbands, b: &WaveletBasis) -> Result<Tensor> {
    if s.kind != TransformKind::Swt || s.levels.is_empty() {
        return Err(HimatError::shape("iswt2", "expected SWT subbands"));
    }
    let shape = s.levels[0].ll.shape().to_vec();
    let mut cur = s.levels.last().unwrap().ll.clone();
    for (j, lvl) in s.levels.iter().enumerate().rev() {
        check_bands_consistent(lvl)?;
        if lvl.ll.shape() != shape.as_slice() {
            return Err(HimatError::shape("iswt2", "all SWT levels must share one shape"));
        }
        let with_ll = SubbandLevel { ll: cur, lh: lvl.lh.clone(), hl: lvl.hl.clone(), hh: lvl.hh.clone() };
        cur = synthesis_level(&with_ll, b, SpatialAxes::IMAGE, &shape, 1 << j, false)?;
    }
    Ok(cur)
}

fn check_bands_consistent(l: &SubbandLevel) -> Result<()> {
    let s = l.ll.shape();
    if l.lh.shape() != s || l.hl.shape() != s || l.hh.shape() != s {
        return Err(HimatError::shape("wavelet", "subband shapes differ"));
    }
    Ok(())
}
