//! Image metrics: PSNR, GLCM contrast and cross-map structural consistency.

use serde::{Deserialize, Serialize};

use crate::error::{HimatError, Result};
use crate::material::MaterialSet;
use crate::tensor::Tensor;

/// `10 log10(peak^2 / MSE)`; `+inf` when the inputs are identical.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(HimatError::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlcmConfig {
    pub levels: usize,
    /// `(dy, dx)` pixel offsets.
    pub offsets: Vec<(isize, isize)>,
    pub symmetric: bool,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        GlcmConfig { levels: 16, offsets: vec![(0, 1), (1, 0)], symmetric: true }
    }
}

impl GlcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(HimatError::InvalidConfig("GLCM needs at least 2 gray levels".into()));
        }
        if self.offsets.is_empty() || self.offsets.contains(&(0, 0)) {
            return Err(HimatError::InvalidConfig("GLCM offsets must be nonempty and nonzero".into()));
        }
        Ok(())
    }
}

/// Gray level of a `[0, 1]` value: `floor(v L)`, clamped to `L - 1`.
pub fn quantize(v: f64, levels: usize) -> usize {
    ((v.clamp(0.0, 1.0) * levels as f64).floor() as usize).min(levels - 1)
}

/// Normalized co-occurrence matrix (`L x L`, row-major) for one offset.
/// Pairs falling outside the image are skipped; `None` if no pair fits.
pub fn glcm(img: &Tensor, levels: usize, offset: (isize, isize), symmetric: bool) -> Option<Vec<f64>> {
    let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
    let q: Vec<usize> = img.data().iter().map(|&v| quantize(v, levels)).collect();
    let mut counts = vec![0.0; levels * levels];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (y2, x2) = (y + offset.0, x + offset.1);
            if !(0..h).contains(&y2) || !(0..w).contains(&x2) {
                continue;
            }
            let (a, b) = (q[(y * w + x) as usize], q[(y2 * w + x2) as usize]);
            counts[a * levels + b] += 1.0;
            total += 1.0;
            if symmetric {
                counts[b * levels + a] += 1.0;
                total += 1.0;
            }
        }
    }
    if total == 0.0 {
        return None;
    }
    counts.iter_mut().for_each(|c| *c /= total);
    Some(counts)
}

/// Mean over offsets of the GLCM contrast `sum p(i, j) (i - j)^2` of an `[H, W]` image.
pub fn glcm_score(img: &Tensor, cfg: &GlcmConfig) -> Result<f64> {
    cfg.validate()?;
    if img.rank() != 2 {
        return Err(HimatError::shape("glcm_score", format!("expected [H, W], got {:?}", img.shape())));
    }
    let l = cfg.levels;
    let mut sum = 0.0;
    let mut used = 0;
    for &off in &cfg.offsets {
        if let Some(p) = glcm(img, l, off, cfg.symmetric) {
            sum += (0..l * l).map(|k| p[k] * ((k / l) as f64 - (k % l) as f64).powi(2)).sum::<f64>();
            used += 1;
        }
    }
    Ok(if used == 0 { 0.0 } else { sum / used as f64 })
}

/// Rec. 709 luma of an `[H, W, 3]` image; `[H, W]` passes through.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        [_, _] => Ok(img.clone()),
        [h, w, 3] => Tensor::new(
            &[*h, *w],
            img.data().chunks(3).map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]).collect(),
        ),
        s => Err(HimatError::shape("luminance", format!("{s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Mean pairwise Pearson correlation, in `[-1, 1]`.
    pub score: f64,
    /// Number of pairs with a constant gradient field; they count as 0.
    pub degenerate_pairs: usize,
}

impl Consistency {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_pairs > 0
    }
}

/// Per-pixel gradient magnitude of `[H, W]` or `[H, W, C]` with circular
/// central differences, summed in quadrature over channels.
pub fn gradient_magnitude(map: &Tensor) -> Result<Vec<f64>> {
    let s = map.shape();
    let (h, w, c) = match s {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => return Err(HimatError::shape("gradient_magnitude", format!("{s:?}"))),
    };
    let d = map.data();
    let at = |y: usize, x: usize, k: usize| d[(y * w + x) * c + k];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in 0..c {
                let gx = (at(y, (x + 1) % w, k) - at(y, (x + w - 1) % w, k)) / 2.0;
                let gy = (at((y + 1) % h, x, k) - at((y + h - 1) % h, x, k)) / 2.0;
                acc += gx * gx + gy * gy;
            }
            out.push(acc.sqrt());
        }
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean Pearson correlation of gradient magnitudes over all pairs of maps.
pub fn cross_map_consistency_maps(maps: &[&Tensor]) -> Result<Consistency> {
    if maps.len() < 2 {
        return Err(HimatError::InvalidConfig("consistency needs at least two maps".into()));
    }
    let hw = &maps[0].shape()[..2];
    if maps.iter().any(|m| m.rank() < 2 || &m.shape()[..2] != hw) {
        return Err(HimatError::shape("cross_map_consistency", "maps are not pixel-aligned"));
    }
    let grads = maps.iter().map(|m| gradient_magnitude(m)).collect::<Result<Vec<_>>>()?;
    let (mut sum, mut pairs, mut degenerate) = (0.0, 0, 0);
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            match pearson(&grads[i], &grads[j]) {
                Some(r) => sum += r,
                None => degenerate += 1,
            }
            pairs += 1;
        }
    }
    if degenerate > 0 {
        log::warn!("cross_map_consistency: {degenerate} of {pairs} map pairs have a constant gradient field");
    }
    Ok(Consistency { score: sum / pairs as f64, degenerate_pairs: degenerate })
}

/// Consistency over the five maps of a material.
pub fn cross_map_consistency(m: &MaterialSet) -> Result<Consistency> {
    let maps: Vec<&Tensor> = m.named_maps().iter().map(|(_, t)| *t).collect();
    cross_map_consistency_maps(&maps)
}

/// Consistency over the maps of an `[M, H, W, C]` stack.
pub fn stack_consistency(stack: &Tensor) -> Result<Consistency> {
    if stack.rank() != 4 {
        return Err(HimatError::shape("stack_consistency", format!("expected [M, H, W, C], got {:?}", stack.shape())));
    }
    let maps: Vec<Tensor> = (0..stack.shape()[0]).map(|i| stack.index_first(i)).collect();
    cross_map_consistency_maps(&maps.iter().collect::<Vec<_>>())
}
