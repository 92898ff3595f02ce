//! Procedural, tileable material generator.
//!
//! Every item is derived from a single periodic height field; all other
//! maps are functions of that field, so structures line up across maps.
//! Items are keyed by `(seed, index)` and generated independently.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pack_maps, MaterialSet};
use crate::error::{HimatError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Stripes,
    Cells,
    Noise,
    Checker,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Stripes, Family::Cells, Family::Noise, Family::Checker];

    pub fn prompt_id(self) -> usize {
        self as usize
    }

    pub fn from_prompt_id(id: usize) -> Option<Family> {
        Self::ALL.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub index: usize,
    pub family: Family,
    pub material: MaterialSet,
}

impl SynthItem {
    pub fn prompt_id(&self) -> usize {
        self.family.prompt_id()
    }
}

pub(crate) fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a `cells x cells` lattice that wraps at the image border.
fn value_noise<R: Rng>(rng: &mut R, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let at = |i: usize, j: usize| lattice[(i % cells) * cells + j % cells];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = y as f64 * cells as f64 / h as f64;
        let (iy, ty) = (v.floor() as usize, smoothstep(v.fract()));
        for x in 0..w {
            let u = x as f64 * cells as f64 / w as f64;
            let (ix, tx) = (u.floor() as usize, smoothstep(u.fract()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn fbm<R: Rng>(rng: &mut R, h: usize, w: usize, base_cells: usize, octaves: usize) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    let mut amp = 1.0;
    for o in 0..octaves {
        let layer = value_noise(rng, h, w, base_cells << o);
        acc.iter_mut().zip(layer).for_each(|(a, l)| *a += amp * l);
        amp *= 0.5;
    }
    normalize(acc)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.5; v.len()];
    }
    v.into_iter().map(|x| (x - lo) / span).collect()
}

fn base_height<R: Rng>(rng: &mut R, family: Family, h: usize, w: usize) -> Vec<f64> {
    let warp = fbm(rng, h, w, 2, 3);
    let coords = (0..h).flat_map(|y| (0..w).map(move |x| (y as f64 / h as f64, x as f64 / w as f64)));
    match family {
        Family::Stripes => {
            let kx = rng.random_range(1..=3) as f64;
            let ky = rng.random_range(0..=2) as f64;
            coords
                .zip(&warp)
                .map(|((y, x), n)| 0.5 + 0.5 * (TAU * (kx * x + ky * y) + 2.0 * n).sin())
                .collect()
        }
        Family::Cells => {
            let pts: Vec<(f64, f64)> = (0..rng.random_range(4..=9)).map(|_| (rng.random(), rng.random())).collect();
            let wrap = |d: f64| {
                let d = d.abs();
                d.min(1.0 - d)
            };
            normalize(
                coords
                    .map(|(y, x)| {
                        pts.iter().map(|&(py, px)| wrap(y - py).hypot(wrap(x - px))).fold(f64::INFINITY, f64::min)
                    })
                    .collect(),
            )
        }
        Family::Noise => {
            let cells = rng.random_range(2..=4);
            fbm(rng, h, w, cells, 4)
        }
        Family::Checker => {
            let k = rng.random_range(2..=4) as f64;
            coords
                .zip(&warp)
                .map(|((y, x), n)| 0.5 + 0.5 * (3.0 * (TAU * k * x).sin() * (TAU * k * y).sin() + 0.8 * (n - 0.5)).tanh())
                .collect()
        }
    }
}

/// Encoded normal map of a height field, from circular central differences.
/// Height is measured in units of `W / 8` pixels.
pub fn normals_from_height(height: &Tensor) -> Tensor {
    let (h, w) = (height.shape()[0], height.shape()[1]);
    let s = w as f64 / 8.0;
    let hd = height.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let gx = (hd[y * w + (x + 1) % w] - hd[y * w + (x + w - 1) % w]) / 2.0;
            let gy = (hd[((y + 1) % h) * w + x] - hd[((y + h - 1) % h) * w + x]) / 2.0;
            let n = [-s * gx, -s * gy, 1.0];
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.extend(n.iter().map(|v| (v / len + 1.0) / 2.0));
        }
    }
    Tensor::new(&[h, w, 3], out).expect("positive dims")
}

/// Item `index` of the dataset identified by `seed`.
pub fn synth_item(seed: u64, index: usize, h: usize, w: usize) -> SynthItem {
    let mut rng = item_rng(seed, index);
    let family = Family::ALL[index % Family::ALL.len()];
    let base = base_height(&mut rng, family, h, w);
    let detail = fbm(&mut rng, h, w, 4, 3);
    let height: Vec<f64> = normalize(base.iter().zip(&detail).map(|(b, d)| 0.85 * b + 0.15 * d).collect());

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let (r_lo, r_hi) = (rng.random_range(0.1..0.4), rng.random_range(0.6..0.95));
    let metal = rng.random_range(0.0..1.0);

    let height = Tensor::new(&[h, w], height).expect("positive dims");
    let basecolor = Tensor::from_fn(&[h, w, 3], |i| {
        let t = height.get(&[i[0], i[1]]);
        c0[i[2]] + (c1[i[2]] - c0[i[2]]) * t
    });
    let roughness = height.map(|t| r_lo + (r_hi - r_lo) * (1.0 - t));
    let metallic = height.map(|t| metal * t * t);
    let normal = normals_from_height(&height);
    SynthItem { index, family, material: MaterialSet { basecolor, normal, roughness, metallic, height } }
}

pub fn synth_dataset(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<SynthItem>> {
    if count == 0 || h < 2 || w < 2 {
        return Err(HimatError::InvalidConfig(format!("dataset needs count >= 1 and H, W >= 2 (got {count}, {h}x{w})")));
    }
    Ok((0..count).into_par_iter().map(|i| synth_item(seed, i, h, w)).collect())
}

/// Packs items to `[N, 3, H, W, 3]`.
pub fn packed_batch(items: &[SynthItem]) -> Result<Tensor> {
    let stacks = items.iter().map(|it| pack_maps(&it.material)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&stacks)
}
