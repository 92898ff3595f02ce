//! Linear space-to-depth codec used as the latent autoencoder.
//!
//! Each map is mapped to `[-1, 1]`, cut into `f x f` patches, and every
//! flattened patch (`3 f^2` values, ordered `(dy, dx, channel)`) is
//! projected to `C` latent channels. Decoding applies the transpose
//! projection and the inverse rearrangement.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{HimatError, Result};
use crate::optim::{grads_in_order, Adam, AdamConfig};
use crate::params::{bind, join, normal, ParamTree};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Lossless,
    Lossy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecWeights<T = Tensor> {
    /// `[3 f^2, C]`
    pub enc: T,
    /// `[C, 3 f^2]`
    pub dec: T,
}

impl<T> ParamTree<T> for CodecWeights<T> {
    type With<U> = CodecWeights<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> CodecWeights<U> {
        CodecWeights { enc: f(&join(prefix, "enc"), &self.enc), dec: f(&join(prefix, "dec"), &self.dec) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "enc"), &mut self.enc);
        f(&join(prefix, "dec"), &mut self.dec);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub factor: usize,
    pub channels: usize,
    pub mode: CodecMode,
    /// Multiplier applied to latents after projection.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec {
    pub spec: CodecSpec,
    pub weights: CodecWeights,
}

/// Random `n x n` orthogonal matrix by Gram-Schmidt on Gaussian rows.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    random_orthonormal_rows(n, n, rng)
}

/// `k x n` matrix with orthonormal rows, `k <= n`.
pub fn random_orthonormal_rows<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Tensor {
    assert!(k <= n, "cannot fit {k} orthonormal rows in dimension {n}");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = normal(&[n], 1.0, rng).into_data();
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::new(&[k, n], rows.concat()).expect("k, n > 0")
}

impl ToyCodec {
    /// Orthogonal codec with `C = 3 f^2`; decoding inverts encoding exactly
    /// up to rounding.
    pub fn lossless(factor: usize, seed: u64) -> Self {
        let d = 3 * factor * factor;
        let q = random_orthogonal(d, &mut ChaCha8Rng::seed_from_u64(seed));
        ToyCodec {
            spec: CodecSpec { factor, channels: d, mode: CodecMode::Lossless, scale: 1.0 },
            weights: CodecWeights { dec: q.transpose().expect("rank 2"), enc: q },
        }
    }

    /// Untrained lossy codec: a random orthonormal projection to `channels` dims.
    pub fn lossy_init(factor: usize, channels: usize, seed: u64) -> Result<Self> {
        let d = 3 * factor * factor;
        if channels == 0 || channels > d {
            return Err(HimatError::InvalidConfig(format!("lossy codec needs 1..={d} channels, got {channels}")));
        }
        let dec = random_orthonormal_rows(channels, d, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(ToyCodec {
            spec: CodecSpec { factor, channels, mode: CodecMode::Lossy, scale: 1.0 },
            weights: CodecWeights { enc: dec.transpose().expect("rank 2"), dec },
        })
    }

    pub fn factor(&self) -> usize {
        self.spec.factor
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.spec.factor * self.spec.factor
    }

    /// `[.., M, H, W, 3]` in `[0, 1]` to `[.., M, H/f, W/f, C]`.
    pub fn encode(&self, packed: &Tensor) -> Result<Tensor> {
        let patches = space_to_depth(&packed.map(|v| 2.0 * v - 1.0), self.spec.factor)?;
        let z = project(&patches, &self.weights.enc)?;
        Ok(z.scale(self.spec.scale))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let c = *z.shape().last().unwrap_or(&0);
        if c != self.spec.channels {
            return Err(HimatError::shape("decode", format!("latent has {c} channels, codec {}", self.spec.channels)));
        }
        let patches = project(&z.scale(1.0 / self.spec.scale), &self.weights.dec)?;
        Ok(depth_to_space(&patches, self.spec.factor)?.map(|v| (v + 1.0) / 2.0))
    }

    /// Reconstruction training on `[N, M, H, W, 3]` stacks with Adam.
    /// Returns the per-step reconstruction MSE.
    pub fn train(&mut self, data: &Tensor, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let patches = space_to_depth(&data.map(|v| 2.0 * v - 1.0), self.spec.factor)?;
        let d = self.patch_dim();
        let rows = patches.numel() / d;
        let flat = patches.reshape(&[rows, d])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(AdamConfig { lr, ..Default::default() });
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch.min(rows)).map(|_| rng.random_range(0..rows)).collect();
            let x = Tensor::new(&[idx.len(), d], idx.iter().flat_map(|&i| flat.data()[i * d..(i + 1) * d].to_vec()).collect())?;
            let mut g = Graph::new();
            let w = bind(&self.weights, &mut g, &|_| true);
            let xv = g.constant(x);
            let z = g.matmul(xv, w.enc)?;
            let y = g.matmul(z, w.dec)?;
            let e = g.sub(y, xv)?;
            let l = g.sum_squares(e)?;
            let l = g.scale(l, 1.0 / (idx.len() * d) as f64)?;
            losses.push(g.value(l).item());
            let grads = g.backward(l)?;
            opt.update(&mut self.weights, &grads_in_order(&w, &grads));
        }
        Ok(losses)
    }

    /// Sets the latent multiplier so that encoded `data` has unit RMS.
    pub fn calibrate_scale(&mut self, data: &Tensor) -> Result<f64> {
        self.spec.scale = 1.0;
        let z = self.encode(data)?;
        let rms = (z.sum_squares() / z.numel() as f64).sqrt();
        self.spec.scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        Ok(self.spec.scale)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.weights.enc.write_himt(dir.join("enc.himt"), DType::F64)?;
        self.weights.dec.write_himt(dir.join("dec.himt"), DType::F64)?;
        std::fs::write(dir.join("codec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: CodecSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("codec.json"))?)?;
        let weights = CodecWeights { enc: Tensor::read_himt(dir.join("enc.himt"))?, dec: Tensor::read_himt(dir.join("dec.himt"))? };
        let d = 3 * spec.factor * spec.factor;
        if weights.enc.shape() != [d, spec.channels] || weights.dec.shape() != [spec.channels, d] {
            return Err(HimatError::Format(format!("codec weights do not match {spec:?}")));
        }
        Ok(ToyCodec { spec, weights })
    }
}

fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let d = *s.last().expect("non-empty");
    let rows = x.numel() / d;
    let y = x.reshape(&[rows, d])?.matmul(w)?;
    let mut out = s;
    *out.last_mut().unwrap() = w.shape()[1];
    y.reshape(&out)
}

/// `[.., H, W, K]` to `[.., H/f, W/f, f*f*K]`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() < 3 {
        return Err(HimatError::shape("space_to_depth", format!("{s:?}")));
    }
    let r = s.len();
    let (h, w, k) = (s[r - 3], s[r - 2], s[r - 1]);
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(HimatError::IndivisibleDims { height: h, width: w, factor: f });
    }
    let lead: usize = s[..r - 3].iter().product();
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for b in 0..lead {
        for i in 0..ho {
            for j in 0..wo {
                for dy in 0..f {
                    for dx in 0..f {
                        let src = ((b * h + i * f + dy) * w + j * f + dx) * k;
                        let dst = ((b * ho + i) * wo + j) * f * f * k + (dy * f + dx) * k;
                        out[dst..dst + k].copy_from_slice(&xd[src..src + k]);
                    }
                }
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend([ho, wo, f * f * k]);
    Tensor::new(&shape, out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let r = s.len();
    if r < 3 || f == 0 || s[r - 1] % (f * f) != 0 {
        return Err(HimatError::shape("depth_to_space", format!("{s:?} with factor {f}")));
    }
    let (ho, wo, kk) = (s[r - 3], s[r - 2], s[r - 1]);
    let k = kk / (f * f);
    let (h, w) = (ho * f, wo * f);
    let lead: usize = s[..r - 3].iter().product();
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for b in 0..lead {
        for i in 0..ho {
            for j in 0..wo {
                for dy in 0..f {
                    for dx in 0..f {
                        let dst = ((b * h + i * f + dy) * w + j * f + dx) * k;
                        let src = ((b * ho + i) * wo + j) * kk + (dy * f + dx) * k;
                        out[dst..dst + k].copy_from_slice(&xd[src..src + k]);
                    }
                }
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend([h, w, k]);
    Tensor::new(&shape, out)
}
