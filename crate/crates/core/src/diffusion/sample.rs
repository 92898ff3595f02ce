use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditionToken, Conditioning, DitModel, Schedule, VelocityField};
use crate::error::{HimatError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Recorded for the manifest; the Euler update assumes rectified flow.
    pub schedule: Schedule,
    /// Shift latents by a random offset around every model call.
    pub noise_rolling: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 20, schedule: Schedule::RectifiedFlow, noise_rolling: false, seed: 0 }
    }
}

/// Circular shift of the two spatial axes of `[.., H, W, C]`.
pub fn roll_latent(z: &Tensor, dy: isize, dx: isize) -> Tensor {
    let r = z.rank();
    assert!(r >= 3, "roll_latent expects [.., H, W, C], got {:?}", z.shape());
    z.roll(r - 3, dy).roll(r - 2, dx)
}

/// Euler integration of the velocity field from pure noise `z1` at `t = 1` down to `t = 0`.
pub fn sample_from<V: VelocityField + ?Sized>(model: &V, z1: &Tensor, cond: &Conditioning, cfg: &SamplerConfig) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(HimatError::InvalidConfig("sampler needs at least one step".into()));
    }
    let b = if z1.rank() == 5 { z1.shape()[0] } else { 1 };
    let r = z1.rank();
    let (h, w) = (z1.shape()[r - 3] as i64, z1.shape()[r - 2] as i64);
    // Offsets use their own stream so they never alias the initial noise.
    let mut offsets = ChaCha8Rng::seed_from_u64(cfg.seed);
    offsets.set_stream(1);
    let dt = 1.0 / cfg.steps as f64;
    let mut z = z1.clone();
    for k in 0..cfg.steps {
        let t = 1.0 - k as f64 * dt;
        let times = vec![t; b];
        let v = if cfg.noise_rolling {
            let (dy, dx) = (offsets.random_range(0..h) as isize, offsets.random_range(0..w) as isize);
            let v = model.velocity(&roll_latent(&z, dy, dx), &times, &cond.rolled(dy, dx))?;
            roll_latent(&v, -dy, -dx)
        } else {
            model.velocity(&z, &times, cond)?
        };
        z = z.zip_with(&v, |a, b| a - dt * b)?;
    }
    Ok(z)
}

/// Draws `z1 ~ N(0, I)` of the given shape from `cfg.seed` and integrates.
pub fn sample<V: VelocityField + ?Sized>(model: &V, shape: &[usize], cond: &Conditioning, cfg: &SamplerConfig) -> Result<Tensor> {
    let z1 = Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    sample_from(model, &z1, cond, cfg)
}

/// Generates the map stack selected by `instruction` from an image latent
/// `[M, H, W, C]` (or batched), which is concatenated with the noisy input
/// at every step.
pub fn decompose(model: &DitModel, input_latent: &Tensor, instruction: ConditionToken, cfg: &SamplerConfig) -> Result<Tensor> {
    if !model.config.conditional {
        return Err(HimatError::shape("decompose", format!("model takes {} input channels, not condition ‖ noisy", model.config.input_channels())));
    }
    instruction.check(model.config.cond_vocab)?;
    let b = if input_latent.rank() == 5 { input_latent.shape()[0] } else { 1 };
    let cond = Conditioning::with_latent(vec![instruction.id; b], input_latent.clone());
    sample(model, input_latent.shape(), &cond, cfg)
}
