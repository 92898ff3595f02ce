//! Flow-matching diffusion over map stacks.
//!
//! Latents are `[B, M, H, W, C]`. The forward process mixes data and
//! noise as `z_t = alpha(t) z0 + sigma(t) eps`, and the network predicts
//! the velocity `eps - z0`.

pub mod checkpoint;
pub mod model;
pub mod sample;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{HimatError, Result};
use crate::tensor::Tensor;
use crate::wavelet::{dwt_loss_graph, swt_loss_graph, BasisName, SubbandWeights, WaveletBasis};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use model::{DitBlock, DitModel, DitParams, ModelConfig};
pub use sample::{decompose, roll_latent, sample, sample_from, SamplerConfig};
pub use train::{train_step, Batch, Trainer};

/// Noise schedule. Only the rectified-flow path is provided:
/// `alpha(t) = 1 - t`, `sigma(t) = t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    RectifiedFlow,
}

impl Schedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            Schedule::RectifiedFlow => 1.0 - t,
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            Schedule::RectifiedFlow => t,
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(HimatError::TOutOfRange(t));
    }
    Ok(())
}

/// `alpha(t) z0 + sigma(t) eps` for a single time shared by the whole tensor.
pub fn add_noise(z0: &Tensor, t: f64, eps: &Tensor, s: Schedule) -> Result<Tensor> {
    check_t(t)?;
    let (a, b) = (s.alpha(t), s.sigma(t));
    z0.zip_with(eps, |x, e| a * x + b * e)
}

/// Per-item times for a batch `[B, ...]`.
pub fn add_noise_batch(z0: &Tensor, t: &[f64], eps: &Tensor, s: Schedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
        return Err(HimatError::shape("add_noise", format!("z0 {:?}, eps {:?}, {} times", z0.shape(), eps.shape(), t.len())));
    }
    let per = z0.numel() / t.len();
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &ti) in t.iter().enumerate() {
        check_t(ti)?;
        let (a, b) = (s.alpha(ti), s.sigma(ti));
        let r = i * per..(i + 1) * per;
        out.extend(z0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(z0.shape(), out)
}

/// `eps - z0`.
pub fn velocity_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(z0)
}

/// Conditioning vocabulary role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Prompt,
    Instruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionToken {
    pub id: usize,
    pub role: TokenRole,
}

impl ConditionToken {
    pub fn prompt(id: usize) -> Self {
        ConditionToken { id, role: TokenRole::Prompt }
    }

    pub fn instruction(kind: Instruction) -> Self {
        ConditionToken { id: kind as usize, role: TokenRole::Instruction }
    }

    pub fn check(&self, vocab: usize) -> Result<()> {
        if self.id >= vocab {
            return Err(HimatError::TokenOutOfVocab { id: self.id, vocab });
        }
        Ok(())
    }
}

/// Target layer for intrinsic decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instruction {
    Albedo = 0,
    Normal = 1,
    Irradiance = 2,
}

impl std::str::FromStr for Instruction {
    type Err = HimatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "albedo" => Ok(Instruction::Albedo),
            "normal" => Ok(Instruction::Normal),
            "irradiance" => Ok(Instruction::Irradiance),
            _ => Err(HimatError::InvalidConfig(format!("unknown instruction {s:?}"))),
        }
    }
}

/// Per-batch conditioning: one token per item and, for models built for
/// it, a condition latent concatenated channel-wise with the noisy input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conditioning {
    pub tokens: Vec<usize>,
    pub latent: Option<Tensor>,
}

impl Conditioning {
    pub fn tokens(tokens: Vec<usize>) -> Self {
        Conditioning { tokens, latent: None }
    }

    pub fn with_latent(tokens: Vec<usize>, latent: Tensor) -> Self {
        Conditioning { tokens, latent: Some(latent) }
    }

    /// Same conditioning with its latent circularly shifted.
    pub(crate) fn rolled(&self, dy: isize, dx: isize) -> Conditioning {
        Conditioning { tokens: self.tokens.clone(), latent: self.latent.as_ref().map(|l| roll_latent(l, dy, dx)) }
    }
}

/// Anything that predicts a velocity for `z_t` of shape `[B, M, H, W, C]`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Dwt,
    Swt,
}

impl std::str::FromStr for LossKind {
    type Err = HimatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "dwt" => Ok(LossKind::Dwt),
            "swt" => Ok(LossKind::Swt),
            _ => Err(HimatError::InvalidConfig(format!("unknown loss kind {s:?}"))),
        }
    }
}

/// Velocity supervision. `Mse` averages over all elements; the wavelet
/// losses sum over maps, channels and pixels and average over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub basis: BasisName,
    pub dwt_lambda: f64,
    pub weights: SubbandWeights,
    pub swt_levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Mse,
            basis: BasisName::Sym19,
            dwt_lambda: 1.0,
            weights: SubbandWeights::default(),
            swt_levels: 1,
        }
    }
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        LossConfig { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.dwt_lambda.is_finite() && self.dwt_lambda >= 0.0) || self.swt_levels == 0 {
            return Err(HimatError::InvalidConfig(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

pub fn velocity_loss_graph(g: &mut Graph, pred: Var, target: Var, cfg: &LossConfig, basis: &WaveletBasis) -> Result<Var> {
    match cfg.kind {
        LossKind::Mse => {
            let d = g.sub(pred, target)?;
            let n = g.value(d).numel();
            let s = g.sum_squares(d)?;
            g.scale(s, 1.0 / n as f64)
        }
        LossKind::Dwt => dwt_loss_graph(g, pred, target, cfg.dwt_lambda, basis),
        LossKind::Swt => swt_loss_graph(g, pred, target, &cfg.weights, basis, cfg.swt_levels),
    }
}

pub fn velocity_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let basis = WaveletBasis::new(cfg.basis);
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = velocity_loss_graph(&mut g, p, t, cfg, &basis)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(&[3, 4, 4, 2], &mut r), Tensor::randn(&[3, 4, 4, 2], &mut r))
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::RectifiedFlow;
        assert_eq!((s.alpha(0.0), s.sigma(0.0), s.alpha(1.0), s.sigma(1.0)), (1.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn add_noise_cases() {
        let (z0, eps) = pair(1);
        let s = Schedule::RectifiedFlow;
        assert_eq!(add_noise(&z0, 0.0, &eps, s).unwrap(), z0);
        assert_eq!(add_noise(&z0, 1.0, &eps, s).unwrap(), eps);
        let half = add_noise(&z0, 0.5, &eps, s).unwrap();
        for k in 0..z0.numel() {
            assert_eq!(half.data()[k], 0.5 * z0.data()[k] + 0.5 * eps.data()[k]);
        }
        assert!(matches!(add_noise(&z0, 1.5, &eps, s), Err(HimatError::TOutOfRange(_))));
        assert!(matches!(add_noise(&z0, f64::NAN, &eps, s), Err(HimatError::TOutOfRange(_))));
    }

    #[test]
    fn velocity_target_cases() {
        let (z0, eps) = pair(2);
        assert_eq!(velocity_target(&Tensor::zeros(z0.shape()), &eps).unwrap(), eps);
        assert_eq!(velocity_target(&z0, &z0).unwrap(), Tensor::zeros(z0.shape()));
        let v = velocity_target(&z0, &eps).unwrap();
        for k in 0..z0.numel() {
            assert_eq!(v.data()[k], eps.data()[k] - z0.data()[k]);
        }
        assert!(velocity_target(&z0, &Tensor::zeros(&[3, 4, 4, 1])).is_err());
    }

    #[test]
    fn loss_of_exact_prediction_is_zero() {
        let (z0, eps) = pair(3);
        let v = velocity_target(&z0, &eps).unwrap();
        for kind in [LossKind::Mse, LossKind::Dwt, LossKind::Swt] {
            assert_eq!(velocity_loss(&v, &v, &LossConfig::of_kind(kind)).unwrap(), 0.0);
        }
    }

    #[test]
    fn mse_of_constant_stub() {
        let (z0, eps) = pair(4);
        let v = velocity_target(&z0, &eps).unwrap();
        let stub = Tensor::full(v.shape(), 0.25);
        let want = v.data().iter().map(|x| (0.25 - x).powi(2)).sum::<f64>() / v.numel() as f64;
        let got = velocity_loss(&stub, &v, &LossConfig::of_kind(LossKind::Mse)).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn token_vocab_check() {
        assert!(ConditionToken::prompt(3).check(4).is_ok());
        assert!(matches!(ConditionToken::prompt(4).check(4), Err(HimatError::TokenOutOfVocab { id: 4, vocab: 4 })));
        assert_eq!(ConditionToken::instruction(Instruction::Irradiance).id, 2);
    }
}
