use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{dit_forward_graph, MapMode};
use super::{add_noise_batch, velocity_loss_graph, velocity_target, Conditioning, DitModel, LossConfig, Schedule};
use crate::autograd::{Graph, Var};
use crate::error::{HimatError, Result};
use crate::optim::{grads_in_order, Adam, AdamConfig};
use crate::params::bind;
use crate::tensor::Tensor;
use crate::wavelet::WaveletBasis;

/// Clean latents `[B, M, H, W, C]` with their conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub z0: Tensor,
    pub cond: Conditioning,
}

impl Batch {
    pub fn new(z0: Tensor, cond: Conditioning) -> Result<Self> {
        let b = z0.shape().first().copied().unwrap_or(0);
        if z0.rank() != 5 || cond.tokens.len() != b {
            return Err(HimatError::shape("batch", format!("latent {:?} with {} tokens", z0.shape(), cond.tokens.len())));
        }
        if let Some(l) = &cond.latent {
            if l.shape() != z0.shape() {
                return Err(HimatError::shape("batch", format!("condition {:?} vs latent {:?}", l.shape(), z0.shape())));
            }
        }
        Ok(Batch { z0, cond })
    }

    /// Draws `size` items with replacement from `latents: [N, M, H, W, C]`.
    pub fn sample<R: Rng + ?Sized>(
        latents: &Tensor,
        tokens: &[usize],
        cond_latents: Option<&Tensor>,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = latents.shape()[0];
        if tokens.len() != n || n == 0 {
            return Err(HimatError::shape("batch", format!("{n} latents with {} tokens", tokens.len())));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
        let pick = |t: &Tensor| Tensor::stack(&idx.iter().map(|&i| t.index_first(i)).collect::<Vec<_>>());
        let cond = Conditioning {
            tokens: idx.iter().map(|&i| tokens[i]).collect(),
            latent: cond_latents.map(pick).transpose()?,
        };
        Batch::new(pick(latents)?, cond)
    }
}

/// Everything a step draws at random.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub zt: Tensor,
    pub target: Tensor,
}

/// `t ~ U[0, 1)` per item, `eps ~ N(0, I)`.
pub fn draw_noise<R: Rng + ?Sized>(z0: &Tensor, s: Schedule, rng: &mut R) -> Result<NoiseDraw> {
    let t: Vec<f64> = (0..z0.shape()[0]).map(|_| rng.random::<f64>()).collect();
    let eps = Tensor::randn(z0.shape(), rng);
    let zt = add_noise_batch(z0, &t, &eps, s)?;
    let target = velocity_target(z0, &eps)?;
    Ok(NoiseDraw { t, eps, zt, target })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepOptions {
    pub schedule: Schedule,
    pub loss: LossConfig,
    /// Keep CrossStitch at its current value (zero after init).
    pub freeze_crossstitch: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { schedule: Schedule::RectifiedFlow, loss: LossConfig::default(), freeze_crossstitch: false }
    }
}

/// Builds the loss graph for one draw given any prediction function.
pub fn draw_loss_graph<F>(g: &mut Graph, draw: &NoiseDraw, cond: &Conditioning, loss: &LossConfig, basis: &WaveletBasis, predict: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, &[f64], &Conditioning) -> Result<Var>,
{
    let zt = g.constant(draw.zt.clone());
    let pred = predict(g, zt, &draw.t, cond)?;
    let target = g.constant(draw.target.clone());
    velocity_loss_graph(g, pred, target, loss, basis)
}

fn as_nan_loss(step: usize) -> impl Fn(HimatError) -> HimatError {
    move |e| match e {
        HimatError::NonFinite { op } => HimatError::NaNLoss { step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// One optimizer update. Returns the loss before the update.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut DitModel,
    opt: &mut Adam,
    batch: &Batch,
    opts: &StepOptions,
    basis: &WaveletBasis,
    rng: &mut R,
    step: usize,
) -> Result<f64> {
    let draw = draw_noise(&batch.z0, opts.schedule, rng)?;
    let mut g = Graph::new();
    let freeze = opts.freeze_crossstitch;
    let p = bind(&model.params, &mut g, &|name| !(freeze && name.contains(".cs.")));
    let cfg = &model.config;
    let loss = draw_loss_graph(&mut g, &draw, &batch.cond, &opts.loss, basis, |g, zt, t, cond| {
        let cz = cond.latent.as_ref().map(|l| g.constant(l.clone()));
        dit_forward_graph(g, cfg, &p, zt, t, &cond.tokens, cz, MapMode::Joint)
    })
    .map_err(as_nan_loss(step))?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(HimatError::NaNLoss { step, detail: format!("loss = {value}") });
    }
    let grads = g.backward(loss).map_err(as_nan_loss(step))?;
    opt.update(&mut model.params, &grads_in_order(&p, &grads));
    Ok(value)
}

/// Moving average with the given window; shorter than the input by `window - 1`.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}

/// Training loop state. Seeded, single-threaded and deterministic.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DitModel,
    pub opt: Adam,
    pub opts: StepOptions,
    basis: WaveletBasis,
    rng: ChaCha8Rng,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: DitModel, adam: AdamConfig, opts: StepOptions, seed: u64) -> Result<Self> {
        opts.loss.validate()?;
        let basis = WaveletBasis::new(opts.loss.basis);
        Ok(Trainer { model, opt: Adam::new(adam), opts, basis, rng: ChaCha8Rng::seed_from_u64(seed), step: 0, losses: Vec::new() })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let l = train_step(&mut self.model, &mut self.opt, batch, &self.opts, &self.basis, &mut self.rng, self.step)?;
        self.step += 1;
        self.losses.push(l);
        Ok(l)
    }

    /// `steps` updates on minibatches drawn from `latents: [N, M, H, W, C]`.
    pub fn fit(&mut self, latents: &Tensor, tokens: &[usize], cond_latents: Option<&Tensor>, steps: usize, batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = Batch::sample(latents, tokens, cond_latents, batch_size, &mut self.rng)?;
            out.push(self.step(&batch)?);
        }
        Ok(out)
    }

    /// Mean velocity loss on `latents` with noise from `seed`; no update.
    pub fn evaluate(&self, latents: &Tensor, tokens: &[usize], cond_latents: Option<&Tensor>, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = Batch::new(latents.clone(), Conditioning { tokens: tokens.to_vec(), latent: cond_latents.cloned() })?;
        let draw = draw_noise(&batch.z0, self.opts.schedule, &mut rng)?;
        let pred = self.model.forward(&draw.zt, &draw.t, &batch.cond)?;
        super::velocity_loss(&pred, &draw.target, &self.opts.loss)
    }
}
