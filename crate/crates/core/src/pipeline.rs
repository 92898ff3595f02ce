//! End-to-end plumbing: synthetic data, codec fitting, latent datasets and
//! progressive training. Shared by the CLI and the integration tests.

use serde::{Deserialize, Serialize};

use crate::config::{CodecConfig, RunConfig, Stage, Task};
use crate::diffusion::train::{StepOptions, Trainer};
use crate::diffusion::{DitModel, Instruction};
use crate::error::{HimatError, Result};
use crate::material::synth::{packed_batch, synth_item, SynthItem};
use crate::material::{intrinsic_stack, render, replicate_image, CodecMode, ToyCodec};
use crate::tensor::Tensor;

/// Latents `[N, M, h, w, C]` with one token per item and optional condition latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub latents: Tensor,
    pub tokens: Vec<usize>,
    pub cond: Option<Tensor>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Pixel-space training pairs before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    /// `[N, 3, H, W, 3]`
    pub targets: Tensor,
    /// Photo replicated over the map axis, `[N, 3, H, W, 3]`.
    pub cond: Option<Tensor>,
    pub tokens: Vec<usize>,
}

/// Items `start..start + count` of the seeded synthetic dataset.
pub fn synth_items(seed: u64, start: usize, count: usize, size: usize) -> Vec<SynthItem> {
    use rayon::prelude::*;
    (start..start + count).into_par_iter().map(|i| synth_item(seed, i, size, size)).collect()
}

/// Generation: packed material stacks with their family prompt. Decomposition:
/// intrinsic stacks conditioned on the rendered photo, instructions cycled
/// over the items.
pub fn image_set(task: Task, items: &[SynthItem]) -> Result<ImageSet> {
    if items.is_empty() {
        return Err(HimatError::InvalidConfig("empty item list".into()));
    }
    match task {
        Task::Generate => Ok(ImageSet { targets: packed_batch(items)?, cond: None, tokens: items.iter().map(|i| i.prompt_id()).collect() }),
        Task::Decompose => {
            let targets = items.iter().map(|i| intrinsic_stack(&i.material)).collect::<Result<Vec<_>>>()?;
            let photos = items.iter().map(|i| replicate_image(&render(&i.material))).collect::<Result<Vec<_>>>()?;
            let instr = [Instruction::Albedo, Instruction::Normal, Instruction::Irradiance];
            Ok(ImageSet {
                targets: Tensor::stack(&targets)?,
                cond: Some(Tensor::stack(&photos)?),
                tokens: items.iter().map(|i| instr[i.index % instr.len()] as usize).collect(),
            })
        }
    }
}

/// Builds the codec described by `cfg`, fitting lossy weights on `data`
/// and calibrating latents to unit RMS.
pub fn fit_codec(cfg: &CodecConfig, data: &Tensor) -> Result<(ToyCodec, Vec<f64>)> {
    match cfg.mode {
        CodecMode::Lossless => Ok((ToyCodec::lossless(cfg.factor, cfg.seed), Vec::new())),
        CodecMode::Lossy => {
            let mut c = ToyCodec::lossy_init(cfg.factor, cfg.channels, cfg.seed)?;
            let losses = c.train(data, cfg.train_steps, cfg.batch, cfg.lr, cfg.seed)?;
            c.calibrate_scale(data)?;
            Ok((c, losses))
        }
    }
}

pub fn encode_set(codec: &ToyCodec, images: &ImageSet) -> Result<LatentSet> {
    Ok(LatentSet {
        latents: codec.encode(&images.targets)?,
        tokens: images.tokens.clone(),
        cond: images.cond.as_ref().map(|c| codec.encode(c)).transpose()?,
    })
}

/// Codec fitting data: targets plus, for decomposition, the photos.
fn codec_data(images: &ImageSet) -> Result<Tensor> {
    let mut all: Vec<Tensor> = (0..images.tokens.len()).map(|i| images.targets.index_first(i)).collect();
    if let Some(c) = &images.cond {
        all.extend((0..images.tokens.len()).map(|i| c.index_first(i)));
    }
    Tensor::stack(&all)
}

/// Training and validation latents for one stage.
pub fn stage_data(cfg: &RunConfig, stage: &Stage, codec: &ToyCodec) -> Result<(LatentSet, LatentSet)> {
    let size = cfg.image_size(stage);
    let d = &cfg.dataset;
    let train = image_set(cfg.task, &synth_items(d.seed, 0, d.size, size))?;
    let val = if d.validation > 0 {
        encode_set(codec, &image_set(cfg.task, &synth_items(d.seed, d.size, d.validation, size))?)?
    } else {
        LatentSet { latents: Tensor::zeros(&[0]), tokens: Vec::new(), cond: None }
    };
    Ok((encode_set(codec, &train)?, val))
}

/// Codec fitted on the first stage's training images.
pub fn codec_for(cfg: &RunConfig) -> Result<(ToyCodec, Vec<f64>)> {
    let stage = cfg.stages.first().ok_or_else(|| HimatError::InvalidConfig("no stages".into()))?;
    let images = image_set(cfg.task, &synth_items(cfg.dataset.seed, 0, cfg.dataset.size, cfg.image_size(stage)))?;
    fit_codec(&cfg.codec, &codec_data(&images)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub latent: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub last_smoothed_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DitModel,
    pub codec: ToyCodec,
    pub codec_losses: Vec<f64>,
    pub losses: Vec<f64>,
    pub stages: Vec<StageReport>,
}

/// Window of the moving average used in reports.
pub const SMOOTHING_WINDOW: usize = 20;

/// Progressive training: one codec, one model, stages in order.
pub fn train_run(cfg: &RunConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (codec, codec_losses) = codec_for(cfg)?;
    let last = cfg.stages.last().expect("validated");
    let model_cfg = crate::diffusion::ModelConfig { latent_height: last.latent, latent_width: last.latent, ..cfg.model.clone() };
    let model = DitModel::new(model_cfg, seed)?;
    let opts = StepOptions { schedule: cfg.schedule, loss: cfg.loss.clone(), freeze_crossstitch: cfg.freeze_crossstitch };
    let mut tr = Trainer::new(model, cfg.optimizer, opts, seed.wrapping_add(1))?;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for st in &cfg.stages {
        let (train, val) = stage_data(cfg, st, &codec)?;
        log::info!("stage latent {} for {} steps on {} items", st.latent, st.steps, train.len());
        let losses = tr.fit(&train.latents, &train.tokens, train.cond.as_ref(), st.steps, cfg.batch_size)?;
        let val_loss = if val.is_empty() { None } else { Some(tr.evaluate(&val.latents, &val.tokens, val.cond.as_ref(), seed)?) };
        let sm = crate::diffusion::train::smoothed(&losses, SMOOTHING_WINDOW.min(losses.len()));
        stages.push(StageReport {
            latent: st.latent,
            steps: st.steps,
            first_loss: losses.first().copied().unwrap_or(f64::NAN),
            last_smoothed_loss: sm.last().copied().unwrap_or(f64::NAN),
            val_loss,
        });
    }
    Ok(TrainOutcome { losses: tr.losses.clone(), model: tr.model, codec, codec_losses, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;
    use crate::diffusion::ModelConfig;
    use crate::material::PACKED_MAPS;

    fn tiny(task: Task) -> RunConfig {
        let lossless = CodecConfig { mode: CodecMode::Lossless, factor: 2, ..Default::default() };
        RunConfig {
            task,
            model: ModelConfig { n_blocks: 1, channels: 8, latent_channels: 12, conditional: task == Task::Decompose, ..Default::default() },
            codec: lossless,
            dataset: DatasetConfig { seed: 3, size: 4, validation: 2 },
            stages: vec![Stage { latent: 4, steps: 2 }, Stage { latent: 8, steps: 1 }],
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn decomposition_pairs_share_geometry() {
        let items = synth_items(1, 0, 3, 8);
        let s = image_set(Task::Decompose, &items).unwrap();
        assert_eq!(s.targets.shape(), [3, PACKED_MAPS, 8, 8, 3]);
        assert_eq!(s.tokens, [0, 1, 2]);
        let photo = s.cond.unwrap();
        // photo = albedo * irradiance channel-wise
        for idx in [[0, 0, 1, 2, 0], [2, 1, 5, 3, 2]] {
            let (n, y, x, c) = (idx[0], idx[2], idx[3], idx[4]);
            let want = s.targets.get(&[n, 0, y, x, c]) * s.targets.get(&[n, 2, y, x, c]);
            assert!((photo.get(&[n, idx[1], y, x, c]) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn items_are_keyed_by_index() {
        let a = synth_items(5, 0, 6, 8);
        let b = synth_items(5, 4, 2, 8);
        assert_eq!(a[4], b[0]);
    }

    #[test]
    fn progressive_run_changes_resolution() {
        for task in [Task::Generate, Task::Decompose] {
            let cfg = tiny(task);
            let out = train_run(&cfg, 0).unwrap();
            assert_eq!(out.losses.len(), 3);
            assert_eq!(out.stages.iter().map(|s| s.latent).collect::<Vec<_>>(), [4, 8]);
            assert!(out.stages.iter().all(|s| s.val_loss.unwrap().is_finite()));
            assert_eq!(out.model.config.latent_height, 8);
            let again = train_run(&cfg, 0).unwrap();
            assert_eq!(again.losses, out.losses);
        }
    }
}
