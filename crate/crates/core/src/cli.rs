//! The `himat` command line. `run` parses argv, executes one subcommand and
//! returns the process exit code: 0 success, 2 config or usage error, 1
//! runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{BenchPlan, CostReport, TimingConfig, Variant};
use crate::config::{RunConfig, Task};
use crate::diffusion::{decompose, load_checkpoint, sample, save_checkpoint, ConditionToken, Conditioning, Instruction, LossKind};
use crate::error::{HimatError, Result};
use crate::material::io::{read_material_pngs, read_png_rgb, write_dataset, write_material_pngs, write_png, BitDepth};
use crate::material::{synth_dataset, unpack_maps, ToyCodec, PACKED_MAPS};
use crate::metrics::{cross_map_consistency, glcm_score, luminance, psnr, stack_consistency, GlcmConfig};
use crate::tensor::{DType, Tensor};
use crate::wavelet::{dwt2, load_basis, swt2, TransformKind};

#[derive(Debug, Parser)]
#[command(name = "himat", version, about = "Multi-map diffusion transformer toolkit")]
pub struct Cli {
    /// Append a machine-readable JSON error record to stderr on failure.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the synthetic dataset.
    Train(TrainArgs),
    /// Sample a material stack from a trained run.
    Generate(GenerateArgs),
    /// Split a photo into albedo, normal and irradiance.
    Decompose(DecomposeArgs),
    /// Analytic cost model and measured block timings.
    Bench(BenchArgs),
    /// Wavelet subbands of an image.
    Wavelet(WaveletArgs),
    /// Image metrics as JSON lines.
    Eval(EvalArgs),
    /// Write a synthetic material dataset.
    Dataset(DatasetArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub prompt_id: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Noise rolling, for seamlessly tiling textures.
    #[arg(long)]
    pub tileable: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent side length; defaults to the last training stage.
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG or HIMT `[H, W, 3]` image.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_instruction)]
    pub instruction: Instruction,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Attention,
    Linear,
    Crossstitch,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub variant: VariantArg,
    /// Tokens per map; each must be a perfect square.
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub trials: usize,
    /// Analytic costs only.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformArg {
    Dwt,
    Swt,
}

#[derive(Debug, Args, Serialize)]
pub struct WaveletArgs {
    /// PNG or HIMT `[H, W]` / `[H, W, C]` image.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "sym19")]
    pub basis: String,
    #[arg(long, value_enum, default_value = "swt")]
    pub transform: TransformArg,
    /// SWT levels; DWT is always one level.
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    /// Also write normalized PNG previews.
    #[arg(long)]
    pub png: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Psnr,
    Glcm,
    Consistency,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Images, HIMT stacks or material directories.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Reference for PSNR.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    #[arg(long, default_value_t = 16)]
    pub levels: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub sixteen_bit: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: HimatError| e.to_string())
}

fn parse_instruction(s: &str) -> std::result::Result<Instruction, String> {
    s.parse().map_err(|e: HimatError| e.to_string())
}

/// Written next to every command's artifacts.
#[derive(Debug, Serialize)]
pub struct CommandManifest<'a, A: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub args: &'a A,
    pub artifacts: Vec<String>,
    pub extra: serde_json::Value,
}

fn hash_json<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializable")))
}

fn write_manifest<A: Serialize>(out: &Path, m: &CommandManifest<A>) -> Result<()> {
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn exit_code(e: &HimatError) -> u8 {
    match e {
        HimatError::InvalidConfig(_) | HimatError::UnknownBasis(_) | HimatError::TokenOutOfVocab { .. } => 2,
        _ => 1,
    }
}

fn error_kind(e: &HimatError) -> &'static str {
    match e {
        HimatError::ShapeMismatch { .. } => "shape_mismatch",
        HimatError::NonFinite { .. } => "non_finite",
        HimatError::NonScalarLoss(_) => "non_scalar_loss",
        HimatError::TapeConsumed => "tape_consumed",
        HimatError::NonDeterministicFunction(_) => "non_deterministic_function",
        HimatError::UnknownBasis(_) => "unknown_basis",
        HimatError::OddDimensions(..) => "odd_dimensions",
        HimatError::TOutOfRange(_) => "t_out_of_range",
        HimatError::NaNLoss { .. } => "nan_loss",
        HimatError::IndivisibleDims { .. } => "indivisible_dims",
        HimatError::InsufficientPoints(_) => "insufficient_points",
        HimatError::TokenOutOfVocab { .. } => "token_out_of_vocab",
        HimatError::InvalidConfig(_) => "invalid_config",
        HimatError::Format(_) => "format",
        HimatError::Image(_) => "image",
        HimatError::Io(_) => "io",
        HimatError::Json(_) => "json",
    }
}

/// Caps rayon's pool at `HIMAT_THREADS` when set.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HIMAT_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| HimatError::InvalidConfig(format!("HIMAT_THREADS must be a positive integer, got {v:?}")))?;
        // A second call in the same process fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match init_threads().and_then(|_| execute(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            if cli.json {
                eprintln!("{}", serde_json::json!({"error": {"kind": error_kind(&e), "message": e.to_string(), "exit_code": code}}));
            }
            ExitCode::from(code)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Wavelet(a) => wavelet(a),
        Command::Eval(a) => eval(a),
        Command::Dataset(a) => dataset(a),
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(k) = a.loss {
        cfg.loss.kind = k;
    }
    if let Some(o) = &a.out {
        cfg.output = o.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output);
    fs::create_dir_all(&out)?;
    let outcome = crate::pipeline::train_run(&cfg, a.seed)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let extra = serde_json::json!({"config_hash": cfg.hash(), "stages": outcome.stages});
    save_checkpoint(out.join("checkpoint"), &outcome.model, outcome.losses.len(), a.seed, extra.clone())?;
    outcome.codec.save(out.join("codec"))?;
    let mut w = csv::Writer::from_path(out.join("losses.csv")).map_err(|e| HimatError::Format(e.to_string()))?;
    let smooth = crate::diffusion::train::smoothed(&outcome.losses, crate::pipeline::SMOOTHING_WINDOW);
    w.write_record(["step", "loss", "smoothed"]).map_err(|e| HimatError::Format(e.to_string()))?;
    let lag = crate::pipeline::SMOOTHING_WINDOW - 1;
    for (i, l) in outcome.losses.iter().enumerate() {
        // The moving average starts once a full window is available.
        let s = i.checked_sub(lag).map(|k| smooth[k].to_string()).unwrap_or_default();
        w.write_record([i.to_string(), l.to_string(), s]).map_err(|e| HimatError::Format(e.to_string()))?;
    }
    w.flush()?;
    write_manifest(
        &out,
        &CommandManifest {
            command: "train",
            version: crate::VERSION,
            config_hash: cfg.hash(),
            seed: a.seed,
            args: a,
            artifacts: vec!["config.json".into(), "checkpoint".into(), "codec".into(), "losses.csv".into()],
            extra,
        },
    )?;
    println!("{}", serde_json::to_string(&outcome.stages)?);
    Ok(())
}

struct Run {
    cfg: RunConfig,
    model: crate::diffusion::DitModel,
    codec: ToyCodec,
}

fn load_run(dir: &Path) -> Result<Run> {
    let cfg = RunConfig::load(dir.join("config.json"))?;
    let (model, _) = load_checkpoint(dir.join("checkpoint"))?;
    let codec = ToyCodec::load(dir.join("codec"))?;
    Ok(Run { cfg, model, codec })
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let run = load_run(&a.ckpt)?;
    if run.cfg.task != Task::Generate {
        return Err(HimatError::InvalidConfig("checkpoint was trained for decomposition; use `decompose`".into()));
    }
    ConditionToken::prompt(a.prompt_id).check(run.model.config.cond_vocab)?;
    let mut sc = run.cfg.sampler.clone();
    sc.steps = a.steps.unwrap_or(sc.steps);
    sc.seed = a.seed;
    sc.noise_rolling = a.tileable;
    if sc.steps == 0 {
        return Err(HimatError::InvalidConfig("--steps must be positive".into()));
    }
    let mc = &run.model.config;
    let side = a.latent.unwrap_or(mc.latent_height);
    let z = sample(&run.model, &[1, mc.maps, side, side, mc.latent_channels], &Conditioning::tokens(vec![a.prompt_id]), &sc)?;
    let stack = run.codec.decode(&z.index_first(0))?.map(|v| v.clamp(0.0, 1.0));
    fs::create_dir_all(&a.out)?;
    let mut files = write_material_pngs(&a.out, &unpack_maps(&stack)?, BitDepth::Eight)?;
    stack.write_himt(a.out.join("stack.himt"), DType::F32)?;
    z.index_first(0).write_himt(a.out.join("latent.himt"), DType::F64)?;
    files.extend(["stack.himt".to_string(), "latent.himt".to_string()]);
    write_manifest(
        &a.out,
        &CommandManifest {
            command: "generate",
            version: crate::VERSION,
            config_hash: run.cfg.hash(),
            seed: a.seed,
            args: a,
            artifacts: files,
            extra: serde_json::json!({"sampler": sc, "latent": side}),
        },
    )
}

fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("himt") => Tensor::read_himt(path),
        _ => read_png_rgb(path),
    }
}

fn decompose_cmd(a: &DecomposeArgs) -> Result<()> {
    let run = load_run(&a.ckpt)?;
    if run.cfg.task != Task::Decompose {
        return Err(HimatError::InvalidConfig("checkpoint was trained for generation; use `generate`".into()));
    }
    let img = read_image(&a.input)?;
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(HimatError::shape("decompose", format!("expected an RGB image [H, W, 3], got {:?}", img.shape())));
    }
    let photo = crate::material::replicate_image(&img)?;
    let cond = run.codec.encode(&photo)?;
    let mut sc = run.cfg.sampler.clone();
    sc.steps = a.steps.unwrap_or(sc.steps);
    sc.seed = a.seed;
    let z = decompose(&run.model, &cond, ConditionToken::instruction(a.instruction), &sc)?;
    let layers = run.codec.decode(&z)?.map(|v| v.clamp(0.0, 1.0));
    fs::create_dir_all(&a.out)?;
    let names = ["albedo", "normal", "irradiance"];
    for (i, name) in names.iter().enumerate() {
        let t = layers.index_first(i);
        let t = if i == 2 { luminance(&t)? } else { t };
        write_png(a.out.join(format!("{name}.png")), &t, BitDepth::Eight)?;
    }
    layers.write_himt(a.out.join("layers.himt"), DType::F32)?;
    let selected = names[a.instruction as usize];
    let mut files: Vec<String> = names.iter().map(|n| format!("{n}.png")).collect();
    files.push("layers.himt".into());
    write_manifest(
        &a.out,
        &CommandManifest {
            command: "decompose",
            version: crate::VERSION,
            config_hash: run.cfg.hash(),
            seed: a.seed,
            args: a,
            artifacts: files,
            extra: serde_json::json!({"selected": format!("{selected}.png"), "sampler": sc}),
        },
    )
}

fn bench(a: &BenchArgs) -> Result<()> {
    let variants = match a.variant {
        VariantArg::All => Variant::ALL.to_vec(),
        VariantArg::Attention => vec![Variant::Attention],
        VariantArg::Linear => vec![Variant::LinearAttention],
        VariantArg::Crossstitch => vec![Variant::CrossStitch],
    };
    let timing = (!a.no_timing).then(|| (TimingConfig { seed: a.seed, ..Default::default() }, a.trials));
    let plan = BenchPlan { model: crate::diffusion::ModelConfig::paper_reference(), variants, sizes: a.sizes.clone(), timing };
    let report = CostReport::build(&plan)?;
    report.validate()?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    report.write_json(&a.out)?;
    if let Some(c) = &a.csv {
        report.write_csv(c)?;
    }
    for r in &report.rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn read_any(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("himt") => Tensor::read_himt(path),
        _ => {
            let rgb = read_png_rgb(path)?;
            let d = rgb.data();
            if d.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]) {
                luminance(&rgb)
            } else {
                Ok(rgb)
            }
        }
    }
}

fn channel(x: &Tensor, c: usize) -> Result<Tensor> {
    let (h, w, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::new(&[h, w], x.data().iter().skip(c).step_by(k).copied().collect())
}

fn interleave(chs: &[Tensor]) -> Result<Tensor> {
    let (h, w) = (chs[0].shape()[0], chs[0].shape()[1]);
    let k = chs.len();
    Tensor::new(&[h, w, k], (0..h * w * k).map(|i| chs[i % k].data()[i / k]).collect())
}

fn preview(t: &Tensor) -> Tensor {
    let (lo, hi) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    t.map(|v| (v - lo) / span)
}

fn wavelet(a: &WaveletArgs) -> Result<()> {
    let basis = load_basis(&a.basis)?;
    if a.levels == 0 {
        return Err(HimatError::InvalidConfig("--levels must be positive".into()));
    }
    let img = read_any(&a.input)?;
    let chans: Vec<Tensor> = match img.rank() {
        2 => vec![img.clone()],
        3 => (0..img.shape()[2]).map(|c| channel(&img, c)).collect::<Result<_>>()?,
        _ => return Err(HimatError::shape("wavelet", format!("expected [H, W] or [H, W, C], got {:?}", img.shape()))),
    };
    let per = chans
        .iter()
        .map(|c| match a.transform {
            TransformArg::Dwt => dwt2(c, &basis),
            TransformArg::Swt => swt2(c, &basis, a.levels),
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    let mut shapes = serde_json::Map::new();
    for (j, level) in per[0].levels.iter().enumerate() {
        for (bi, (band, _)) in level.bands().iter().enumerate() {
            let parts: Vec<Tensor> = per.iter().map(|s| s.levels[j].bands()[bi].1.clone()).collect();
            let t = if img.rank() == 2 { parts[0].clone() } else { interleave(&parts)? };
            let name = format!("level{}_{band}", j + 1);
            t.write_himt(a.out.join(format!("{name}.himt")), DType::F64)?;
            files.push(format!("{name}.himt"));
            shapes.insert(name.clone(), serde_json::json!(t.shape()));
            if a.png && (t.rank() == 2 || t.shape()[2] == 3) {
                write_png(a.out.join(format!("{name}.png")), &preview(&t), BitDepth::Eight)?;
                files.push(format!("{name}.png"));
            }
        }
    }
    let kind = match a.transform {
        TransformArg::Dwt => TransformKind::Dwt,
        TransformArg::Swt => TransformKind::Swt,
    };
    write_manifest(
        &a.out,
        &CommandManifest {
            command: "wavelet",
            version: crate::VERSION,
            config_hash: hash_json(a),
            seed: 0,
            args: a,
            artifacts: files,
            extra: serde_json::json!({"transform": kind, "basis": basis.name.to_string(), "input_shape": img.shape(), "subbands": shapes}),
        },
    )
}

fn consistency_of(path: &Path) -> Result<f64> {
    if path.is_dir() {
        return Ok(cross_map_consistency(&read_material_pngs(path)?)?.score);
    }
    let t = read_any(path)?;
    match t.rank() {
        4 if t.shape()[0] == PACKED_MAPS && t.shape()[3] == 3 => Ok(cross_map_consistency(&unpack_maps(&t)?)?.score),
        4 => Ok(stack_consistency(&t)?.score),
        _ => Err(HimatError::shape("consistency", format!("expected a material directory or [M, H, W, C] stack, got {:?}", t.shape()))),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let reference = match (a.metric, &a.reference) {
        (MetricArg::Psnr, None) => return Err(HimatError::InvalidConfig("psnr needs --ref".into())),
        (MetricArg::Psnr, Some(r)) => Some(read_any(r)?),
        _ => None,
    };
    let glcm_cfg = GlcmConfig { levels: a.levels, ..Default::default() };
    glcm_cfg.validate()?;
    for p in &a.inputs {
        let (name, value) = match a.metric {
            MetricArg::Psnr => ("psnr", psnr(&read_any(p)?, reference.as_ref().expect("checked"), a.peak)?),
            MetricArg::Glcm => ("glcm", glcm_score(&luminance(&read_any(p)?)?, &glcm_cfg)?),
            MetricArg::Consistency => ("consistency", consistency_of(p)?),
        };
        // JSON has no infinity; identical images report null.
        let v = if value.is_finite() { serde_json::json!(value) } else { serde_json::Value::Null };
        println!("{}", serde_json::json!({"metric": name, "input": p.display().to_string(), "value": v}));
    }
    Ok(())
}

fn dataset(a: &DatasetArgs) -> Result<()> {
    let items = synth_dataset(a.seed, a.count, a.size, a.size)?;
    let depth = if a.sixteen_bit { BitDepth::Sixteen } else { BitDepth::Eight };
    let m = write_dataset(&a.out, a.seed, &items, depth)?;
    println!("{}", serde_json::json!({"count": m.count, "out": a.out.display().to_string()}));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for argv in [
            "himat train --loss swt --seed 3",
            "himat generate --ckpt r --prompt-id 1 --steps 4 --tileable --seed 7 --out o",
            "himat decompose --ckpt r --input a.png --instruction normal --out o",
            "himat bench --variant all --sizes 256,1024 --trials 5 --out r.json",
            "himat wavelet --input a.png --basis haar --transform dwt --out o --png",
            "himat eval --metric psnr --in a.png b.png --ref c.png",
            "himat dataset --seed 1 --count 2 --size 16 --out d --json",
        ] {
            Cli::try_parse_from(argv.split(' ')).unwrap_or_else(|e| panic!("{argv}: {e}"));
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["himat", "generate", "--prompt-id", "0"]), ExitCode::from(2));
        assert_eq!(run(["himat", "train", "--loss", "l1"]), ExitCode::from(2));
        assert_eq!(run(["himat", "frobnicate"]), ExitCode::from(2));
    }

    #[test]
    fn config_errors_map_to_2() {
        assert_eq!(exit_code(&HimatError::InvalidConfig("x".into())), 2);
        assert_eq!(exit_code(&HimatError::UnknownBasis("db2".into())), 2);
        assert_eq!(exit_code(&HimatError::Format("x".into())), 1);
        assert_eq!(error_kind(&HimatError::OddDimensions(1, 1)), "odd_dimensions");
    }

    #[test]
    fn channel_split_roundtrips() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| (i[0] * 9 + i[1] * 3 + i[2]) as f64);
        let parts: Vec<Tensor> = (0..3).map(|c| channel(&x, c).unwrap()).collect();
        assert_eq!(interleave(&parts).unwrap(), x);
    }
}
