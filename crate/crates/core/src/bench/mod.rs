//! Inference-cost comparison of three ways to let maps talk to each other:
//! full softmax attention over all `M N` tokens, linear attention over the
//! same tokens, or per-pixel CrossStitch. The backbone (per-map linear
//! attention, feed-forward, modulation) is identical across variants.
//!
//! Sizes are tokens per map, `N = H W`, with square latents.

mod kernels;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_layer_flops, attention_layer_memory, AttentionVariant};
use crate::crossstitch::crossstitch_cost;
use crate::diffusion::ModelConfig;
use crate::error::{HimatError, Result};
use kernels::BlockKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Attention,
    #[serde(rename = "linear")]
    LinearAttention,
    CrossStitch,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Attention, Variant::LinearAttention, Variant::CrossStitch];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Attention => "attention",
            Variant::LinearAttention => "linear",
            Variant::CrossStitch => "crossstitch",
        }
    }

    /// How the cross-map mechanism is realized.
    pub fn mechanism(self) -> &'static str {
        match self {
            Variant::Attention => "softmax attention over all M*H*W tokens",
            Variant::LinearAttention => "linear attention over all M*H*W tokens",
            Variant::CrossStitch => "per-pixel CrossStitch across the M maps",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = HimatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Variant::Attention),
            "linear" => Ok(Variant::LinearAttention),
            "crossstitch" => Ok(Variant::CrossStitch),
            _ => Err(HimatError::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

/// Square side for `n` tokens per map.
pub fn square_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if n == 0 || s * s != n {
        return Err(HimatError::InvalidConfig(format!("size {n} is not a positive square token count")));
    }
    Ok(s)
}

/// Analytic cost of one forward pass, batch of one stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticCost {
    pub params: u128,
    pub flops: u128,
    /// Elements live at the widest point of a block.
    pub memory: u128,
}

/// Cost of the cross-map mechanism alone over `M` maps of `n` tokens.
/// Every variant adds its output to the attention output, one add per element.
pub fn mechanism_cost(v: Variant, m: usize, side_h: usize, side_w: usize, c: usize) -> AnalyticCost {
    let t = m * side_h * side_w;
    let (tu, cu) = (t as u128, c as u128);
    let add = tu * cu;
    match v {
        Variant::Attention => AnalyticCost {
            params: 4 * cu * cu,
            flops: attention_layer_flops(t, c, AttentionVariant::Softmax) + add,
            memory: attention_layer_memory(t, c, AttentionVariant::Softmax),
        },
        Variant::LinearAttention => AnalyticCost {
            params: 4 * cu * cu,
            flops: attention_layer_flops(t, c, AttentionVariant::Linear) + add,
            memory: attention_layer_memory(t, c, AttentionVariant::Linear),
        },
        Variant::CrossStitch => {
            let cs = crossstitch_cost(m, side_h, side_w, c);
            AnalyticCost { params: cs.params, flops: cs.time_flops + add, memory: cs.space_units }
        }
    }
}

/// Whole-model cost for `cfg` with its latent size replaced by `side x side`.
///
/// Per block, with `T = M H W` tokens and `F = ffn_mult C`:
/// modulation `12 C^2 + 6 C`; two modulated layer norms at `9 T C` each;
/// per-map linear attention; the cross-map mechanism; two gated residuals at
/// `2 T C` each; feed-forward `4 T C F + T F + 2 k^2 T F + 4 T F + T C`.
/// The stem adds the input projection, map and time embeddings, the final
/// modulated norm and the output projection.
pub fn analytic_cost(cfg: &ModelConfig, v: Variant, side_h: usize, side_w: usize) -> AnalyticCost {
    let (m, c, cl) = (cfg.maps as u128, cfg.channels as u128, cfg.latent_channels as u128);
    let cin = cfg.input_channels() as u128;
    let n = (side_h * side_w) as u128;
    let t = m * n;
    let f = (cfg.ffn_mult * cfg.channels) as u128;
    let k2 = (cfg.ffn_kernel * cfg.ffn_kernel) as u128;
    let attn = AttentionVariant::Linear;
    let mech = mechanism_cost(v, cfg.maps, side_h, side_w, cfg.channels);

    let block_params = 4 * c * c + (c * f + f) + k2 * f + (f * c + c) + (6 * c * c + 6 * c) + mech.params;
    let stem_params = (cin * c + c) + m * c + 2 * (c * c + c) + cfg.cond_vocab as u128 * c + (2 * c * c + 2 * c) + (c * cl + cl);

    let per_map_attn = m * attention_layer_flops(side_h * side_w, cfg.channels, attn);
    let ffn = 4 * t * c * f + t * f + 2 * k2 * t * f + 4 * t * f + t * c;
    let block_flops = (12 * c * c + 6 * c) + 2 * 9 * t * c + per_map_attn + mech.flops + 2 * 2 * t * c + ffn;
    let stem_flops = (2 * t * cin * c + t * c) + t * c + (2 * (2 * c * c + c) + 4 * c) + (4 * c * c + 2 * c) + 9 * t * c + (2 * t * c * cl + t * cl);

    let backbone_mem = m * attention_layer_memory(side_h * side_w, cfg.channels, attn);
    let ffn_mem = 2 * t * f + t * c;
    let memory = t * c + backbone_mem.max(ffn_mem).max(mech.memory);

    let blocks = cfg.n_blocks as u128;
    AnalyticCost { params: blocks * block_params + stem_params, flops: blocks * block_flops + stem_flops, memory }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median: f64,
    pub iqr: f64,
    pub trials: usize,
    pub samples: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl TimingStats {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        let raw = samples.clone();
        samples.sort_by(f64::total_cmp);
        TimingStats { median: quantile(&samples, 0.5), iqr: quantile(&samples, 0.75) - quantile(&samples, 0.25), trials: raw.len(), samples: raw }
    }
}

/// Geometry of the timed block; kept small so the largest softmax case
/// finishes in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub maps: usize,
    pub channels: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { maps: 3, channels: 8, ffn_mult: 4, seed: 0 }
    }
}

/// Wall time of one block forward pass in single precision, after one
/// warm-up run. Trials run back to back on the calling thread.
pub fn measure_step_time(cfg: &TimingConfig, v: Variant, size: usize, trials: usize) -> Result<TimingStats> {
    if trials < 5 {
        return Err(HimatError::InvalidConfig(format!("need at least 5 trials, got {trials}")));
    }
    let side = square_side(size)?;
    let k = BlockKernel::new(v, cfg.maps, side, side, cfg.channels, cfg.ffn_mult, cfg.seed);
    std::hint::black_box(k.forward());
    let samples = (0..trials)
        .map(|_| {
            let t0 = Instant::now();
            std::hint::black_box(k.forward());
            t0.elapsed().as_secs_f64()
        })
        .collect();
    Ok(TimingStats::from_samples(samples))
}

/// Least-squares slope of `log t` against `log n`.
pub fn fit_scaling_exponent(sizes: &[f64], times: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = sizes.iter().zip(times).map(|(&n, &t)| (n, t)).collect();
    if pts.len() < 3 || sizes.len() != times.len() || pts.iter().any(|&(n, t)| !(n > 0.0 && t > 0.0)) {
        return Err(HimatError::InsufficientPoints(pts.iter().filter(|&&(n, t)| n > 0.0 && t > 0.0).count()));
    }
    let k = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(n, t)| (a + n.ln() / k, b + t.ln() / k));
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(n, t) in &pts {
        sxy += (n.ln() - mx) * (t.ln() - my);
        sxx += (n.ln() - mx).powi(2);
    }
    if sxx == 0.0 {
        return Err(HimatError::InsufficientPoints(1));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub params: f64,
    pub flops: f64,
    pub memory: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRow {
    pub variant: Variant,
    /// Tokens per map.
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub params: u128,
    pub flops: u128,
    pub memory: u128,
    pub seconds: Option<TimingStats>,
    /// Each column divided by the CrossStitch row of the same size.
    pub ratio: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Platform {
    pub os: String,
    pub arch: String,
    pub available_threads: usize,
    /// Timed trials always run on one thread.
    pub timing_threads: usize,
}

impl Platform {
    pub fn current() -> Self {
        Platform {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            available_threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            timing_threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentFit {
    pub variant: Variant,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub version: String,
    pub platform: Platform,
    /// Config behind the analytic columns.
    pub model: ModelConfig,
    /// Config behind the measured column, if any.
    pub timing: Option<TimingConfig>,
    pub rows: Vec<CostRow>,
    pub exponents: Vec<ExponentFit>,
}

/// What to put in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub model: ModelConfig,
    pub variants: Vec<Variant>,
    pub sizes: Vec<usize>,
    /// `None` skips timing.
    pub timing: Option<(TimingConfig, usize)>,
}

fn ratio(a: u128, b: u128) -> f64 {
    a as f64 / b as f64
}

impl CostReport {
    /// Analytic rows for every (variant, size), timings if requested, and
    /// ratios against CrossStitch. CrossStitch is always evaluated so the
    /// ratio columns have a reference.
    pub fn build(plan: &BenchPlan) -> Result<Self> {
        plan.model.validate()?;
        if plan.sizes.is_empty() || plan.variants.is_empty() {
            return Err(HimatError::InvalidConfig("bench needs at least one size and variant".into()));
        }
        let mut variants = plan.variants.clone();
        if !variants.contains(&Variant::CrossStitch) {
            variants.push(Variant::CrossStitch);
        }
        let mut rows = Vec::new();
        for &size in &plan.sizes {
            let side = square_side(size)?;
            let mut group = Vec::new();
            for &v in &variants {
                let cost = analytic_cost(&plan.model, v, side, side);
                let seconds = match &plan.timing {
                    Some((tc, trials)) => Some(measure_step_time(tc, v, size, *trials)?),
                    None => None,
                };
                group.push((v, cost, seconds));
            }
            let (_, base, base_t) = group.iter().find(|(v, ..)| *v == Variant::CrossStitch).cloned().expect("added above");
            for (v, cost, seconds) in group {
                let sec_ratio = match (&seconds, &base_t) {
                    (Some(s), Some(b)) => Some(s.median / b.median),
                    _ => None,
                };
                let ratio = if v == Variant::CrossStitch {
                    Ratios { params: 1.0, flops: 1.0, memory: 1.0, seconds: sec_ratio.map(|_| 1.0) }
                } else {
                    Ratios { params: ratio(cost.params, base.params), flops: ratio(cost.flops, base.flops), memory: ratio(cost.memory, base.memory), seconds: sec_ratio }
                };
                rows.push(CostRow { variant: v, size, height: side, width: side, params: cost.params, flops: cost.flops, memory: cost.memory, seconds, ratio });
            }
        }
        let mut exponents = Vec::new();
        if plan.timing.is_some() && plan.sizes.len() >= 3 {
            for &v in &variants {
                let (n, t): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter(|r| r.variant == v)
                    .map(|r| (r.size as f64, r.seconds.as_ref().map_or(0.0, |s| s.median)))
                    .unzip();
                exponents.push(ExponentFit { variant: v, exponent: fit_scaling_exponent(&n, &t)? });
            }
        }
        Ok(CostReport {
            version: crate::VERSION.to_string(),
            platform: Platform::current(),
            model: plan.model.clone(),
            timing: plan.timing.map(|(t, _)| t),
            rows,
            exponents,
        })
    }

    /// Structural checks a consumer can rely on.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HimatError::InvalidConfig(format!("report: {msg}")));
        for r in &self.rows {
            if r.params == 0 || r.flops == 0 || r.memory == 0 || r.height * r.width != r.size {
                return bad(format!("degenerate row {r:?}"));
            }
            if r.variant == Variant::CrossStitch && (r.ratio.params, r.ratio.flops, r.ratio.memory) != (1.0, 1.0, 1.0) {
                return bad("CrossStitch row not normalized to 1".into());
            }
            if r.seconds.is_some() != r.ratio.seconds.is_some() {
                return bad(format!("timing and ratio disagree for {:?} at {}", r.variant, r.size));
            }
            if !self.rows.iter().any(|b| b.size == r.size && b.variant == Variant::CrossStitch) {
                return bad(format!("no CrossStitch reference at size {}", r.size));
            }
        }
        Ok(())
    }

    pub fn row(&self, v: Variant, size: usize) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.variant == v && r.size == size)
    }

    pub fn exponent(&self, v: Variant) -> Option<f64> {
        self.exponents.iter().find(|e| e.variant == v).map(|e| e.exponent)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HimatError::Format(e.to_string()))?;
        let err = |e: csv::Error| HimatError::Format(e.to_string());
        w.write_record([
            "variant", "size", "height", "width", "params", "flops", "memory", "median_s", "iqr_s", "params_ratio", "flops_ratio", "memory_ratio", "time_ratio",
        ])
        .map_err(err)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.size.to_string(),
                r.height.to_string(),
                r.width.to_string(),
                r.params.to_string(),
                r.flops.to_string(),
                r.memory.to_string(),
                opt(r.seconds.as_ref().map(|s| s.median)),
                opt(r.seconds.as_ref().map(|s| s.iqr)),
                format!("{:.4}", r.ratio.params),
                format!("{:.4}", r.ratio.flops),
                format!("{:.4}", r.ratio.memory),
                opt(r.ratio.seconds),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DitParams;
    use crate::params::count_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn params_match_the_model() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig { n_blocks: 2, channels: 8, maps: 1, conditional: true, ffn_kernel: 1, ..Default::default() },
        ] {
            let want = count_params(&DitParams::init(&cfg, 0)) as u128;
            assert_eq!(analytic_cost(&cfg, Variant::CrossStitch, 4, 4).params, want);
        }
    }

    #[test]
    fn exponent_of_exact_power_laws() {
        let n = [256.0, 1024.0, 4096.0, 16384.0];
        let quad: Vec<f64> = n.iter().map(|x| 3e-9 * x * x).collect();
        let lin: Vec<f64> = n.iter().map(|x| 5e-6 * x).collect();
        assert!((fit_scaling_exponent(&n, &quad).unwrap() - 2.0).abs() < 0.01);
        assert!((fit_scaling_exponent(&n, &lin).unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn exponent_with_multiplicative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let n: Vec<f64> = (8..=14).map(|k| 2f64.powi(k)).collect();
        let t: Vec<f64> = n.iter().map(|x| x * x * (1.0 + noise.sample(&mut rng))).collect();
        let e = fit_scaling_exponent(&n, &t).unwrap();
        assert!((1.9..=2.1).contains(&e), "{e}");
    }

    #[test]
    fn exponent_needs_three_positive_points() {
        assert!(matches!(fit_scaling_exponent(&[1.0, 2.0], &[1.0, 2.0]), Err(HimatError::InsufficientPoints(2))));
        assert!(matches!(fit_scaling_exponent(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0]), Err(HimatError::InsufficientPoints(2))));
    }

    #[test]
    fn crossstitch_is_cheapest_and_scales_linearly() {
        let cfg = ModelConfig::default();
        for side in [8, 16, 32, 64] {
            let cs = analytic_cost(&cfg, Variant::CrossStitch, side, side);
            let at = analytic_cost(&cfg, Variant::Attention, side, side);
            let li = analytic_cost(&cfg, Variant::LinearAttention, side, side);
            assert!(cs.flops < at.flops && cs.flops < li.flops, "side {side}");
            assert!(cs.params < at.params);
        }
        let mech = |v, s| mechanism_cost(v, 3, s, s, 32).flops as f64;
        let r_att = mech(Variant::Attention, 64) / mech(Variant::Attention, 32);
        assert!((r_att - 16.0).abs() < 0.5, "{r_att}");
        for v in [Variant::LinearAttention, Variant::CrossStitch] {
            assert!((mech(v, 64) / mech(v, 32) - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_normalizes_to_crossstitch() {
        let plan = BenchPlan { model: ModelConfig::paper_reference(), variants: vec![Variant::Attention, Variant::LinearAttention], sizes: vec![256, 16384], timing: None };
        let r = CostReport::build(&plan).unwrap();
        r.validate().unwrap();
        assert_eq!(r.rows.len(), 6);
        let cs = r.row(Variant::CrossStitch, 16384).unwrap();
        assert_eq!((cs.ratio.params, cs.ratio.flops, cs.ratio.memory), (1.0, 1.0, 1.0));
        assert!(r.row(Variant::Attention, 16384).unwrap().ratio.flops > 1.0);
        assert!(r.row(Variant::LinearAttention, 16384).unwrap().ratio.flops > 1.0);
    }

    #[test]
    fn timing_needs_five_trials_and_square_sizes() {
        assert!(measure_step_time(&TimingConfig::default(), Variant::CrossStitch, 64, 4).is_err());
        assert!(measure_step_time(&TimingConfig::default(), Variant::CrossStitch, 60, 5).is_err());
        let t = measure_step_time(&TimingConfig::default(), Variant::CrossStitch, 64, 5).unwrap();
        assert_eq!(t.trials, 5);
        assert!(t.median > 0.0 && t.iqr >= 0.0);
    }

    #[test]
    fn quantiles() {
        let s = TimingStats::from_samples(vec![4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.median, s.iqr), (3.0, 2.0));
    }
}
