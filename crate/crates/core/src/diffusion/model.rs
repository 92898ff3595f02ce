//! Diffusion transformer over map stacks.
//!
//! Tokens are latent pixels (one token per pixel per map). Attention runs
//! within each map, with the maps of every item processed as a batch;
//! cross-map communication happens only through CrossStitch. There is no
//! positional encoding, so the network commutes with circular shifts.
//!
//! Block layout, with `(shift, scale, gate)` pairs produced from the
//! time and condition embedding:
//!
//! ```text
//! a = CrossStitch(Attn(LN(x) * (1 + scale1) + shift1))
//! x = x + gate1 * a
//! x = x + gate2 * FFN(LN(x) * (1 + scale2) + shift2)
//! ```
//!
//! The feed-forward is `W2 silu(conv(W1 h))` with a circular depthwise
//! `K x K` conv applied within each map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conditioning, VelocityField};
use crate::attention::{attend_graph, AttentionParams, AttentionVariant};
use crate::autograd::{Graph, Var};
use crate::crossstitch::{crossstitch_graph, crossstitch_init, CrossStitchParams};
use crate::error::{HimatError, Result};
use crate::params::{bind_constant, count_params, join, normal, Linear, ParamTree};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    /// Hidden width `C`.
    pub channels: usize,
    /// Maps per stack `M`.
    pub maps: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Channels of the codec latent.
    pub latent_channels: usize,
    pub cond_vocab: usize,
    /// Default number of sampling steps.
    pub steps: usize,
    /// Concatenate a condition latent with the noisy input.
    pub conditional: bool,
    pub attention: AttentionVariant,
    pub crossstitch: bool,
    pub ffn_mult: usize,
    /// Odd size of the circular depthwise conv inside the feed-forward.
    /// Tokens carry no position, so this is the only spatially local op.
    pub ffn_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 4,
            channels: 32,
            maps: 3,
            latent_height: 16,
            latent_width: 16,
            latent_channels: 16,
            cond_vocab: 8,
            steps: 20,
            conditional: false,
            attention: AttentionVariant::Linear,
            crossstitch: true,
            ffn_mult: 4,
            ffn_kernel: 3,
        }
    }
}

impl ModelConfig {
    /// Reference geometry of the full-size model. Not trained here.
    pub fn paper_reference() -> Self {
        ModelConfig {
            n_blocks: 20,
            channels: 2240,
            maps: 3,
            latent_height: 128,
            latent_width: 128,
            latent_channels: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("channels", self.channels),
            ("maps", self.maps),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("latent_channels", self.latent_channels),
            ("cond_vocab", self.cond_vocab),
            ("steps", self.steps),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(HimatError::InvalidConfig(format!("model.{name} must be positive")));
        }
        if self.ffn_kernel % 2 == 0 {
            return Err(HimatError::InvalidConfig(format!("model.ffn_kernel must be odd, got {}", self.ffn_kernel)));
        }
        Ok(())
    }

    /// Channels entering the input projection.
    pub fn input_channels(&self) -> usize {
        if self.conditional {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }

    /// Shape of one sample `[M, H, W, C_latent]`.
    pub fn latent_shape(&self) -> [usize; 4] {
        [self.maps, self.latent_height, self.latent_width, self.latent_channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitBlock<T = Tensor> {
    pub attn: AttentionParams<T>,
    pub cs: CrossStitchParams<T>,
    pub ffn1: Linear<T>,
    /// `[K, K, ffn_mult C]`
    pub ffn_conv: T,
    pub ffn2: Linear<T>,
    /// `C -> 6C`: shift, scale and gate for both sublayers.
    pub modulation: Linear<T>,
}

impl<T> ParamTree<T> for DitBlock<T> {
    type With<U> = DitBlock<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DitBlock<U> {
        DitBlock {
            attn: self.attn.map_leaves(&join(prefix, "attn"), f),
            cs: self.cs.map_leaves(&join(prefix, "cs"), f),
            ffn1: self.ffn1.map_leaves(&join(prefix, "ffn1"), f),
            ffn_conv: f(&join(prefix, "ffn_conv"), &self.ffn_conv),
            ffn2: self.ffn2.map_leaves(&join(prefix, "ffn2"), f),
            modulation: self.modulation.map_leaves(&join(prefix, "modulation"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.cs.visit_mut(&join(prefix, "cs"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        f(&join(prefix, "ffn_conv"), &mut self.ffn_conv);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
        self.modulation.visit_mut(&join(prefix, "modulation"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitParams<T = Tensor> {
    pub input: Linear<T>,
    /// `[M, C]`, added to every token of map `m`.
    pub map_embed: T,
    pub time1: Linear<T>,
    pub time2: Linear<T>,
    /// `[V, C]`
    pub cond_embed: T,
    pub blocks: Vec<DitBlock<T>>,
    /// `C -> 2C`: shift and scale before the output projection.
    pub final_mod: Linear<T>,
    pub output: Linear<T>,
}

impl<T> ParamTree<T> for DitParams<T> {
    type With<U> = DitParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DitParams<U> {
        DitParams {
            input: self.input.map_leaves(&join(prefix, "input"), f),
            map_embed: f(&join(prefix, "map_embed"), &self.map_embed),
            time1: self.time1.map_leaves(&join(prefix, "time1"), f),
            time2: self.time2.map_leaves(&join(prefix, "time2"), f),
            cond_embed: f(&join(prefix, "cond_embed"), &self.cond_embed),
            blocks: self.blocks.map_leaves(&join(prefix, "blocks"), f),
            final_mod: self.final_mod.map_leaves(&join(prefix, "final_mod"), f),
            output: self.output.map_leaves(&join(prefix, "output"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        f(&join(prefix, "map_embed"), &mut self.map_embed);
        self.time1.visit_mut(&join(prefix, "time1"), f);
        self.time2.visit_mut(&join(prefix, "time2"), f);
        f(&join(prefix, "cond_embed"), &mut self.cond_embed);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.final_mod.visit_mut(&join(prefix, "final_mod"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

impl DitBlock<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let mut modulation = Linear::init_scaled(c, 6 * c, 0.1, rng);
        for k in [2 * c..3 * c, 5 * c..6 * c] {
            modulation.bias.data_mut()[k].iter_mut().for_each(|b| *b = 1.0);
        }
        DitBlock {
            attn: AttentionParams::init(c, cfg.attention, rng),
            cs: crossstitch_init(cfg.maps, c),
            ffn1: Linear::init(c, cfg.ffn_mult * c, rng),
            ffn_conv: conv_init(cfg.ffn_kernel, cfg.ffn_mult * c, rng),
            ffn2: Linear::init_scaled(cfg.ffn_mult * c, c, 0.5, rng),
            modulation,
        }
    }
}

/// Identity tap plus small noise, so a fresh feed-forward starts near a plain MLP.
fn conv_init<R: Rng + ?Sized>(k: usize, c: usize, rng: &mut R) -> Tensor {
    let mut w = normal(&[k, k, c], 0.1, rng);
    let centre = (k / 2) * k + k / 2;
    w.data_mut()[centre * c..(centre + 1) * c].iter_mut().for_each(|v| *v += 1.0);
    w
}

impl DitParams<Tensor> {
    /// CrossStitch, the final modulation and the output projection start at
    /// zero, so a fresh model predicts zero velocity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        DitParams {
            input: Linear::init(cfg.input_channels(), c, &mut rng),
            map_embed: normal(&[cfg.maps, c], 0.5, &mut rng),
            time1: Linear::init(c, c, &mut rng),
            time2: Linear::init(c, c, &mut rng),
            cond_embed: normal(&[cfg.cond_vocab, c], 0.5, &mut rng),
            blocks: (0..cfg.n_blocks).map(|_| DitBlock::init(cfg, &mut rng)).collect(),
            final_mod: Linear::zeros(c, 2 * c),
            output: Linear::zeros(c, cfg.latent_channels),
        }
    }
}

/// `[sin(1000 t w_k), cos(1000 t w_k)]` with `w_k = 10000^(-k / (C/2))`.
pub fn timestep_embedding(t: &[f64], c: usize) -> Tensor {
    let half = c / 2;
    Tensor::from_fn(&[t.len(), c], |i| {
        let k = i[1];
        if k >= 2 * half {
            return 0.0;
        }
        let freq = (-(10000f64).ln() * (k % half) as f64 / half as f64).exp();
        let arg = 1000.0 * t[i[0]] * freq;
        if k < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

fn one_hot(ids: &[usize], n: usize) -> Tensor {
    Tensor::from_fn(&[ids.len(), n], |i| if ids[i[0]] == i[1] { 1.0 } else { 0.0 })
}

/// Layer norm followed by `x * (1 + scale) + shift`; `shift`, `scale` are `[B,1,1,1,C]`.
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.layer_norm_last(x, LN_EPS)?;
    let s1 = g.add_scalar(scale, 1.0)?;
    let h = g.mul_bcast(h, s1)?;
    g.add_bcast(h, shift)
}

/// Splits `[B, k C]` into `k` chunks shaped `[B, 1, 1, 1, C]`.
fn chunks(g: &mut Graph, m: Var, k: usize, c: usize) -> Result<Vec<Var>> {
    let b = g.shape(m)[0];
    (0..k)
        .map(|i| {
            let s = g.slice_last(m, i * c, c)?;
            g.reshape(s, &[b, 1, 1, 1, c])
        })
        .collect()
}

/// Which maps a forward pass sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    /// All `M` maps jointly, CrossStitch active.
    Joint,
    /// A single map `i` on its own with CrossStitch removed.
    Single(usize),
}

/// One DiT block on `x: [B, M, H, W, C]` with conditioning `c: [B, C]`.
pub fn dit_block_graph(g: &mut Graph, x: Var, c: Var, p: &DitBlock<Var>, use_crossstitch: bool) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [b, m, h, w, ch] = shape[..] else {
        return Err(HimatError::shape("dit_block", format!("expected [B, M, H, W, C], got {shape:?}")));
    };
    if g.shape(p.attn.wq)[0] != ch {
        return Err(HimatError::shape("dit_block", format!("block width {} for input {shape:?}", g.shape(p.attn.wq)[0])));
    }
    let silu_c = g.silu(c)?;
    let mods = g.linear(silu_c, p.modulation.weight, Some(p.modulation.bias))?;
    let mods = chunks(g, mods, 6, ch)?;

    let hmod = modulate(g, x, mods[0], mods[1])?;
    let tokens = g.reshape(hmod, &[b * m, h * w, ch])?;
    let a = attend_graph(g, tokens, &p.attn)?;
    let mut a = g.reshape(a, &shape)?;
    if use_crossstitch {
        a = crossstitch_graph(g, a, &p.cs)?;
    }
    let a = g.mul_bcast(a, mods[2])?;
    let x = g.add(x, a)?;

    let hmod = modulate(g, x, mods[3], mods[4])?;
    let f = p.ffn1.forward(g, hmod)?;
    let hidden = g.shape(f)[4];
    let f = g.reshape(f, &[b * m, h, w, hidden])?;
    let f = g.spatial_depthwise_conv(f, p.ffn_conv)?;
    let f = g.reshape(f, &[b, m, h, w, hidden])?;
    let f = g.silu(f)?;
    let f = p.ffn2.forward(g, f)?;
    let f = g.mul_bcast(f, mods[5])?;
    g.add(x, f)
}

/// Full network. `z: [B, M', H, W, C_latent]` with `M' = M` for
/// [`MapMode::Joint`] and `M' = 1` for [`MapMode::Single`].
pub fn dit_forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &DitParams<Var>,
    z: Var,
    t: &[f64],
    tokens: &[usize],
    cond_latent: Option<Var>,
    mode: MapMode,
) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let maps = match mode {
        MapMode::Joint => cfg.maps,
        MapMode::Single(i) if i < cfg.maps => 1,
        MapMode::Single(i) => return Err(HimatError::shape("dit_forward", format!("map {i} of {}", cfg.maps))),
    };
    let [b, m, _, _, cl] = shape[..] else {
        return Err(HimatError::shape("dit_forward", format!("expected [B, M, H, W, C], got {shape:?}")));
    };
    if m != maps || cl != cfg.latent_channels {
        return Err(HimatError::shape("dit_forward", format!("latent {shape:?} for M = {maps}, C = {}", cfg.latent_channels)));
    }
    if t.len() != b || tokens.len() != b {
        return Err(HimatError::shape("dit_forward", format!("batch {b} with {} times and {} tokens", t.len(), tokens.len())));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.cond_vocab) {
        return Err(HimatError::TokenOutOfVocab { id, vocab: cfg.cond_vocab });
    }
    let input = match (cfg.conditional, cond_latent) {
        (true, Some(cz)) => {
            if g.shape(cz) != shape.as_slice() {
                return Err(HimatError::shape("dit_forward", format!("condition {:?} vs latent {shape:?}", g.shape(cz))));
            }
            g.concat_last(cz, z)?
        }
        (false, None) => z,
        (true, None) => return Err(HimatError::shape("dit_forward", "conditional model needs a condition latent")),
        (false, Some(_)) => return Err(HimatError::shape("dit_forward", "model was not built for a condition latent")),
    };
    let c = cfg.channels;

    let mut x = p.input.forward(g, input)?;
    let embed = match mode {
        MapMode::Joint => p.map_embed,
        MapMode::Single(i) => {
            let sel = g.constant(one_hot(&[i], cfg.maps));
            g.matmul(sel, p.map_embed)?
        }
    };
    let embed = g.reshape(embed, &[1, maps, 1, 1, c])?;
    x = g.add_bcast(x, embed)?;

    let temb = g.constant(timestep_embedding(t, c));
    let temb = p.time1.forward(g, temb)?;
    let temb = g.silu(temb)?;
    let temb = p.time2.forward(g, temb)?;
    let sel = g.constant(one_hot(tokens, cfg.cond_vocab));
    let cemb = g.matmul(sel, p.cond_embed)?;
    let cvec = g.add(temb, cemb)?;

    let use_cs = cfg.crossstitch && mode == MapMode::Joint;
    for block in &p.blocks {
        x = dit_block_graph(g, x, cvec, block, use_cs)?;
    }

    let silu_c = g.silu(cvec)?;
    let fm = g.linear(silu_c, p.final_mod.weight, Some(p.final_mod.bias))?;
    let fm = chunks(g, fm, 2, c)?;
    let x = modulate(g, x, fm[0], fm[1])?;
    p.output.forward(g, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitModel {
    pub config: ModelConfig,
    pub params: DitParams,
}

impl DitModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = DitParams::init(&config, seed);
        Ok(DitModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.params)
    }

    /// Zeroes every CrossStitch parameter.
    pub fn zero_crossstitch(&mut self) {
        for b in &mut self.params.blocks {
            b.cs = crossstitch_init(self.config.maps, self.config.channels);
        }
    }

    fn lift(z: &Tensor) -> Result<Tensor> {
        match z.rank() {
            4 => {
                let mut s = vec![1];
                s.extend_from_slice(z.shape());
                z.reshape(&s)
            }
            5 => Ok(z.clone()),
            _ => Err(HimatError::shape("dit_forward", format!("expected [M,H,W,C] or [B,M,H,W,C], got {:?}", z.shape()))),
        }
    }

    fn run(&self, z: &Tensor, t: &[f64], cond: &Conditioning, mode: MapMode) -> Result<Tensor> {
        let lifted = Self::lift(z)?;
        let mut g = Graph::new();
        let p = bind_constant(&self.params, &mut g);
        let zv = g.constant(lifted);
        let cz = match &cond.latent {
            Some(l) => Some(g.constant(Self::lift(l)?)),
            None => None,
        };
        let y = dit_forward_graph(&mut g, &self.config, &p, zv, t, &cond.tokens, cz, mode)?;
        let out = g.value(y).clone();
        if z.rank() == 4 {
            out.reshape(z.shape())
        } else {
            Ok(out)
        }
    }

    /// Joint forward pass over all maps.
    pub fn forward(&self, z: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor> {
        self.run(z, t, cond, MapMode::Joint)
    }

    /// Runs each map through the network on its own, without CrossStitch,
    /// and stacks the results along the map axis.
    pub fn forward_per_map(&self, z: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor> {
        let z5 = Self::lift(z)?;
        let (b, m) = (z5.shape()[0], z5.shape()[1]);
        let slice = |x: &Tensor, i: usize| -> Result<Tensor> {
            let items: Vec<Tensor> = (0..b).map(|k| x.index_first(k).index_first(i)).collect();
            let mut s = vec![b, 1];
            s.extend_from_slice(&x.shape()[2..]);
            Tensor::stack(&items)?.reshape(&s)
        };
        let mut per_map = Vec::with_capacity(m);
        for i in 0..m {
            let ci = Conditioning { tokens: cond.tokens.clone(), latent: cond.latent.as_ref().map(|l| Self::lift(l).and_then(|l| slice(&l, i))).transpose()? };
            per_map.push(self.run(&slice(&z5, i)?, t, &ci, MapMode::Single(i))?);
        }
        let items: Vec<Tensor> = (0..b)
            .map(|k| Tensor::stack(&per_map.iter().map(|y| y.index_first(k).index_first(0)).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let out = Tensor::stack(&items)?;
        if z.rank() == 4 {
            out.reshape(z.shape())
        } else {
            Ok(out)
        }
    }
}

impl VelocityField for DitModel {
    fn velocity(&self, z: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor> {
        self.forward(z, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check_many;
    use crate::params::{named, visit};

    fn tiny() -> ModelConfig {
        ModelConfig { n_blocks: 2, channels: 4, maps: 3, latent_height: 2, latent_width: 2, latent_channels: 2, cond_vocab: 3, ..Default::default() }
    }

    /// Random values everywhere, including CrossStitch and the zero-initialized heads.
    fn randomized(cfg: &ModelConfig, seed: u64) -> DitModel {
        let mut m = DitModel::new(cfg.clone(), seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        m.params.visit_mut("", &mut |_, t| *t = t.add(&normal(t.shape(), 0.3, &mut r)).unwrap());
        m
    }

    #[test]
    fn fresh_model_predicts_zero_and_keeps_shape() {
        let cfg = ModelConfig { channels: 16, latent_height: 8, latent_width: 8, latent_channels: 16, ..Default::default() };
        let m = DitModel::new(cfg, 0).unwrap();
        let z = Tensor::randn(&[3, 8, 8, 16], &mut ChaCha8Rng::seed_from_u64(1));
        let y = m.forward(&z, &[0.3], &Conditioning::tokens(vec![1])).unwrap();
        assert_eq!(y.shape(), [3, 8, 8, 16]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn block_preserves_shape() {
        let cfg = ModelConfig { channels: 16, ..tiny() };
        let block = DitBlock::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let p = bind_constant(&block, &mut g);
        let x = g.constant(Tensor::randn(&[1, 3, 8, 8, 16], &mut ChaCha8Rng::seed_from_u64(3)));
        let c = g.constant(Tensor::randn(&[1, 16], &mut ChaCha8Rng::seed_from_u64(4)));
        let y = dit_block_graph(&mut g, x, c, &p, true).unwrap();
        assert_eq!(g.shape(y), [1, 3, 8, 8, 16]);
    }

    #[test]
    fn zero_crossstitch_block_equals_block_without_it() {
        let cfg = ModelConfig { channels: 8, ..tiny() };
        let block = DitBlock::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mut g = Graph::new();
        let p = bind_constant(&block, &mut g);
        let x = g.constant(Tensor::randn(&[2, 3, 4, 4, 8], &mut ChaCha8Rng::seed_from_u64(6)));
        let c = g.constant(Tensor::randn(&[2, 8], &mut ChaCha8Rng::seed_from_u64(7)));
        let with = dit_block_graph(&mut g, x, c, &p, true).unwrap();
        let without = dit_block_graph(&mut g, x, c, &p, false).unwrap();
        assert_eq!(g.value(with), g.value(without));
    }

    #[test]
    fn zero_crossstitch_model_is_per_map() {
        let mut m = randomized(&tiny(), 8);
        m.zero_crossstitch();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[2, 3, 2, 2, 2], &mut r);
        let cond = Conditioning::tokens(vec![0, 2]);
        let joint = m.forward(&z, &[0.2, 0.9], &cond).unwrap();
        assert_eq!(joint, m.forward_per_map(&z, &[0.2, 0.9], &cond).unwrap());
    }

    #[test]
    fn trained_crossstitch_carries_information_across_maps() {
        let m = randomized(&tiny(), 10);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(&[3, 2, 2, 2], &mut r);
        let cond = Conditioning::tokens(vec![1]);
        let base = m.forward(&z, &[0.5], &cond).unwrap();
        let mut z2 = z.clone();
        z2.data_mut()[2 * 2 * 2 * 2] += 1.0;
        let moved = m.forward(&z2, &[0.5], &cond).unwrap();
        assert_ne!(base.index_first(0), moved.index_first(0));
    }

    #[test]
    fn conditional_model_requires_latent() {
        let cfg = ModelConfig { conditional: true, ..tiny() };
        let m = DitModel::new(cfg, 1).unwrap();
        let z = Tensor::zeros(&[3, 2, 2, 2]);
        assert!(matches!(m.forward(&z, &[0.5], &Conditioning::tokens(vec![0])), Err(HimatError::ShapeMismatch { .. })));
        assert!(m.forward(&z, &[0.5], &Conditioning::with_latent(vec![0], z.clone())).is_ok());
        assert!(matches!(
            m.forward(&z, &[0.5], &Conditioning::tokens(vec![3])),
            Err(HimatError::TokenOutOfVocab { id: 3, vocab: 3 }) | Err(HimatError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn traversal_orders_agree() {
        let m = DitModel::new(tiny(), 2).unwrap();
        let names: Vec<String> = named(&m.params).into_iter().map(|(n, _)| n).collect();
        let mut mut_names = Vec::new();
        let mut p = m.params.clone();
        p.visit_mut("", &mut |n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
        assert!(names.contains(&"blocks.1.cs.pooled_bias".to_string()));
    }

    #[test]
    fn two_block_gradient_check() {
        let cfg = ModelConfig { n_blocks: 2, channels: 4, maps: 2, latent_height: 2, latent_width: 2, latent_channels: 2, cond_vocab: 2, ..Default::default() };
        for seed in 0..5u64 {
            let m = randomized(&cfg, 20 + seed);
            let z = Tensor::randn(&[1, 2, 2, 2, 2], &mut ChaCha8Rng::seed_from_u64(40 + seed));
            let mut inputs = vec![z];
            visit(&m.params, &mut |_, t: &Tensor| inputs.push(t.clone()));
            let rep = finite_difference_check_many(
                |g, v| {
                    let mut k = 1;
                    let p = m.params.map_leaves("", &mut |_, _| {
                        k += 1;
                        v[k - 1]
                    });
                    let y = dit_forward_graph(g, &cfg, &p, v[0], &[0.4], &[1], None, MapMode::Joint)?;
                    g.sum_squares(y)
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "seed {seed}: {rep:?}");
        }
    }
}
