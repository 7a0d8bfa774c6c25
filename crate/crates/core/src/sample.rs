//! Euler integration of the learned velocity field, with optional anchor
//! injection and classifier-free guidance.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{base_hash, forward, load_adapters, load_checkpoint, LoraAdapters, ModelConfig, Params, Real};
use crate::prompt::{parse_prompt, reduce_to_first_frame, serialize_prompt, tokenize, PromptAst, TokenSequence};
use crate::rng;
use crate::scene::{render_frame, scene_from_ast, Frame, Video};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    T2v,
    I2v,
    I2vText,
    Factorized,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::T2v, Mode::I2v, Mode::I2vText, Mode::Factorized];

    pub fn name(self) -> &'static str {
        match self {
            Mode::T2v => "t2v",
            Mode::I2v => "i2v",
            Mode::I2vText => "i2v_text",
            Mode::Factorized => "factorized",
        }
    }

    pub fn is_anchored(self) -> bool {
        self != Mode::T2v
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::format("mode", format!("unknown mode {s:?}; expected t2v, i2v, i2v_text or factorized")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, cfg_scale: DEFAULT_CFG_SCALE, mode: Mode::Factorized, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::format("steps", "must be at least 1"));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::format("cfg_scale", format!("must be finite and non-negative, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

/// `(t_i, Δ_i)` for `t_i = 1 − i/N`, `i = 0..N`. The last step takes whatever
/// is left so the steps sum to exactly one.
pub fn make_schedule(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let d = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let delta = if i + 1 == n { 1.0 - acc } else { d };
        acc += delta;
        out.push((t, delta));
    }
    out
}

/// `v_u + s · (v_c − v_u)`; returns the inputs themselves at `s = 1` and `s = 0`.
pub fn cfg_velocity<T: Real>(v_cond: &Array4<T>, v_uncond: &Array4<T>, s: f64) -> Result<Array4<T>> {
    if v_cond.dim() != v_uncond.dim() {
        return Err(Error::Shape(format!("cfg: {:?} vs {:?}", v_cond.dim(), v_uncond.dim())));
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    let s = T::lit(s);
    let mut out = v_uncond.clone();
    ndarray::Zip::from(&mut out).and(v_cond).for_each(|u, &c| *u = *u + s * (c - *u));
    Ok(out)
}

/// Anything that maps `(z, t_vec, tokens)` to a velocity video.
pub trait VelocityField<T> {
    fn velocity(&self, z: ArrayView4<T>, t_vec: &[T], tokens: &TokenSequence) -> Result<Array4<T>>;
}

/// Base network plus optional adapters.
pub struct NetField<'a, T> {
    pub config: &'a ModelConfig,
    pub params: &'a Params<T>,
    pub adapters: Option<&'a LoraAdapters<T>>,
}

impl<T: Real> VelocityField<T> for NetField<'_, T> {
    fn velocity(&self, z: ArrayView4<T>, t_vec: &[T], tokens: &TokenSequence) -> Result<Array4<T>> {
        forward(self.config, self.params, self.adapters, z, t_vec, tokens)
    }
}

/// Euler-integrates `z` from `t = 1` to `t = 0`. With `anchor` (a latent
/// frame), frame 0 is overwritten before every evaluation and once more at
/// the end, and its timestep is pinned to 0; both CFG branches see the same
/// injected input.
pub fn integrate<T: Real, F: VelocityField<T>>(
    field: &F,
    mut z: Array4<T>,
    tokens: &TokenSequence,
    steps: usize,
    cfg_scale: f64,
    anchor: Option<&Array3<T>>,
) -> Result<Array4<T>> {
    let frames = z.dim().0;
    if let Some(a) = anchor {
        let want = (z.dim().1, z.dim().2, z.dim().3);
        if a.dim() != want {
            return Err(Error::Shape(format!("anchor {:?}, expected {want:?}", a.dim())));
        }
    }
    let uncond = TokenSequence::empty();
    let guided = cfg_scale != 1.0 && *tokens != uncond;
    for (t, delta) in make_schedule(steps) {
        let mut t_vec = vec![T::lit(t); frames];
        if let Some(a) = anchor {
            z.index_axis_mut(Axis(0), 0).assign(a);
            t_vec[0] = T::zero();
        }
        let v = if !guided {
            field.velocity(z.view(), &t_vec, tokens)?
        } else if cfg_scale == 0.0 {
            field.velocity(z.view(), &t_vec, &uncond)?
        } else {
            let vc = field.velocity(z.view(), &t_vec, tokens)?;
            let vu = field.velocity(z.view(), &t_vec, &uncond)?;
            cfg_velocity(&vc, &vu, cfg_scale)?
        };
        z.scaled_add(T::lit(delta), &v);
    }
    if let Some(a) = anchor {
        z.index_axis_mut(Axis(0), 0).assign(a);
    }
    Ok(z)
}

/// Standard-normal starting latent for a sampler seed.
pub fn initial_noise(shape: (usize, usize, usize, usize), seed: u64) -> Video {
    let mut r = rng::stream(seed, &[0x5a40]);
    Array4::from_shape_simple_fn(shape, || rng::normal(&mut r) as f32)
}

/// `clamp((z + 1) / 2, 0, 1)`.
pub fn decode(z: &Video) -> Video {
    crate::scene::to_pixels(z)
}

pub fn encode_frame(frame: &Frame) -> Frame {
    frame.mapv(|p| 2.0 * p - 1.0)
}

/// Single-precision weights ready for sampling.
#[derive(Debug, Clone)]
pub struct VideoModel {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub adapters: Option<LoraAdapters<f32>>,
}

impl VideoModel {
    /// Loads a base checkpoint (any stored precision) and, optionally, adapters
    /// that must have been trained against exactly this base file.
    pub fn load(base: &Path, lora: Option<&Path>) -> Result<Self> {
        let ck = load_checkpoint(base)?.into_precision::<f32>();
        let params = ck.params.ok_or_else(|| Error::format("params", "base checkpoint carries no weights"))?;
        let adapters = match lora {
            Some(p) => {
                let (a, _) = load_adapters::<f32>(p, &base_hash(base)?)?;
                a.check_shapes(&ck.config)?;
                Some(a)
            }
            None => None,
        };
        Ok(Self { config: ck.config, params, adapters })
    }

    fn shape(&self) -> (usize, usize, usize, usize) {
        let c = &self.config;
        (c.frames, c.image_size, c.image_size, c.channels)
    }

    fn field(&self, adapted: bool) -> NetField<'_, f32> {
        NetField { config: &self.config, params: &self.params, adapters: if adapted { self.adapters.as_ref() } else { None } }
    }
}

/// Text-to-video with the base weights.
pub fn sample_t2v(model: &VideoModel, tokens: &TokenSequence, cfg: &SampleConfig) -> Result<Video> {
    cfg.validate()?;
    let z = initial_noise(model.shape(), cfg.seed);
    Ok(decode(&integrate(&model.field(false), z, tokens, cfg.steps, cfg.cfg_scale, None)?))
}

/// Anchored generation with the adapted weights. In `i2v` mode the tokens
/// are ignored and the unconditional sequence is used instead.
pub fn sample_anchored(model: &VideoModel, anchor: &Frame, tokens: &TokenSequence, cfg: &SampleConfig) -> Result<Video> {
    cfg.validate()?;
    let z = initial_noise(model.shape(), cfg.seed);
    let za = encode_frame(anchor);
    let empty = TokenSequence::empty();
    let tokens = if cfg.mode == Mode::I2v { &empty } else { tokens };
    Ok(decode(&integrate(&model.field(true), z, tokens, cfg.steps, cfg.cfg_scale, Some(&za))?))
}

/// Anchor image for a prompt: the reduced first-frame description, rendered.
pub fn render_anchor(ast: &PromptAst, anchor_seed: u64) -> Frame {
    render_frame(&scene_from_ast(&reduce_to_first_frame(ast), anchor_seed))
}

/// Parse, reduce, render the anchor, then run anchored sampling conditioned
/// on the full (unreduced) prompt.
pub fn run_factorized_pipeline(
    model: &VideoModel,
    prompt_text: &str,
    anchor_seed: u64,
    cfg: &SampleConfig,
) -> Result<(Video, Frame, PromptAst)> {
    let ast = parse_prompt(prompt_text)?;
    let anchor = render_anchor(&ast, anchor_seed);
    let tokens = tokenize(&serialize_prompt(&ast))?;
    let cfg = SampleConfig { mode: Mode::Factorized, ..cfg.clone() };
    let video = sample_anchored(model, &anchor, &tokens, &cfg)?;
    Ok((video, anchor, ast))
}
