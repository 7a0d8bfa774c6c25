//! The conditional velocity-field transformer.
//!
//! Every frame is cut into `patch × patch` tokens. A sinusoidal embedding of
//! that frame's own noise level is added to each of its tokens, so a single
//! clean anchor frame can sit next to noisy frames in one forward pass. The
//! blocks are pre-norm: full self-attention over all tokens of the video,
//! cross-attention into the embedded prompt, then a GELU MLP.

mod checkpoint;
mod gradcheck;
mod lora;
mod net;
mod real;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub use checkpoint::{
    base_hash, load_adapters, load_checkpoint, read_checkpoint_bytes, save_adapters,
    save_checkpoint, write_checkpoint_bytes, Checkpoint, CheckpointMeta, LoadedParams,
};

pub use gradcheck::{grad_check, grad_check_with, rel_error, GradCheckReport, FD_STEP, MAX_COORDS};
pub use lora::{apply_lora, LoraAdapters, LoraPair};
pub use net::{forward, forward_patches, Cache, Grads, Net};
pub use real::Real;

/// Reference LoRA rank used by the large-scale recipe; the toy default is 8.
pub const REFERENCE_LORA_RANK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub patch: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub frames: usize,
    pub image_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            blocks: 2,
            patch: 4,
            heads: 4,
            vocab_size: crate::prompt::VOCAB_SIZE,
            text_len: crate::prompt::MAX_TOKENS,
            frames: crate::scene::FRAMES,
            image_size: crate::scene::SIZE,
            channels: 3,
            mlp_ratio: 4,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::format(field, detail));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("heads", format!("{} does not divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.embed_dim == 0 || self.embed_dim % 16 != 0 {
            return bad("embed_dim", format!("{} is not a positive multiple of 16", self.embed_dim));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad("patch", format!("{} does not divide image_size {}", self.patch, self.image_size));
        }
        if self.blocks == 0 {
            return bad("blocks", "need at least one block".into());
        }
        if self.frames == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("frames", "frames, channels and mlp_ratio must be positive".into());
        }
        if self.vocab_size < crate::prompt::VOCAB_SIZE {
            return bad("vocab_size", format!("{} is smaller than the prompt vocabulary", self.vocab_size));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Weight matrices that carry LoRA adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mat {
    SelfQ,
    SelfK,
    SelfV,
    SelfO,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
    MlpIn,
    MlpOut,
}

impl Mat {
    pub const ALL: [Mat; 10] = [
        Mat::SelfQ,
        Mat::SelfK,
        Mat::SelfV,
        Mat::SelfO,
        Mat::CrossQ,
        Mat::CrossK,
        Mat::CrossV,
        Mat::CrossO,
        Mat::MlpIn,
        Mat::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mat::SelfQ => "self_q",
            Mat::SelfK => "self_k",
            Mat::SelfV => "self_v",
            Mat::SelfO => "self_o",
            Mat::CrossQ => "cross_q",
            Mat::CrossK => "cross_k",
            Mat::CrossV => "cross_v",
            Mat::CrossO => "cross_o",
            Mat::MlpIn => "mlp_w1",
            Mat::MlpOut => "mlp_w2",
        }
    }
}

/// One transformer block. Matrices are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Array2<T>,
    pub ln1_b: Array2<T>,
    pub self_q: Array2<T>,
    pub self_k: Array2<T>,
    pub self_v: Array2<T>,
    pub self_o: Array2<T>,
    pub ln2_g: Array2<T>,
    pub ln2_b: Array2<T>,
    pub cross_q: Array2<T>,
    pub cross_k: Array2<T>,
    pub cross_v: Array2<T>,
    pub cross_o: Array2<T>,
    pub ln3_g: Array2<T>,
    pub ln3_b: Array2<T>,
    pub mlp_w1: Array2<T>,
    pub mlp_b1: Array2<T>,
    pub mlp_w2: Array2<T>,
    pub mlp_b2: Array2<T>,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, self_q, self_k, self_v, self_o, ln2_g, ln2_b, cross_q, cross_k, cross_v,
            cross_o, ln3_g, ln3_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2)
    };
}

impl<T: Real> Block<T> {
    pub fn mat(&self, m: Mat) -> &Array2<T> {
        match m {
            Mat::SelfQ => &self.self_q,
            Mat::SelfK => &self.self_k,
            Mat::SelfV => &self.self_v,
            Mat::SelfO => &self.self_o,
            Mat::CrossQ => &self.cross_q,
            Mat::CrossK => &self.cross_k,
            Mat::CrossV => &self.cross_v,
            Mat::CrossO => &self.cross_o,
            Mat::MlpIn => &self.mlp_w1,
            Mat::MlpOut => &self.mlp_w2,
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Array2<T>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &self.$f)),*] };
        }
        block_fields!(list)
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<T>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &mut self.$f)),*] };
        }
        block_fields!(list)
    }
}

/// All base weights of the velocity network. Also used as the gradient and
/// optimizer-moment container, since it has exactly the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub patch_w: Array2<T>,
    pub patch_b: Array2<T>,
    pub tok_emb: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Array2<T>,
    pub lnf_b: Array2<T>,
    pub out_w: Array2<T>,
    pub out_b: Array2<T>,
}

impl<T: Real> Params<T> {
    /// All-zero parameters with the layout implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let z = |r: usize, c: usize| Array2::<T>::zeros((r, c));
        let block = || Block {
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            self_q: z(d, d),
            self_k: z(d, d),
            self_v: z(d, d),
            self_o: z(d, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
            cross_q: z(d, d),
            cross_k: z(d, d),
            cross_v: z(d, d),
            cross_o: z(d, d),
            ln3_g: z(1, d),
            ln3_b: z(1, d),
            mlp_w1: z(h, d),
            mlp_b1: z(1, h),
            mlp_w2: z(d, h),
            mlp_b2: z(1, d),
        };
        Params {
            patch_w: z(d, cfg.patch_dim()),
            patch_b: z(1, d),
            tok_emb: z(cfg.vocab_size, d),
            blocks: (0..cfg.blocks).map(|_| block()).collect(),
            lnf_g: z(1, d),
            lnf_b: z(1, d),
            out_w: z(cfg.patch_dim(), d),
            out_b: z(1, cfg.patch_dim()),
        }
    }

    /// Truncated-normal (σ = 0.02) matrices, zero biases, unit norm scales.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = rng::stream(seed, &[0x1a17]);
        for (name, t) in p.tensors_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            match init_kind(leaf) {
                InitKind::Normal => fill_trunc_normal(t, 0.02, &mut rng),
                InitKind::One => t.fill(T::one()),
                InitKind::Zero => {}
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut v: Vec<(String, &Array2<T>)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("tok_emb".into(), &self.tok_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.tensors().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        v.push(("lnf_g".into(), &self.lnf_g));
        v.push(("lnf_b".into(), &self.lnf_b));
        v.push(("out_w".into(), &self.out_w));
        v.push(("out_b".into(), &self.out_b));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut v: Vec<(String, &mut Array2<T>)> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("tok_emb".into(), &mut self.tok_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        v.push(("lnf_g".into(), &mut self.lnf_g));
        v.push(("lnf_b".into(), &mut self.lnf_b));
        v.push(("out_w".into(), &mut self.out_w));
        v.push(("out_b".into(), &mut self.out_b));
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let mut out = Params::<U> {
            patch_w: Array2::zeros((0, 0)),
            patch_b: Array2::zeros((0, 0)),
            tok_emb: Array2::zeros((0, 0)),
            blocks: Vec::new(),
            lnf_g: Array2::zeros((0, 0)),
            lnf_b: Array2::zeros((0, 0)),
            out_w: Array2::zeros((0, 0)),
            out_b: Array2::zeros((0, 0)),
        };
        let conv = |a: &Array2<T>| a.mapv(|x| U::lit(x.as_f64()));
        out.patch_w = conv(&self.patch_w);
        out.patch_b = conv(&self.patch_b);
        out.tok_emb = conv(&self.tok_emb);
        out.blocks = self
            .blocks
            .iter()
            .map(|b| {
                macro_rules! cast_block {
                    ($($f:ident),*) => { Block { $($f: conv(&b.$f)),* } };
                }
                block_fields!(cast_block)
            })
            .collect();
        out.lnf_g = conv(&self.lnf_g);
        out.lnf_b = conv(&self.lnf_b);
        out.out_w = conv(&self.out_w);
        out.out_b = conv(&self.out_b);
        out
    }
}

enum InitKind {
    Normal,
    One,
    Zero,
}

fn init_kind(leaf: &str) -> InitKind {
    if leaf.ends_with("_g") {
        InitKind::One
    } else if leaf.ends_with("_b") || leaf.starts_with("mlp_b") {
        InitKind::Zero
    } else {
        InitKind::Normal
    }
}

pub(crate) fn fill_trunc_normal<T: Real>(t: &mut Array2<T>, std: f64, rng: &mut Rng) {
    for x in t.iter_mut() {
        *x = T::lit(std * rng::truncated_normal(rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_documented_shape() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens_per_frame(), 64);
        assert_eq!(cfg.tokens_per_frame() * cfg.frames, 512);
        assert_eq!(cfg.patch_dim(), 48);
        assert!(REFERENCE_LORA_RANK > 8);
    }

    #[test]
    fn config_validation_rejects_bad_heads_and_patch() {
        let cfg = ModelConfig { heads: 5, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Format { field, .. }) if field == "heads"));
        let cfg = ModelConfig { patch: 5, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Format { field, .. }) if field == "patch"));
    }

    #[test]
    fn init_scales_and_biases() {
        let cfg = ModelConfig::default();
        let p = Params::<f32>::init(&cfg, 3);
        assert!(p.blocks[0].ln1_g.iter().all(|&x| x == 1.0));
        assert!(p.blocks[1].mlp_b1.iter().all(|&x| x == 0.0));
        assert!(p.out_b.iter().all(|&x| x == 0.0));
        assert!(p.self_q_spread() > 0.0);
        assert!(p.patch_w.iter().all(|x| x.abs() <= 0.04));
        assert_eq!(p, Params::<f32>::init(&cfg, 3));
        assert_ne!(p, Params::<f32>::init(&cfg, 4));
    }

    impl Params<f32> {
        fn self_q_spread(&self) -> f32 {
            self.blocks[0].self_q.iter().map(|x| x.abs()).sum()
        }
    }
}
