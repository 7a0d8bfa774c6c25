//! Flow-matching pretraining and anchor-grounding LoRA finetuning.
//!
//! Time runs in the diffusion direction: `t = 0` is clean data, `t = 1` pure
//! noise, `z_t = (1 − t)·data + t·ε`, and the network regresses the velocity
//! `data − ε` that carries a sample toward the data end.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    base_hash, Checkpoint, CheckpointMeta, Grads, LoraAdapters, ModelConfig, Net, Params, Real,
};
use crate::prompt::{self, TokenSequence};
use crate::rng::{self, Rng};
use crate::scene::{Dataset, Video};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLoss {
    /// Every frame, including the injected anchor, contributes to the loss.
    Full,
    /// The anchor frame is excluded.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch: usize,
    pub steps_pretrain: usize,
    pub steps_finetune: usize,
    pub grad_clip: f64,
    pub cond_drop: f64,
    pub anchor_loss: AnchorLoss,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_pretrain: 3e-4,
            lr_finetune: 1e-4,
            batch: 16,
            steps_pretrain: 20_000,
            steps_finetune: 6_000,
            grad_clip: 1.0,
            cond_drop: 0.1,
            anchor_loss: AnchorLoss::Full,
            lora_rank: 8,
            lora_alpha: 8.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune), ("eps", self.eps)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::format(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.cond_drop) {
            return Err(Error::format("cond_drop", format!("must lie in [0, 1), got {}", self.cond_drop)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::format("beta1", "betas must lie in [0, 1)"));
        }
        if self.batch == 0 || self.lora_rank == 0 || self.log_every == 0 {
            return Err(Error::format("batch", "batch, lora_rank and log_every must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::format("grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// One supervised example for the velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub z_t: Array4<T>,
    pub t_vec: Vec<T>,
    pub target: Array4<T>,
    pub loss_mask: Vec<bool>,
    pub tokens: TokenSequence,
    pub anchor_index: Option<usize>,
}

fn gaussian_like<T: Real>(shape: (usize, usize, usize, usize), rng: &mut Rng) -> Array4<T> {
    Array4::from_shape_simple_fn(shape, || T::lit(rng::normal(rng)))
}

fn maybe_drop(tokens: &TokenSequence, cond_drop: f64, rng: &mut Rng) -> TokenSequence {
    if rng.gen::<f64>() < cond_drop {
        TokenSequence::empty()
    } else {
        tokens.clone()
    }
}

/// Builds `(data, ε)` and draws `t`; shared by both constructors.
fn draw<T: Real>(video: &Video, rng: &mut Rng) -> (Array4<T>, Array4<T>, T) {
    let data = video.mapv(|p| T::lit(2.0 * p as f64 - 1.0));
    let eps = gaussian_like(data.dim(), rng);
    let t = T::lit(rng.gen::<f64>());
    (data, eps, t)
}

fn interpolate<T: Real>(data: &Array4<T>, eps: &Array4<T>, t: T) -> Array4<T> {
    let mut z = data.mapv(|d| (T::one() - t) * d);
    z.scaled_add(t, eps);
    z
}

/// Plain flow-matching example: one shared `t` for every frame.
pub fn make_pretrain_example<T: Real>(
    video: &Video,
    tokens: &TokenSequence,
    cond_drop: f64,
    rng: &mut Rng,
) -> TrainingExample<T> {
    let (data, eps, t) = draw::<T>(video, rng);
    example_at(&data, &eps, t, None, AnchorLoss::Full, maybe_drop(tokens, cond_drop, rng))
}

/// Anchor-grounding example: frame `k` is replaced by its clean latent and
/// pinned to `t = 0`; all other frames share one noise level.
pub fn make_anchor_example<T: Real>(
    video: &Video,
    tokens: &TokenSequence,
    policy: AnchorLoss,
    cond_drop: f64,
    rng: &mut Rng,
) -> TrainingExample<T> {
    let frames = video.dim().0;
    let k = rng.gen_range(0..frames);
    let (data, eps, t) = draw::<T>(video, rng);
    example_at(&data, &eps, t, Some(k), policy, maybe_drop(tokens, cond_drop, rng))
}

/// Deterministic core of both constructors, exposed for tests.
pub fn example_at<T: Real>(
    data: &Array4<T>,
    eps: &Array4<T>,
    t: T,
    anchor: Option<usize>,
    policy: AnchorLoss,
    tokens: TokenSequence,
) -> TrainingExample<T> {
    let frames = data.dim().0;
    let mut z_t = interpolate(data, eps, t);
    let mut t_vec = vec![t; frames];
    let mut loss_mask = vec![true; frames];
    if let Some(k) = anchor {
        z_t.index_axis_mut(Axis(0), k).assign(&data.index_axis(Axis(0), k));
        t_vec[k] = T::zero();
        if policy == AnchorLoss::Masked {
            loss_mask[k] = false;
        }
    }
    let target = data - eps;
    TrainingExample { z_t, t_vec, target, loss_mask, tokens, anchor_index: anchor }
}

/// Mean squared error over the entries of unmasked frames.
pub fn flow_loss<T: Real>(v_hat: &Array4<T>, target: &Array4<T>, loss_mask: &[bool]) -> Result<f64> {
    check_loss_shapes(v_hat, target, loss_mask)?;
    let per_frame = v_hat.len() / loss_mask.len().max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (f, &m) in loss_mask.iter().enumerate() {
        if m {
            let a = v_hat.index_axis(Axis(0), f);
            let b = target.index_axis(Axis(0), f);
            sum += a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>();
            count += per_frame;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of [`flow_loss`] with respect to `v_hat`.
pub fn flow_loss_grad<T: Real>(v_hat: &Array4<T>, target: &Array4<T>, loss_mask: &[bool]) -> Result<Array4<T>> {
    check_loss_shapes(v_hat, target, loss_mask)?;
    let per_frame = v_hat.len() / loss_mask.len().max(1);
    let count = loss_mask.iter().filter(|&&m| m).count() * per_frame;
    let mut g = (v_hat - target) * T::lit(2.0 / count.max(1) as f64);
    for (f, &m) in loss_mask.iter().enumerate() {
        if !m {
            g.index_axis_mut(Axis(0), f).fill(T::zero());
        }
    }
    Ok(g)
}

fn check_loss_shapes<T: Real>(v_hat: &Array4<T>, target: &Array4<T>, mask: &[bool]) -> Result<()> {
    if v_hat.dim() != target.dim() || v_hat.dim().0 != mask.len() {
        return Err(Error::Shape(format!(
            "loss: prediction {:?}, target {:?}, mask {}",
            v_hat.dim(),
            target.dim(),
            mask.len()
        )));
    }
    Ok(())
}

/// Loss and gradients for one example.
pub fn example_grads<T: Real>(net: &Net<'_, T>, ex: &TrainingExample<T>) -> Result<(f64, Grads<T>)> {
    let x = net.patchify(ex.z_t.view())?;
    let (y, cache) = net.forward_cached(x.view(), &ex.t_vec, &ex.tokens)?;
    let v_hat = net.unpatchify(y.view());
    let loss = flow_loss(&v_hat, &ex.target, &ex.loss_mask)?;
    let d_v = flow_loss_grad(&v_hat, &ex.target, &ex.loss_mask)?;
    let d_y = net.patchify(d_v.view())?;
    Ok((loss, net.backward(&cache, &d_y)))
}

/// Anything Adam can update: an ordered list of named matrices.
pub trait ParamSet<T: Real>: Clone + Send + Sync {
    fn tensors(&self) -> Vec<(String, &Array2<T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<T>)>;
    fn zeros_like(&self) -> Self;

    fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    fn scale(&mut self, s: T) {
        for (_, a) in self.tensors_mut() {
            a.mapv_inplace(|x| x * s);
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Real> ParamSet<T> for Params<T> {
    fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        Params::tensors(self)
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        Params::tensors_mut(self)
    }
    fn zeros_like(&self) -> Self {
        Params::zeros_like(self)
    }
}

impl<T: Real> ParamSet<T> for LoraAdapters<T> {
    fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        LoraAdapters::tensors(self)
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        LoraAdapters::tensors_mut(self)
    }
    fn zeros_like(&self) -> Self {
        LoraAdapters::zeros_like(self)
    }
}

/// Adam with global L2 gradient clipping.
pub struct Adam<P> {
    m: P,
    v: P,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
}

impl<P> Adam<P> {
    pub fn new<T: Real>(like: &P, cfg: &TrainConfig) -> Self
    where
        P: ParamSet<T>,
    {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip: cfg.grad_clip,
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn update<T: Real>(&mut self, params: &mut P, grads: &mut P, lr: f64) -> f64
    where
        P: ParamSet<T>,
    {
        let norm = grads.l2_norm();
        if norm > self.clip {
            grads.scale(T::lit(self.clip / norm));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        norm
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<C> {
    pub checkpoint: C,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub log: Vec<LogRow>,
}

impl<C> TrainOutcome<C> {
    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_endpoints(&self, window: usize) -> (f64, f64) {
        smoothed_endpoints(&self.losses, window)
    }
}

pub fn smoothed_endpoints(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,loss,lr,wallclock_s\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:e},{:.3}\n", r.step, r.loss, r.lr, r.wallclock_s));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Data order: each epoch is a seeded permutation of the training ids.
struct BatchPlan {
    ids: Vec<usize>,
    seed: u64,
    batch: usize,
}

impl BatchPlan {
    fn batch(&self, step: usize) -> Vec<usize> {
        let n = self.ids.len();
        (0..self.batch)
            .map(|slot| {
                let pos = step * self.batch + slot;
                let epoch = (pos / n) as u64;
                let mut order = self.ids.clone();
                order.shuffle(&mut rng::stream(self.seed, &[0xe90c, epoch]));
                order[pos % n]
            })
            .collect()
    }
}

fn cached_tokens(dataset: &Dataset) -> Result<Vec<TokenSequence>> {
    dataset
        .index
        .entries
        .iter()
        .map(|e| prompt::tokenize(&prompt::serialize_prompt(&e.ast()?)))
        .collect()
}

/// Progress hook: `(step, mean batch loss)`.
pub type Progress<'a> = Option<&'a (dyn Fn(usize, f64) + Sync)>;

/// Stage 1: flow-matching pretraining of all base weights.
pub fn pretrain_t2v<T: Real>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<TrainOutcome<Checkpoint<T>>> {
    model_cfg.validate()?;
    cfg.validate()?;
    let mut params = Params::<T>::init(model_cfg, seed);
    let mut adam = Adam::new(&params, cfg);
    let tokens = cached_tokens(dataset)?;
    let plan = BatchPlan { ids: dataset.train_ids(), seed, batch: cfg.batch };
    if plan.ids.is_empty() {
        return Err(Error::Count { needed: 1, got: 0 });
    }
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps_pretrain);
    let mut log = Vec::new();
    for step in 0..cfg.steps_pretrain {
        let ids = plan.batch(step);
        let net = Net::new(model_cfg, &params, None);
        let per_example: Vec<(f64, Params<T>)> = ids
            .par_iter()
            .enumerate()
            .map(|(slot, &id)| {
                let mut r = rng::stream(seed, &[0x97e7, step as u64, slot as u64]);
                let ex = make_pretrain_example::<T>(&dataset.videos[id], &tokens[id], cfg.cond_drop, &mut r);
                example_grads(&net, &ex).map(|(l, g)| (l, g.base))
            })
            .collect::<Result<_>>()?;
        let (loss, mut grads) = reduce_batch(per_example);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adam.update(&mut params, &mut grads, cfg.lr_pretrain);
        losses.push(loss);
        record(&mut log, &losses, step, cfg.log_every, cfg.lr_pretrain, &start);
        if let Some(p) = progress {
            p(step, loss);
        }
    }
    if !params.all_finite() {
        return Err(Error::Divergence { step: cfg.steps_pretrain, loss: f64::NAN });
    }
    let final_loss = smoothed_endpoints(&losses, (cfg.steps_pretrain / 10).max(1)).1;
    let meta = CheckpointMeta {
        kind: "base".into(),
        steps: Some(cfg.steps_pretrain),
        seed: Some(seed),
        final_loss: Some(final_loss),
        ..Default::default()
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { config: model_cfg.clone(), meta, params: Some(params), adapters: None },
        losses,
        log,
    })
}

/// Stage 2: anchor-grounding finetuning. Base weights stay frozen; only the
/// adapters are trained.
pub fn finetune_anchor<T: Real>(
    base: &Checkpoint<T>,
    base_hash: &str,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<TrainOutcome<Checkpoint<T>>> {
    cfg.validate()?;
    let model_cfg = &base.config;
    let params = base.params.as_ref().ok_or_else(|| Error::format("params", "base checkpoint has no weights"))?;
    let mut lora = LoraAdapters::init(params, cfg.lora_rank, cfg.lora_alpha, seed);
    let mut adam = Adam::new(&lora, cfg);
    let tokens = cached_tokens(dataset)?;
    let plan = BatchPlan { ids: dataset.train_ids(), seed: seed ^ 0xf1e7, batch: cfg.batch };
    if plan.ids.is_empty() {
        return Err(Error::Count { needed: 1, got: 0 });
    }
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps_finetune);
    let mut log = Vec::new();
    for step in 0..cfg.steps_finetune {
        let ids = plan.batch(step);
        let net = Net::new(model_cfg, params, Some(&lora));
        let per_example: Vec<(f64, LoraAdapters<T>)> = ids
            .par_iter()
            .enumerate()
            .map(|(slot, &id)| {
                let mut r = rng::stream(seed, &[0xa9c4, step as u64, slot as u64]);
                let ex = make_anchor_example::<T>(
                    &dataset.videos[id],
                    &tokens[id],
                    cfg.anchor_loss,
                    cfg.cond_drop,
                    &mut r,
                );
                example_grads(&net, &ex).map(|(l, g)| (l, g.lora.expect("adapters present")))
            })
            .collect::<Result<_>>()?;
        let (loss, mut grads) = reduce_batch(per_example);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adam.update(&mut lora, &mut grads, cfg.lr_finetune);
        losses.push(loss);
        record(&mut log, &losses, step, cfg.log_every, cfg.lr_finetune, &start);
        if let Some(p) = progress {
            p(step, loss);
        }
    }
    let final_loss = smoothed_endpoints(&losses, (cfg.steps_finetune / 10).max(1)).1;
    let meta = CheckpointMeta {
        kind: "lora".into(),
        base_hash: Some(base_hash.to_owned()),
        lora_rank: Some(lora.rank),
        lora_alpha: Some(lora.alpha),
        steps: Some(cfg.steps_finetune),
        seed: Some(seed),
        final_loss: Some(final_loss),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { config: model_cfg.clone(), meta, params: None, adapters: Some(lora) },
        losses,
        log,
    })
}

/// Convenience wrapper reading the base hash from disk.
pub fn finetune_from_file<T: Real>(
    base_path: &Path,
    base: &Checkpoint<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<TrainOutcome<Checkpoint<T>>> {
    let h = base_hash(base_path)?;
    finetune_anchor(base, &h, dataset, cfg, seed, progress)
}

/// Sums per-example gradients in slot order and averages them.
fn reduce_batch<T: Real, P: ParamSet<T>>(items: Vec<(f64, P)>) -> (f64, P) {
    let n = items.len();
    let mut iter = items.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        acc.add_assign(&g);
    }
    acc.scale(T::lit(1.0 / n as f64));
    (loss / n as f64, acc)
}

fn record(log: &mut Vec<LogRow>, losses: &[f64], step: usize, every: usize, lr: f64, start: &Instant) {
    if (step + 1) % every == 0 || step + 1 == 1 {
        let from = losses.len().saturating_sub(every);
        let window = &losses[from..];
        log.push(LogRow {
            step: step + 1,
            loss: window.iter().sum::<f64>() / window.len() as f64,
            lr,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn video(seed: u64) -> Video {
        let mut r = rng::stream(seed, &[]);
        let ast = prompt::random_ast(&mut r);
        crate::scene::simulate(&ast, seed).unwrap_or_else(|_| Video::from_elem((8, 32, 32, 3), 0.5))
    }

    fn data_eps(seed: u64) -> (Array4<f64>, Array4<f64>) {
        let v = video(seed);
        let data = v.mapv(|p| 2.0 * p as f64 - 1.0);
        let mut r = rng::stream(seed, &[1]);
        (data, gaussian_like((8, 32, 32, 3), &mut r))
    }

    #[test]
    fn interpolant_endpoints() {
        let (data, eps) = data_eps(1);
        let toks = TokenSequence::empty();
        let e0 = example_at(&data, &eps, 0.0, None, AnchorLoss::Full, toks.clone());
        assert_eq!(e0.z_t, data);
        let e1 = example_at(&data, &eps, 1.0, None, AnchorLoss::Full, toks.clone());
        assert_eq!(e1.z_t, eps);
        let a0 = example_at(&data, &eps, 0.0, Some(3), AnchorLoss::Full, toks.clone());
        assert_eq!(a0.z_t, data);
        let a1 = example_at(&data, &eps, 1.0, Some(3), AnchorLoss::Full, toks);
        for f in 0..8 {
            let expect = if f == 3 { data.index_axis(Axis(0), f) } else { eps.index_axis(Axis(0), f) };
            assert_eq!(a1.z_t.index_axis(Axis(0), f), expect);
        }
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let (data, eps) = data_eps(2);
        let ex = example_at(&data, &eps, 0.37, Some(1), AnchorLoss::Full, TokenSequence::empty());
        assert_eq!(flow_loss(&ex.target, &ex.target, &ex.loss_mask).unwrap(), 0.0);
        for mask_bits in 0u32..256 {
            let mask: Vec<bool> = (0..8).map(|i| mask_bits >> i & 1 == 1).collect();
            assert_eq!(flow_loss(&ex.target, &ex.target, &mask).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_offset_gives_unit_loss() {
        let (data, eps) = data_eps(3);
        let target = &data - &eps;
        let shifted = &target + 1.0;
        assert_eq!(flow_loss(&shifted, &target, &[true; 8]).unwrap(), 1.0);
    }

    #[test]
    fn masked_frame_is_ignored() {
        let (data, eps) = data_eps(4);
        let target = &data - &eps;
        let mut mask = [true; 8];
        mask[5] = false;
        let mut v = target.clone();
        v.index_axis_mut(Axis(0), 0).mapv_inplace(|x| x + 0.5);
        let base = flow_loss(&v, &target, &mask).unwrap();
        v.index_axis_mut(Axis(0), 5).mapv_inplace(|x| x * 100.0 - 7.0);
        assert_eq!(flow_loss(&v, &target, &mask).unwrap(), base);
        let g = flow_loss_grad(&v, &target, &mask).unwrap();
        assert!(g.index_axis(Axis(0), 5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = Array4::<f64>::zeros((8, 32, 32, 3));
        let b = Array4::<f64>::zeros((7, 32, 32, 3));
        assert!(matches!(flow_loss(&a, &b, &[true; 8]), Err(Error::Shape(_))));
        assert!(matches!(flow_loss(&a, &a, &[true; 7]), Err(Error::Shape(_))));
    }

    #[test]
    fn anchor_frame_is_clean_and_pinned() {
        let v = video(5);
        let toks = TokenSequence::empty();
        for s in 0..50 {
            let mut r = rng::stream(s, &[]);
            let ex = make_anchor_example::<f32>(&v, &toks, AnchorLoss::Masked, 0.0, &mut r);
            let k = ex.anchor_index.unwrap();
            let data_k = v.index_axis(Axis(0), k).mapv(|p| 2.0 * p - 1.0);
            assert_eq!(ex.z_t.index_axis(Axis(0), k), data_k);
            assert_eq!(ex.t_vec.iter().filter(|&&t| t == 0.0).count(), 1);
            assert_eq!(ex.t_vec[k], 0.0);
            assert!(!ex.loss_mask[k]);
            assert_eq!(ex.loss_mask.iter().filter(|&&m| m).count(), 7);
            let t = ex.t_vec[(k + 1) % 8];
            assert!(ex.t_vec.iter().enumerate().all(|(j, &x)| j == k || x == t));
        }
    }

    #[test]
    fn anchor_index_is_uniform() {
        let v = Video::from_elem((8, 32, 32, 3), 0.5);
        let toks = TokenSequence::empty();
        let n = 10_000;
        let mut counts = [0usize; 8];
        for s in 0..n {
            let mut r = rng::stream(77, &[s]);
            // only the index draw matters; it is the first draw
            let k = r.gen_range(0..8);
            counts[k] += 1;
            if s < 20 {
                let mut r2 = rng::stream(77, &[s]);
                let ex = make_anchor_example::<f32>(&v, &toks, AnchorLoss::Full, 0.0, &mut r2);
                assert_eq!(ex.anchor_index, Some(k));
            }
        }
        let p = 1.0 / 8.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn cond_drop_rate() {
        let v = Video::from_elem((8, 32, 32, 3), 0.5);
        let toks = prompt::tokenize("red square at center").unwrap();
        let mut r = rng::stream(5, &[]);
        let dropped = (0..2000)
            .filter(|_| make_pretrain_example::<f32>(&v, &toks, 0.1, &mut r).tokens.is_unconditional())
            .count();
        assert!((150..250).contains(&dropped), "{dropped}");
        let mut r = rng::stream(5, &[]);
        assert!((0..200).all(|_| !make_pretrain_example::<f32>(&v, &toks, 0.0, &mut r).tokens.is_unconditional()));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { cond_drop: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Format { field, .. }) if field == "cond_drop"));
        let bad = TrainConfig { lr_pretrain: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_plan_covers_each_epoch() {
        let plan = BatchPlan { ids: (0..10).collect(), seed: 3, batch: 5 };
        let mut seen: Vec<usize> = (0..2).flat_map(|s| plan.batch(s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(plan.batch(3), plan.batch(3));
    }
}
