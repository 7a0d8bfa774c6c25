use ndarray::{Array4, Axis};
use rand::seq::index::sample;

use super::{LoraAdapters, ModelConfig, Net, Params};
use crate::error::Result;
use crate::prompt::{serialize_prompt, tokenize};
use crate::rng;
use crate::scene::simulate;
use crate::train::{example_grads, make_pretrain_example, ParamSet, TrainingExample};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Upper bound on probed coordinates per check.
pub const MAX_COORDS: usize = 2048;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index, analytic, numeric, relative error)` per probed coordinate.
    pub coords: Vec<(String, usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, usize, f64, f64, f64)> {
        self.coords.iter().max_by(|a, b| a.4.total_cmp(&b.4))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn probe_example(probe_seed: u64) -> Result<TrainingExample<f64>> {
    let (ast, jitter) = crate::scene::dataset_draw(probe_seed);
    let video = simulate(&ast, jitter)?;
    let tokens = tokenize(&serialize_prompt(&ast))?;
    let mut r = rng::stream(probe_seed, &[0x9c]);
    Ok(make_pretrain_example(&video, &tokens, 0.0, &mut r))
}

fn example_output(
    cfg: &ModelConfig,
    params: &Params<f64>,
    lora: Option<&LoraAdapters<f64>>,
    ex: &TrainingExample<f64>,
) -> Result<Array4<f64>> {
    super::forward(cfg, params, lora, ex.z_t.view(), &ex.t_vec, &ex.tokens)
}

/// `L(v₊) − L(v₋)` for the masked mean-squared loss, evaluated as
/// `mean((v₊ − v₋)(v₊ + v₋ − 2·target))`. Algebraically identical to the
/// difference of the two losses, but it never subtracts two O(1) numbers,
/// so it resolves gradients far below `ulp(L) / 2h`.
fn loss_difference(plus: &Array4<f64>, minus: &Array4<f64>, ex: &TrainingExample<f64>) -> f64 {
    let per_frame = plus.len() / ex.loss_mask.len();
    let mut acc = 0.0;
    let mut count = 0;
    for (f, &m) in ex.loss_mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (p, q, t) = (plus.index_axis(Axis(0), f), minus.index_axis(Axis(0), f), ex.target.index_axis(Axis(0), f));
        ndarray::Zip::from(&p).and(&q).and(&t).for_each(|&a, &b, &t| acc += (a - b) * (a + b - 2.0 * t));
        count += per_frame;
    }
    acc / count.max(1) as f64
}

fn probe<P: ParamSet<f64>>(
    set: &mut P,
    analytic: &P,
    n_coords: usize,
    probe_seed: u64,
    fault: Option<usize>,
    ex: &TrainingExample<f64>,
    mut output: impl FnMut(&P) -> Result<Array4<f64>>,
) -> Result<GradCheckReport> {
    let sizes: Vec<(String, usize)> = set.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut r = rng::stream(probe_seed, &[0xc00d]);
    let mut picks = sample(&mut r, total, n_coords.min(total).min(MAX_COORDS)).into_vec();
    picks.sort_unstable();
    let mut coords = Vec::with_capacity(picks.len());
    for (i, flat) in picks.into_iter().enumerate() {
        let (mut ti, mut off) = (0, flat);
        while off >= sizes[ti].1 {
            off -= sizes[ti].1;
            ti += 1;
        }
        let get = |p: &P| p.tensors()[ti].1.as_slice().expect("contiguous")[off];
        let mut a = get(analytic);
        if fault == Some(i) {
            a *= 2.0;
        }
        let orig = get(set);
        let set_to = |p: &mut P, v: f64| p.tensors_mut()[ti].1.as_slice_mut().expect("contiguous")[off] = v;
        set_to(set, orig + FD_STEP);
        let vp = output(set)?;
        set_to(set, orig - FD_STEP);
        let vm = output(set)?;
        set_to(set, orig);
        let n = loss_difference(&vp, &vm, ex) / (2.0 * FD_STEP);
        coords.push((sizes[ti].0.clone(), off, a, n, rel_error(a, n)));
    }
    let max_rel_error = coords.iter().map(|c| c.4).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, coords })
}

/// Compares backprop against central differences on up to [`MAX_COORDS`]
/// random base-parameter coordinates, using one random training example.
pub fn grad_check(cfg: &ModelConfig, params: &Params<f64>, probe_seed: u64) -> Result<f64> {
    Ok(grad_check_with(cfg, params, None, probe_seed, MAX_COORDS, None)?.max_rel_error)
}

/// Full-control variant. With `adapters`, the adapter coordinates are probed
/// instead of the base weights. `fault` doubles the analytic gradient of the
/// `fault`-th probed coordinate.
pub fn grad_check_with(
    cfg: &ModelConfig,
    params: &Params<f64>,
    adapters: Option<&LoraAdapters<f64>>,
    probe_seed: u64,
    n_coords: usize,
    fault: Option<usize>,
) -> Result<GradCheckReport> {
    let ex = probe_example(probe_seed)?;
    let net = Net::new(cfg, params, adapters);
    let (_, grads) = example_grads(&net, &ex)?;
    match adapters {
        None => {
            let mut p = params.clone();
            probe(&mut p, &grads.base, n_coords, probe_seed, fault, &ex, |p| example_output(cfg, p, None, &ex))
        }
        Some(l) => {
            let mut l = l.clone();
            let g = grads.lora.expect("adapter gradients");
            probe(&mut l, &g, n_coords, probe_seed, fault, &ex, |l| example_output(cfg, params, Some(l), &ex))
        }
    }
}
