use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use fvg_core::container::write_tensor;
use fvg_core::model::{base_hash, load_checkpoint, save_adapters, save_checkpoint, Checkpoint, Precision, Real};
use fvg_core::prompt::{parse_prompt, reduce_to_first_frame, serialize_prompt};
use fvg_core::rng::derive_seed;
use fvg_core::sample::{Mode, VideoModel};
use fvg_core::scene::{frame_to_ppm, gen_dataset, load_dataset, load_index, Split};
use fvg_core::train::{finetune_anchor, pretrain_t2v, LogRow, TrainOutcome};
use fvg_core::metrics::{PromptScores, ScoreReport};
use ndarray::Axis;

use crate::config::{ConfigError, RunConfig};
use crate::engine::{Anchor, Engine, Job};
use crate::manifest::{cell, Command, Csv, RunManifest};
use crate::studies::{score_csv, EvalPrompt, Study, StudyName, StudyResult};

pub const BASE_FILE: &str = "base.fvgc";
pub const LORA_FILE: &str = "lora.fvgc";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(fvg_core::Error::MissingArtifact(path.to_path_buf()).into());
    }
    Ok(())
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
}

/// Training log without the wall-clock column, so reruns match byte for byte.
fn log_csv(rows: &[LogRow], run_id: &str) -> String {
    let mut c = Csv::new(&["step", "loss", "lr"]);
    for r in rows {
        c.row(&[r.step.to_string(), cell(Some(r.loss)), format!("{:e}", r.lr)]);
    }
    c.finish(run_id)
}

/// Prompts of the held-out split, capped at `study.prompts`.
pub fn eval_prompts(data: &Path, config: &RunConfig) -> anyhow::Result<Vec<EvalPrompt>> {
    let index = load_index(data)?;
    let prompts = index
        .split(Split::Eval)
        .take(config.study.prompts)
        .map(EvalPrompt::from_entry)
        .collect::<fvg_core::Result<Vec<_>>>()?;
    if prompts.is_empty() {
        return Err(ConfigError(format!("{} has no held-out prompts", data.display())).into());
    }
    Ok(prompts)
}

fn load_model(ckpt: &Path, lora: Option<&Path>, mode: Option<Mode>) -> anyhow::Result<VideoModel> {
    require(ckpt)?;
    if let Some(l) = lora {
        require(l)?;
    }
    if mode.is_some_and(Mode::is_anchored) && lora.is_none() {
        return Err(ConfigError(format!("mode {} needs --lora", mode.unwrap())).into());
    }
    Ok(VideoModel::load(ckpt, lora)?)
}

pub fn execute(g: &Globals, command: Command) -> anyhow::Result<RunManifest> {
    std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    let mut m = RunManifest::new(command.clone(), g.seed, g.config.clone());
    let start = Instant::now();
    match &command {
        Command::GenData => gen_data(g, &mut m)?,
        Command::Pretrain { data } => pretrain(g, data, &mut m)?,
        Command::FinetuneAnchor { data, base } => finetune(g, data, base, &mut m)?,
        Command::Sample { mode, ckpt, lora, prompt, steps, cfg_scale, anchor_seed } => {
            sample(g, *mode, ckpt, lora.as_deref(), prompt, *steps, *cfg_scale, *anchor_seed, &mut m)?
        }
        Command::Eval { data, ckpt, lora, mode, steps } => eval(g, data, ckpt, lora.as_deref(), *mode, *steps, &mut m)?,
        Command::Study { name, data, ckpt, lora } => {
            let model = load_model(ckpt, lora.as_deref(), Some(Mode::Factorized))?;
            let engine = Engine::new(model);
            study(g, &engine, *name, data, &mut m)?;
        }
    }
    m.wallclock_s.insert(command.name().into(), start.elapsed().as_secs_f64());
    m.write(&g.out)?;
    Ok(m)
}

/// Re-executes a recorded run into `out`.
pub fn rerun(manifest: &Path, out: &Path) -> anyhow::Result<RunManifest> {
    require(manifest)?;
    let m = RunManifest::read(manifest)?;
    m.config.validate()?;
    let g = Globals { config: m.config.clone(), seed: m.master_seed, out: out.to_path_buf() };
    execute(&g, m.command)
}

fn gen_data(g: &Globals, m: &mut RunManifest) -> anyhow::Result<()> {
    let index = gen_dataset(g.config.data.n, g.config.data.seed, &g.out)?;
    for (k, f) in [("videos", "videos.fvt"), ("prompts", "prompts.jsonl"), ("dataset_manifest", "manifest.json")] {
        m.outputs.insert(k.into(), f.into());
    }
    eprintln!("wrote {} videos to {}", index.entries.len(), g.out.display());
    Ok(())
}

fn progress(label: &'static str, every: usize) -> impl Fn(usize, f64) + Sync {
    move |step, loss| {
        if (step + 1) % every == 0 {
            eprintln!("{label} step {} loss {loss:.4}", step + 1);
        }
    }
}

fn save_training<T: Real>(
    g: &Globals,
    m: &mut RunManifest,
    outcome: &TrainOutcome<Checkpoint<T>>,
    file: &str,
    save: impl FnOnce(&Checkpoint<T>, &Path) -> fvg_core::Result<()>,
) -> anyhow::Result<()> {
    save(&outcome.checkpoint, &g.out.join(file))?;
    write(&g.out, TRAIN_LOG, log_csv(&outcome.log, &m.run_id))?;
    m.outputs.insert("checkpoint".into(), file.into());
    m.outputs.insert("train_log".into(), TRAIN_LOG.into());
    let (a, b) = outcome.smoothed_endpoints(100);
    eprintln!("smoothed loss {a:.4} -> {b:.4}");
    Ok(())
}

fn pretrain(g: &Globals, data: &Path, m: &mut RunManifest) -> anyhow::Result<()> {
    let dataset = load_dataset(data)?;
    let cfg = &g.config;
    let seed = derive_seed(g.seed, &[1]);
    let p = progress("pretrain", cfg.train.log_every);
    match cfg.model.precision {
        Precision::F32 => {
            let o = pretrain_t2v::<f32>(&dataset, &cfg.model, &cfg.train, seed, Some(&p))?;
            save_training(g, m, &o, BASE_FILE, save_checkpoint)
        }
        Precision::F64 => {
            let o = pretrain_t2v::<f64>(&dataset, &cfg.model, &cfg.train, seed, Some(&p))?;
            save_training(g, m, &o, BASE_FILE, save_checkpoint)
        }
    }
}

fn finetune(g: &Globals, data: &Path, base: &Path, m: &mut RunManifest) -> anyhow::Result<()> {
    require(base)?;
    let dataset = load_dataset(data)?;
    let loaded = load_checkpoint(base)?;
    let hash = base_hash(base)?;
    let cfg = &g.config;
    let seed = derive_seed(g.seed, &[2]);
    let p = progress("finetune", cfg.train.log_every);
    fn run<T: Real>(
        g: &Globals,
        m: &mut RunManifest,
        base: Checkpoint<T>,
        hash: &str,
        dataset: &fvg_core::scene::Dataset,
        seed: u64,
        p: &(dyn Fn(usize, f64) + Sync),
    ) -> anyhow::Result<()> {
        let o = finetune_anchor(&base, hash, dataset, &g.config.train, seed, Some(p))?;
        let meta = o.checkpoint.meta.clone();
        save_training(g, m, &o, LORA_FILE, |ck, path| {
            save_adapters(ck.adapters.as_ref().expect("adapters"), &ck.config, hash, meta, path)
        })
    }
    match cfg.model.precision {
        Precision::F32 => run(g, m, loaded.into_precision::<f32>(), &hash, &dataset, seed, &p),
        Precision::F64 => run(g, m, loaded.into_precision::<f64>(), &hash, &dataset, seed, &p),
    }
}

#[allow(clippy::too_many_arguments)]
fn sample(
    g: &Globals,
    mode: Mode,
    ckpt: &Path,
    lora: Option<&Path>,
    prompt: &str,
    steps: usize,
    cfg_scale: f64,
    anchor_seed: u64,
    m: &mut RunManifest,
) -> anyhow::Result<()> {
    let ast = parse_prompt(prompt)?;
    let engine = Engine::new(load_model(ckpt, lora, Some(mode))?);
    let anchor = if mode.is_anchored() { Anchor::Reduced(anchor_seed) } else { Anchor::None };
    let job = Job::new(&ast, mode, anchor, g.seed, steps, cfg_scale);
    let video = engine.run(std::slice::from_ref(&job))?.remove(0);
    let shape: Vec<usize> = video.shape().to_vec();
    write_tensor(&g.out.join("video.fvt"), &shape, video.as_slice().expect("contiguous"))?;
    m.outputs.insert("video".into(), "video.fvt".into());
    for (i, frame) in video.axis_iter(Axis(0)).enumerate() {
        let name = format!("frame_{i:03}.ppm");
        write(&g.out, &name, frame_to_ppm(frame))?;
        m.outputs.insert(format!("frame_{i:03}"), name);
    }
    if let Some(a) = job.anchor_frame()? {
        write(&g.out, "anchor.ppm", frame_to_ppm(a.view()))?;
        m.outputs.insert("anchor".into(), "anchor.ppm".into());
    }
    let meta = serde_json::json!({
        "prompt": serialize_prompt(&ast),
        "reduced_prompt": serialize_prompt(&reduce_to_first_frame(&ast)),
        "mode": mode,
        "steps": steps,
        "cfg_scale": cfg_scale,
        "seed": g.seed,
        "anchor_seed": mode.is_anchored().then_some(anchor_seed),
        "shape": shape,
    });
    write(&g.out, "meta.json", serde_json::to_string_pretty(&meta)? + "\n")?;
    m.outputs.insert("meta".into(), "meta.json".into());
    Ok(())
}

fn eval(
    g: &Globals,
    data: &Path,
    ckpt: &Path,
    lora: Option<&Path>,
    mode: Mode,
    steps: usize,
    m: &mut RunManifest,
) -> anyhow::Result<()> {
    let prompts = eval_prompts(data, &g.config)?;
    let engine = Engine::new(load_model(ckpt, lora, Some(mode))?);
    let study = Study::new(&engine, prompts, &g.config, g.seed);
    let rows = study.score_mode(mode, steps)?;
    write(&g.out, "scores.csv", score_csv(&rows, &m.run_id))?;
    let items: Vec<PromptScores> = rows.iter().map(|r| r.scores).collect();
    let report = ScoreReport::aggregate(&items, g.config.study.seeds.clone());
    write(&g.out, "summary.json", serde_json::to_string_pretty(&report)? + "\n")?;
    m.outputs.insert("scores".into(), "scores.csv".into());
    m.outputs.insert("summary".into(), "summary.json".into());
    eprintln!("{mode} overall {:.4} over {} videos", report.overall, report.samples);
    Ok(())
}

/// Runs one study on a (possibly shared) engine and writes its CSVs.
pub fn study(
    g: &Globals,
    engine: &Engine,
    name: StudyName,
    data: &Path,
    m: &mut RunManifest,
) -> anyhow::Result<StudyResult> {
    let prompts = eval_prompts(data, &g.config)?;
    let result = Study::new(engine, prompts, &g.config, g.seed).run(name)?;
    for (file, text) in result.files(name, &m.run_id) {
        write(&g.out, &file, text)?;
        m.outputs.insert(file.trim_end_matches(".csv").into(), file);
    }
    m.wallclock_s.extend(result.timings());
    Ok(result)
}

/// Maps an error chain to the process exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<fvg_core::Error>() {
            return match core {
                fvg_core::Error::MissingArtifact(_) => 3,
                fvg_core::Error::Divergence { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let missing: anyhow::Error = fvg_core::Error::MissingArtifact("x".into()).into();
        assert_eq!(exit_code(&missing), 3);
        let div: anyhow::Error = fvg_core::Error::Divergence { step: 3, loss: f64::NAN }.into();
        assert_eq!(exit_code(&div), 4);
        let cfg: anyhow::Error = ConfigError("bad".into()).into();
        assert_eq!(exit_code(&cfg.context("loading")), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn log_has_no_timing_column() {
        let rows = [LogRow { step: 1, loss: 0.5, lr: 1e-4, wallclock_s: 3.0 }];
        assert_eq!(log_csv(&rows, "ab"), "step,loss,lr\n1,0.500000,1e-4\n# run_id=ab\n");
    }
}
