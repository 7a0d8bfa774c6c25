use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use fvg_core::metrics::{
    decode_scene, diversity_of_features, extract_features, frechet_distance, motion_scores, PromptScores, ScoreReport,
    CATEGORIES,
};
use fvg_core::prompt::{rephrase, Motion, PromptAst};
use fvg_core::rng::derive_seed;
use fvg_core::sample::Mode;
use fvg_core::scene::{simulate_scenes, DatasetEntry, Video};
use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::engine::{Anchor, Engine, Job};
use crate::manifest::{cell, Csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyName {
    Diagnostic,
    Compbench,
    Steps,
    Diversity,
    AnchorSensitivity,
    NaiveAnchor,
}

impl StudyName {
    pub const ALL: [StudyName; 6] = [
        StudyName::Diagnostic,
        StudyName::Compbench,
        StudyName::Steps,
        StudyName::Diversity,
        StudyName::AnchorSensitivity,
        StudyName::NaiveAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyName::Diagnostic => "diagnostic",
            StudyName::Compbench => "compbench",
            StudyName::Steps => "steps",
            StudyName::Diversity => "diversity",
            StudyName::AnchorSensitivity => "anchor_sensitivity",
            StudyName::NaiveAnchor => "naive_anchor",
        }
    }
}

impl fmt::Display for StudyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StudyName::ALL.into_iter().find(|n| n.name() == s).ok_or_else(|| {
            let all: Vec<&str> = StudyName::ALL.iter().map(|n| n.name()).collect();
            format!("unknown study {s:?}; expected one of {}", all.join(", "))
        })
    }
}

/// A held-out prompt.
#[derive(Debug, Clone)]
pub struct EvalPrompt {
    pub id: usize,
    pub ast: PromptAst,
}

impl EvalPrompt {
    pub fn from_entry(e: &DatasetEntry) -> fvg_core::Result<Self> {
        Ok(Self { id: e.id, ast: e.ast()? })
    }
}

/// Everything a study needs: the sampler, the prompts and the seeds.
pub struct Study<'a> {
    pub engine: &'a Engine,
    pub prompts: Vec<EvalPrompt>,
    pub config: &'a RunConfig,
    pub master_seed: u64,
}

/// One scored video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub prompt_id: usize,
    pub seed: u64,
    pub mode: String,
    pub steps: usize,
    pub scores: PromptScores,
}

pub const SCORE_HEADER: [&str; 10] = [
    "prompt_id",
    "seed",
    "mode",
    "steps",
    "composition",
    "dynamic_attribute",
    "motion_binding",
    "motion_order",
    "numeracy",
    "overall",
];

pub fn score_csv(rows: &[ScoreRow], run_id: &str) -> String {
    let mut c = Csv::new(&SCORE_HEADER);
    for r in rows {
        let s = &r.scores;
        c.row(&[
            r.prompt_id.to_string(),
            r.seed.to_string(),
            r.mode.clone(),
            r.steps.to_string(),
            cell(Some(s.composition)),
            cell(s.dynamic_attribute),
            cell(s.motion_binding),
            cell(s.motion_order),
            cell(Some(s.numeracy)),
            cell(Some(s.overall())),
        ]);
    }
    c.finish(run_id)
}

fn pct(new: f64, reference: f64) -> f64 {
    if reference.abs() < 1e-12 {
        0.0
    } else {
        100.0 * (new - reference) / reference
    }
}

fn signed_pct(v: f64) -> String {
    format!("{v:+.2}%")
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub mode: Mode,
    pub fid_frame0: f64,
    pub fvd_video: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub mode: String,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepsRow {
    pub mode: Mode,
    pub steps: usize,
    pub report: ScoreReport,
    /// Percent change of each category and of overall versus the reference step count.
    pub pct_change: [Option<f64>; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub mode: Mode,
    pub steps: usize,
    pub videos: usize,
    pub seconds_per_video: f64,
}

pub const DIVERSITY_SETTINGS: [&str; 3] = ["seeds", "single_image", "rephrasing"];

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityResult {
    /// `(prompt id, [seeds, single_image, rephrasing])`.
    pub per_prompt: Vec<(usize, [f64; 3])>,
    pub means: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    /// `(prompt id, category, std across anchors, std across t2v seeds)`.
    pub rows: Vec<(usize, &'static str, f64, f64)>,
    pub mean_std_anchors: f64,
    pub mean_std_seeds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveRow {
    pub setting: &'static str,
    pub n: usize,
    pub composition: f64,
    pub dynamic_attribute: Option<f64>,
    /// Fraction of turning objects found in frame 0 with their initial color, shape and cell.
    pub turn_color_match: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveResult {
    pub rows: [NaiveRow; 2],
    /// Static prompts produce identical scores in both settings.
    pub static_prompts_agree: bool,
}

/// Typed study outcome plus the CSV files it writes.
#[derive(Debug, Clone, PartialEq)]
pub enum StudyResult {
    Diagnostic(Vec<DiagnosticRow>),
    Compbench { rows: Vec<ScoreRow>, reports: Vec<ModeReport> },
    Steps { rows: Vec<StepsRow>, timing: Vec<TimingRow> },
    Diversity(DiversityResult),
    AnchorSensitivity(SensitivityResult),
    NaiveAnchor(NaiveResult),
}

impl<'a> Study<'a> {
    pub fn new(engine: &'a Engine, prompts: Vec<EvalPrompt>, config: &'a RunConfig, master_seed: u64) -> Self {
        Self { engine, prompts, config, master_seed }
    }

    pub fn sampler_seed(&self, prompt: usize, s: u64) -> u64 {
        derive_seed(self.master_seed, &[prompt as u64, s, 1])
    }

    /// Anchor jitter seed for `(prompt, s)`: the first candidate for which the
    /// full motion script stays in frame and contact-free, so the same seed
    /// also yields a valid ground-truth video and final-state scene.
    pub fn jitter_seed(&self, p: &EvalPrompt, s: u64) -> u64 {
        (0u64..)
            .map(|a| derive_seed(self.master_seed, &[p.id as u64, s, 2, a]))
            .find(|&j| simulate_scenes(&p.ast, j).is_ok_and(|sc| sc.iter().all(|x| !x.has_contact())))
            .expect("the dataset jitter is feasible, so some candidate is")
    }

    fn steps(&self) -> usize {
        self.config.sample.steps
    }

    fn cfg_scale(&self) -> f64 {
        self.config.sample.cfg_scale
    }

    pub fn job(&self, p: &EvalPrompt, mode: Mode, s: u64, steps: usize) -> Job {
        let anchor = if mode.is_anchored() { Anchor::Reduced(self.jitter_seed(p, s)) } else { Anchor::None };
        Job::new(&p.ast, mode, anchor, self.sampler_seed(p.id, s), steps, self.cfg_scale())
    }

    fn score(&self, jobs: &[(usize, u64, Job)]) -> fvg_core::Result<Vec<ScoreRow>> {
        let plain: Vec<Job> = jobs.iter().map(|j| j.2.clone()).collect();
        let videos = self.engine.run(&plain)?;
        Ok(jobs
            .par_iter()
            .zip(videos.par_iter())
            .map(|((pid, s, job), v)| ScoreRow {
                prompt_id: *pid,
                seed: *s,
                mode: job.mode.name().into(),
                steps: job.steps,
                scores: motion_scores(v.view(), &job.ast),
            })
            .collect())
    }

    /// Score rows for `mode` over every prompt and study seed.
    pub fn score_mode(&self, mode: Mode, steps: usize) -> fvg_core::Result<Vec<ScoreRow>> {
        let jobs: Vec<(usize, u64, Job)> = self
            .prompts
            .iter()
            .flat_map(|p| self.config.study.seeds.iter().map(move |&s| (p.id, s, self.job(p, mode, s, steps))))
            .collect();
        self.score(&jobs)
    }

    pub fn ground_truth_rows(&self) -> fvg_core::Result<Vec<ScoreRow>> {
        self.prompts
            .par_iter()
            .flat_map(|p| self.config.study.seeds.par_iter().map(move |&s| (p, s)))
            .map(|(p, s)| {
                let v = fvg_core::scene::simulate(&p.ast, self.jitter_seed(p, s))?;
                Ok(ScoreRow {
                    prompt_id: p.id,
                    seed: s,
                    mode: "ground_truth".into(),
                    steps: 0,
                    scores: motion_scores(v.view(), &p.ast),
                })
            })
            .collect()
    }

    pub fn run(&self, name: StudyName) -> fvg_core::Result<StudyResult> {
        match name {
            StudyName::Diagnostic => self.diagnostic().map(StudyResult::Diagnostic),
            StudyName::Compbench => self.compbench(),
            StudyName::Steps => self.steps_study(),
            StudyName::Diversity => self.diversity().map(StudyResult::Diversity),
            StudyName::AnchorSensitivity => self.sensitivity().map(StudyResult::AnchorSensitivity),
            StudyName::NaiveAnchor => self.naive().map(StudyResult::NaiveAnchor),
        }
    }

    /// Fréchet distances of generated frame 0 and whole videos against
    /// ground-truth simulations of the same prompts.
    pub fn diagnostic(&self) -> fvg_core::Result<Vec<DiagnosticRow>> {
        let n = self.config.study.diagnostic_samples;
        let slots: Vec<(&EvalPrompt, u64)> =
            (0..n).map(|i| (&self.prompts[i % self.prompts.len()], (i / self.prompts.len()) as u64)).collect();
        let gt: Vec<Video> = slots
            .par_iter()
            .map(|(p, r)| fvg_core::scene::simulate(&p.ast, self.jitter_seed(p, *r)))
            .collect::<fvg_core::Result<_>>()?;
        let proj = self.config.study.proj_seed;
        let features = |vs: &[&Video]| -> fvg_core::Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
            let frames: Vec<Video> = vs.iter().map(|v| v.slice(ndarray::s![0..1, .., .., ..]).to_owned()).collect();
            let f0 = extract_features(frames.iter().map(|f| f.as_slice().expect("contiguous")), proj)?;
            let fv = extract_features(vs.iter().map(|v| v.as_slice().expect("contiguous")), proj)?;
            Ok((f0, fv))
        };
        let gt_refs: Vec<&Video> = gt.iter().collect();
        let (gt0, gtv) = features(&gt_refs)?;
        let mut rows = Vec::new();
        for mode in [Mode::T2v, Mode::I2v, Mode::I2vText] {
            let jobs: Vec<Job> = slots.iter().map(|(p, r)| self.job(p, mode, *r, self.steps())).collect();
            let vids = self.engine.run(&jobs)?;
            let refs: Vec<&Video> = vids.iter().map(|v| v.as_ref()).collect();
            let (f0, fv) = features(&refs)?;
            rows.push(DiagnosticRow {
                mode,
                fid_frame0: frechet_distance(f0.view(), gt0.view())?,
                fvd_video: frechet_distance(fv.view(), gtv.view())?,
                n,
            });
        }
        Ok(rows)
    }

    pub fn compbench(&self) -> fvg_core::Result<StudyResult> {
        let seeds = self.config.study.seeds.clone();
        let mut rows = self.score_mode(Mode::T2v, self.steps())?;
        rows.extend(self.score_mode(Mode::Factorized, self.steps())?);
        rows.extend(self.ground_truth_rows()?);
        let reports = ["t2v", "factorized", "ground_truth"]
            .iter()
            .map(|m| {
                let items: Vec<PromptScores> = rows.iter().filter(|r| r.mode == *m).map(|r| r.scores).collect();
                ModeReport { mode: (*m).into(), report: ScoreReport::aggregate(&items, seeds.clone()) }
            })
            .collect();
        Ok(StudyResult::Compbench { rows, reports })
    }

    pub fn steps_study(&self) -> fvg_core::Result<StudyResult> {
        let steps = &self.config.study.steps;
        let mut rows = Vec::new();
        for mode in [Mode::T2v, Mode::Factorized] {
            let mut reference: Option<ScoreReport> = None;
            for &n in steps {
                let items: Vec<PromptScores> = self.score_mode(mode, n)?.into_iter().map(|r| r.scores).collect();
                let report = ScoreReport::aggregate(&items, self.config.study.seeds.clone());
                let base = reference.get_or_insert_with(|| report.clone()).clone();
                let mut pct_change = [None; 6];
                for (k, (a, b)) in report.categories().iter().zip(base.categories()).enumerate() {
                    pct_change[k] = a.zip(b).map(|(a, b)| pct(a, b));
                }
                pct_change[5] = Some(pct(report.overall, base.overall));
                rows.push(StepsRow { mode, steps: n, report, pct_change });
            }
        }
        // Wall-clock on a few fresh videos per setting (cached videos cost nothing).
        let probe = &self.prompts[0];
        let mut timing = Vec::new();
        for mode in [Mode::T2v, Mode::Factorized] {
            for &n in steps {
                let jobs: Vec<Job> = (0..2u64).map(|k| self.job(probe, mode, 1_000_000 + k, n)).collect();
                let t = Instant::now();
                self.engine.run(&jobs)?;
                timing.push(TimingRow {
                    mode,
                    steps: n,
                    videos: jobs.len(),
                    seconds_per_video: t.elapsed().as_secs_f64() / jobs.len() as f64,
                });
            }
        }
        Ok(StudyResult::Steps { rows, timing })
    }

    pub fn diversity(&self) -> fvg_core::Result<DiversityResult> {
        let k = self.config.study.diversity_videos as u64;
        let prompts: Vec<&EvalPrompt> = self.prompts.iter().take(self.config.study.diversity_prompts).collect();
        let mut per_prompt = Vec::new();
        for p in prompts {
            let fixed = self.jitter_seed(p, 0);
            let settings: [Vec<Job>; 3] = [
                (0..k).map(|s| self.job(p, Mode::Factorized, s, self.steps())).collect(),
                (0..k)
                    .map(|s| {
                        Job::new(&p.ast, Mode::Factorized, Anchor::Reduced(fixed), self.sampler_seed(p.id, s), self.steps(), self.cfg_scale())
                    })
                    .collect(),
                (0..k)
                    .map(|s| {
                        let text = rephrase(&p.ast, derive_seed(self.master_seed, &[p.id as u64, s, 4]));
                        self.job(p, Mode::T2v, s, self.steps()).with_text(text)
                    })
                    .collect(),
            ];
            let mut d = [0.0; 3];
            for (i, jobs) in settings.iter().enumerate() {
                let vids = self.engine.run(jobs)?;
                let f = extract_features(vids.iter().map(|v| v.as_slice().expect("contiguous")), self.config.study.proj_seed)?;
                d[i] = diversity_of_features(f.view())?;
            }
            per_prompt.push((p.id, d));
        }
        let means = [0, 1, 2].map(|i| mean(&per_prompt.iter().map(|r| r.1[i]).collect::<Vec<_>>()));
        Ok(DiversityResult { per_prompt, means })
    }

    pub fn sensitivity(&self) -> fvg_core::Result<SensitivityResult> {
        let a = self.config.study.anchors_per_prompt as u64;
        let prompts: Vec<&EvalPrompt> = self.prompts.iter().take(self.config.study.sensitivity_prompts).collect();
        let mut rows = Vec::new();
        for p in prompts {
            let fixed_seed = self.sampler_seed(p.id, 0);
            let anchored: Vec<(usize, u64, Job)> = (0..a)
                .map(|s| {
                    let job = Job::new(
                        &p.ast,
                        Mode::Factorized,
                        Anchor::Reduced(self.jitter_seed(p, s)),
                        fixed_seed,
                        self.steps(),
                        self.cfg_scale(),
                    );
                    (p.id, s, job)
                })
                .collect();
            let seeded: Vec<(usize, u64, Job)> = (0..a).map(|s| (p.id, s, self.job(p, Mode::T2v, s, self.steps()))).collect();
            let sa: Vec<PromptScores> = self.score(&anchored)?.into_iter().map(|r| r.scores).collect();
            let ss: Vec<PromptScores> = self.score(&seeded)?.into_iter().map(|r| r.scores).collect();
            for (k, name) in CATEGORIES.iter().enumerate() {
                let va: Vec<f64> = sa.iter().filter_map(|s| s.categories()[k]).collect();
                let vs: Vec<f64> = ss.iter().filter_map(|s| s.categories()[k]).collect();
                if !va.is_empty() && !vs.is_empty() {
                    rows.push((p.id, *name, std_dev(&va), std_dev(&vs)));
                }
            }
        }
        let mean_std_anchors = mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
        let mean_std_seeds = mean(&rows.iter().map(|r| r.3).collect::<Vec<_>>());
        Ok(SensitivityResult { rows, mean_std_anchors, mean_std_seeds })
    }

    pub fn naive(&self) -> fvg_core::Result<NaiveResult> {
        let seeds = self.config.study.seeds.clone();
        let mut out = Vec::new();
        let mut per_setting: Vec<Vec<(usize, PromptScores)>> = Vec::new();
        for (setting, naive) in [("reduced", false), ("naive", true)] {
            let jobs: Vec<Job> = self
                .prompts
                .iter()
                .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
                .map(|(p, s)| {
                    let j = self.jitter_seed(p, s);
                    let anchor = if naive { Anchor::FinalState(j) } else { Anchor::Reduced(j) };
                    Job::new(&p.ast, Mode::Factorized, anchor, self.sampler_seed(p.id, s), self.steps(), self.cfg_scale())
                })
                .collect();
            let vids = self.engine.run(&jobs)?;
            let scored: Vec<(PromptScores, Option<f64>)> = jobs
                .par_iter()
                .zip(vids.par_iter())
                .map(|(job, v)| (motion_scores(v.view(), &job.ast), turn_color_match(v, &job.ast)))
                .collect();
            let items: Vec<PromptScores> = scored.iter().map(|x| x.0).collect();
            let report = ScoreReport::aggregate(&items, seeds.clone());
            let turns: Vec<f64> = scored.iter().filter_map(|x| x.1).collect();
            out.push(NaiveRow {
                setting,
                n: items.len(),
                composition: report.composition,
                dynamic_attribute: report.dynamic_attribute,
                turn_color_match: mean(&turns),
            });
            per_setting.push(jobs.iter().map(|j| j.ast.has_motion() as usize).zip(items).collect());
        }
        let static_prompts_agree =
            per_setting[0].iter().zip(&per_setting[1]).filter(|(a, _)| a.0 == 0).all(|(a, b)| a.1 == b.1);
        let [reduced, naive]: [NaiveRow; 2] = out.try_into().expect("two settings");
        Ok(NaiveResult { rows: [reduced, naive], static_prompts_agree })
    }
}

/// For prompts with a `turns`: the fraction of turning objects present in
/// frame 0 with their initial color, shape and cell.
pub fn turn_color_match(video: &Video, ast: &PromptAst) -> Option<f64> {
    let turning: Vec<_> = ast.objects.iter().filter(|o| o.motions.iter().any(|m| matches!(m, Motion::Turn(_)))).collect();
    if turning.is_empty() {
        return None;
    }
    let decoded = decode_scene(video.index_axis(Axis(0), 0)).objects;
    let hits = turning
        .iter()
        .filter(|o| decoded.iter().any(|d| d.color == o.color && d.shape == o.shape && d.cell == o.position))
        .count();
    Some(hits as f64 / turning.len() as f64)
}

impl StudyResult {
    /// Wall-clock measurements, kept out of the CSVs so those stay reproducible.
    pub fn timings(&self) -> Vec<(String, f64)> {
        match self {
            StudyResult::Steps { timing, .. } => timing
                .iter()
                .map(|r| (format!("{}_steps_{}_per_video", r.mode, r.steps), r.seconds_per_video))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// `(file name, contents)` for every CSV the study emits.
    pub fn files(&self, name: StudyName, run_id: &str) -> Vec<(String, String)> {
        let file = |suffix: &str| format!("{}{suffix}.csv", name.name());
        match self {
            StudyResult::Diagnostic(rows) => {
                let mut c = Csv::new(&["mode", "fid_frame0", "fvd_video", "n"]);
                for r in rows {
                    c.row(&[r.mode.name().into(), cell(Some(r.fid_frame0)), cell(Some(r.fvd_video)), r.n.to_string()]);
                }
                vec![(file(""), c.finish(run_id))]
            }
            StudyResult::Compbench { rows, reports } => {
                let mut c = Csv::new(&[
                    "mode",
                    "n",
                    "composition",
                    "dynamic_attribute",
                    "motion_binding",
                    "motion_order",
                    "numeracy",
                    "overall",
                    "overall_change_vs_t2v",
                ]);
                let t2v = reports.iter().find(|r| r.mode == "t2v").map(|r| r.report.overall).unwrap_or(0.0);
                for m in reports {
                    let r = &m.report;
                    let mut cells = vec![m.mode.clone(), r.samples.to_string()];
                    cells.extend(r.categories().iter().map(|v| cell(*v)));
                    cells.push(cell(Some(r.overall)));
                    cells.push(signed_pct(pct(r.overall, t2v)));
                    c.row(&cells);
                }
                vec![(file(""), c.finish(run_id)), (file("_scores"), score_csv(rows, run_id))]
            }
            StudyResult::Steps { rows, .. } => {
                let mut header = vec!["mode", "steps", "n"];
                header.extend(CATEGORIES);
                header.push("overall");
                let pct_names: Vec<String> =
                    CATEGORIES.iter().chain(["overall"].iter()).map(|c| format!("{c}_pct_change")).collect();
                header.extend(pct_names.iter().map(|s| s.as_str()));
                let mut c = Csv::new(&header);
                for r in rows {
                    let mut cells = vec![r.mode.name().to_string(), r.steps.to_string(), r.report.samples.to_string()];
                    cells.extend(r.report.categories().iter().map(|v| cell(*v)));
                    cells.push(cell(Some(r.report.overall)));
                    cells.extend(r.pct_change.iter().map(|v| v.map(signed_pct).unwrap_or_default()));
                    c.row(&cells);
                }
                vec![(file(""), c.finish(run_id))]
            }
            StudyResult::Diversity(d) => {
                let mut c = Csv::new(&["prompt_id", "setting", "diversity"]);
                for (pid, v) in &d.per_prompt {
                    for (s, x) in DIVERSITY_SETTINGS.iter().zip(v) {
                        c.row(&[pid.to_string(), (*s).into(), cell(Some(*x))]);
                    }
                }
                for (s, x) in DIVERSITY_SETTINGS.iter().zip(&d.means) {
                    c.row(&["mean".to_string(), (*s).into(), cell(Some(*x))]);
                }
                vec![(file(""), c.finish(run_id))]
            }
            StudyResult::AnchorSensitivity(s) => {
                let mut c = Csv::new(&["prompt_id", "category", "std_anchors", "std_seeds", "ratio"]);
                let ratio = |a: f64, b: f64| cell(Some(b / a.max(1e-9)));
                for (pid, cat, a, b) in &s.rows {
                    c.row(&[pid.to_string(), (*cat).into(), cell(Some(*a)), cell(Some(*b)), ratio(*a, *b)]);
                }
                let mut by_cat: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
                for (_, cat, a, b) in &s.rows {
                    let e = by_cat.entry(cat).or_default();
                    e.0.push(*a);
                    e.1.push(*b);
                }
                for cat in CATEGORIES {
                    if let Some((a, b)) = by_cat.get(cat) {
                        c.row(&["mean".into(), cat.to_string(), cell(Some(mean(a))), cell(Some(mean(b))), ratio(mean(a), mean(b))]);
                    }
                }
                c.row(&[
                    "mean".into(),
                    "all".into(),
                    cell(Some(s.mean_std_anchors)),
                    cell(Some(s.mean_std_seeds)),
                    ratio(s.mean_std_anchors, s.mean_std_seeds),
                ]);
                vec![(file(""), c.finish(run_id))]
            }
            StudyResult::NaiveAnchor(n) => {
                let mut c = Csv::new(&["setting", "n", "composition", "dynamic_attribute", "turn_color_match"]);
                for r in &n.rows {
                    c.row(&[
                        r.setting.into(),
                        r.n.to_string(),
                        cell(Some(r.composition)),
                        cell(r.dynamic_attribute),
                        cell(Some(r.turn_color_match)),
                    ]);
                }
                vec![(file(""), c.finish(run_id))]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_names_round_trip() {
        for n in StudyName::ALL {
            assert_eq!(n.name().parse::<StudyName>().unwrap(), n);
        }
        assert!("tables".parse::<StudyName>().is_err());
    }

    #[test]
    fn helpers() {
        assert_eq!(std_dev(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(std_dev(&[0.0, 2.0]), 1.0);
        assert_eq!(pct(1.5, 1.0), 50.0);
        assert_eq!(signed_pct(41.981), "+41.98%");
        assert_eq!(signed_pct(-3.0), "-3.00%");
    }
}
