use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use fvg_core::prompt::{serialize_prompt, tokenize, PromptAst};
use fvg_core::sample::{render_anchor, sample_anchored, sample_t2v, Mode, SampleConfig, VideoModel};
use fvg_core::scene::{final_state_scene, render_frame, Frame, Video};
use rayon::prelude::*;

/// Where an anchored job gets its first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Anchor {
    None,
    /// Rendered from the reduced prompt (also the ground-truth first frame
    /// for the same jitter seed).
    Reduced(u64),
    /// Rendered from the state after every motion has completed.
    FinalState(u64),
}

/// One video to generate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Job {
    pub ast: PromptAst,
    /// Conditioning text; the canonical prompt unless rephrased.
    pub text: String,
    pub mode: Mode,
    pub anchor: Anchor,
    pub seed: u64,
    pub steps: usize,
    cfg_scale_bits: u64,
}

impl Job {
    pub fn new(ast: &PromptAst, mode: Mode, anchor: Anchor, seed: u64, steps: usize, cfg_scale: f64) -> Self {
        Self {
            text: serialize_prompt(ast),
            ast: ast.clone(),
            mode,
            anchor,
            seed,
            steps,
            cfg_scale_bits: cfg_scale.to_bits(),
        }
    }

    pub fn with_text(mut self, text: String) -> Self {
        self.text = text;
        self
    }

    pub fn cfg_scale(&self) -> f64 {
        f64::from_bits(self.cfg_scale_bits)
    }

    pub fn anchor_frame(&self) -> fvg_core::Result<Option<Frame>> {
        Ok(match self.anchor {
            Anchor::None => None,
            Anchor::Reduced(s) => Some(render_anchor(&self.ast, s)),
            Anchor::FinalState(s) => Some(render_frame(&final_state_scene(&self.ast, s)?)),
        })
    }
}

/// Samples videos in parallel and memoizes them, so studies that share
/// settings share videos.
pub struct Engine {
    pub model: VideoModel,
    cache: Mutex<HashMap<Job, Arc<Video>>>,
}

impl Engine {
    pub fn new(model: VideoModel) -> Self {
        Self { model, cache: Mutex::new(HashMap::new()) }
    }

    fn generate(&self, job: &Job) -> fvg_core::Result<Video> {
        let tokens = tokenize(&job.text)?;
        let cfg = SampleConfig { steps: job.steps, cfg_scale: job.cfg_scale(), mode: job.mode, seed: job.seed };
        match job.anchor_frame()? {
            None => sample_t2v(&self.model, &tokens, &cfg),
            Some(anchor) => sample_anchored(&self.model, &anchor, &tokens, &cfg),
        }
    }

    /// Videos for `jobs`, in order. Missing ones are computed in parallel;
    /// the result does not depend on the thread count.
    pub fn run(&self, jobs: &[Job]) -> fvg_core::Result<Vec<Arc<Video>>> {
        let missing: Vec<Job> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            jobs.iter().filter(|j| !cache.contains_key(*j) && seen.insert(*j)).cloned().collect()
        };
        let fresh: Vec<(Job, Video)> = missing
            .into_par_iter()
            .map(|j| self.generate(&j).map(|v| (j, v)))
            .collect::<fvg_core::Result<_>>()?;
        let mut cache = self.cache.lock().expect("cache lock");
        for (j, v) in fresh {
            cache.insert(j, Arc::new(v));
        }
        Ok(jobs.iter().map(|j| Arc::clone(&cache[j])).collect())
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}
