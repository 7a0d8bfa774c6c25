use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, simulate_scenes, Video, FRAMES, SIZE};
use crate::container;
use crate::error::{Error, Result};
use crate::prompt::{parse_prompt, random_ast, serialize_prompt, PromptAst};
use crate::rng;

/// Held-out prompts per dataset.
pub const EVAL_PROMPTS: usize = 64;
/// One prompt hash in this many lands in the evaluation bucket.
const EVAL_BUCKET: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: usize,
    pub prompt: String,
    pub jitter_seed: u64,
    pub split: Split,
}

impl DatasetEntry {
    pub fn ast(&self) -> Result<PromptAst> {
        parse_prompt(&self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub frames: usize,
    pub size: usize,
    pub videos_crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub dir: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub manifest: DatasetManifest,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// A loaded dataset: index plus pixel-space videos in entry order.
pub struct Dataset {
    pub index: DatasetIndex,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn train_ids(&self) -> Vec<usize> {
        self.index.split(Split::Train).map(|e| e.id).collect()
    }

    pub fn eval_ids(&self) -> Vec<usize> {
        self.index.split(Split::Eval).map(|e| e.id).collect()
    }
}

fn is_eval_prompt(prompt: &str) -> bool {
    rng::fnv1a(prompt.as_bytes()) % EVAL_BUCKET == 0
}

/// Draws a renderable, contact-free prompt for sample `idx`.
pub(crate) fn draw_feasible(seed: u64, idx: u64) -> (PromptAst, u64) {
    for attempt in 0u64.. {
        let mut r = rng::stream(seed, &[idx, attempt]);
        let ast = random_ast(&mut r);
        let jitter = rng::derive_seed(seed, &[idx, attempt, 0x717]);
        if let Ok(scenes) = simulate_scenes(&ast, jitter) {
            if scenes.iter().all(|s| !s.has_contact()) {
                return (ast, jitter);
            }
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Samples `n` training prompts plus [`EVAL_PROMPTS`] distinct held-out prompts,
/// simulates them and writes `videos.fvt`, `prompts.jsonl` and `manifest.json`.
pub fn gen_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetIndex> {
    if n == 0 {
        return Err(Error::Count { needed: 1, got: 0 });
    }
    let mut entries = Vec::with_capacity(n + EVAL_PROMPTS);
    let mut eval_seen = HashSet::new();
    let (mut n_train, mut n_eval) = (0, 0);
    let mut idx = 0u64;
    while n_train < n || n_eval < EVAL_PROMPTS {
        let (ast, jitter_seed) = draw_feasible(seed, idx);
        idx += 1;
        let prompt = serialize_prompt(&ast);
        let split = if is_eval_prompt(&prompt) {
            if n_eval >= EVAL_PROMPTS || !eval_seen.insert(prompt.clone()) {
                continue;
            }
            n_eval += 1;
            Split::Eval
        } else {
            if n_train >= n {
                continue;
            }
            n_train += 1;
            Split::Train
        };
        entries.push(DatasetEntry { id: entries.len(), prompt, jitter_seed, split });
    }

    let videos: Vec<Video> = entries
        .par_iter()
        .map(|e| simulate(&e.ast()?, e.jitter_seed))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let shape = [entries.len(), FRAMES, SIZE, SIZE, 3];
    let mut flat = Vec::with_capacity(shape.iter().product());
    for v in &videos {
        flat.extend(v.iter().copied());
    }
    let bytes = container::encode_tensor(&shape, &flat)?;
    let videos_crc32 = crc32fast::hash(&bytes);
    let vpath = out_dir.join("videos.fvt");
    std::fs::write(&vpath, &bytes).map_err(|e| Error::io(&vpath, e))?;

    let ppath = out_dir.join("prompts.jsonl");
    let mut lines = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut lines, e)?;
        lines.push(b'\n');
    }
    std::fs::write(&ppath, &lines).map_err(|e| Error::io(&ppath, e))?;

    let manifest = DatasetManifest {
        format: "fvg-dataset".into(),
        version: 1,
        seed,
        n_train,
        n_eval,
        frames: FRAMES,
        size: SIZE,
        videos_crc32,
    };
    let mpath = out_dir.join("manifest.json");
    let mut f = std::fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&mpath, e))?;

    Ok(DatasetIndex { dir: out_dir.to_path_buf(), entries, manifest })
}

pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let mpath = dir.join("manifest.json");
    let ppath = dir.join("prompts.jsonl");
    for p in [&mpath, &ppath, &dir.join("videos.fvt")] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let text = std::fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let entries = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<DatasetEntry>, _>>()?;
    Ok(DatasetIndex { dir: dir.to_path_buf(), entries, manifest })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index = load_index(dir)?;
    let (shape, data) = container::read_tensor(&dir.join("videos.fvt"))?;
    let want = vec![index.entries.len(), FRAMES, SIZE, SIZE, 3];
    if shape != want {
        return Err(Error::format("videos.shape", format!("{shape:?}, expected {want:?}")));
    }
    let all = ndarray::Array5::from_shape_vec((shape[0], shape[1], shape[2], shape[3], shape[4]), data).map_err(|e| Error::Shape(e.to_string()))?;
    let videos = all.axis_iter(Axis(0)).map(|v| v.to_owned()).collect::<Vec<Array4<f32>>>();
    Ok(Dataset { index, videos })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_bucket_is_a_function_of_the_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let idx = gen_dataset(40, 3, dir.path()).unwrap();
        assert_eq!(idx.split(Split::Train).count(), 40);
        assert_eq!(idx.split(Split::Eval).count(), EVAL_PROMPTS);
        let train: HashSet<&str> = idx.split(Split::Train).map(|e| e.prompt.as_str()).collect();
        let eval: HashSet<&str> = idx.split(Split::Eval).map(|e| e.prompt.as_str()).collect();
        assert_eq!(eval.len(), EVAL_PROMPTS);
        assert!(train.is_disjoint(&eval));
        assert!(eval.iter().all(|p| is_eval_prompt(p)));
    }

    #[test]
    fn zero_samples_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(gen_dataset(0, 1, dir.path()), Err(Error::Count { .. })));
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
