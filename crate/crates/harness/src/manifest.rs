use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fvg_core::sample::Mode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::studies::StudyName;

pub const CODE_VERSION: &str = concat!("fvg ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "run.json";

/// A command with all of its inputs resolved, enough to re-execute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    GenData,
    Pretrain {
        data: PathBuf,
    },
    FinetuneAnchor {
        data: PathBuf,
        base: PathBuf,
    },
    Sample {
        mode: Mode,
        ckpt: PathBuf,
        lora: Option<PathBuf>,
        prompt: String,
        steps: usize,
        cfg_scale: f64,
        anchor_seed: u64,
    },
    Eval {
        data: PathBuf,
        ckpt: PathBuf,
        lora: Option<PathBuf>,
        mode: Mode,
        steps: usize,
    },
    Study {
        name: StudyName,
        data: PathBuf,
        ckpt: PathBuf,
        lora: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::FinetuneAnchor { .. } => "finetune-anchor",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Study { .. } => "study",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub code_version: String,
    pub master_seed: u64,
    #[serde(flatten)]
    pub command: Command,
    pub config: RunConfig,
    /// Artifact name → file name inside the output directory.
    pub outputs: BTreeMap<String, String>,
    /// Stage name → seconds. Not part of the reproducible content.
    pub wallclock_s: BTreeMap<String, f64>,
}

/// Hex SHA-256 over the canonical JSON of everything that determines the
/// outputs: code version, command with inputs, seed and configuration.
pub fn run_id(command: &Command, seed: u64, config: &RunConfig) -> String {
    let key = serde_json::json!({
        "code_version": CODE_VERSION,
        "command": command,
        "seed": seed,
        "config": config,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: Command, seed: u64, config: RunConfig) -> Self {
        Self {
            run_id: run_id(&command, seed, &config),
            code_version: CODE_VERSION.into(),
            master_seed: seed,
            command,
            config,
            outputs: BTreeMap::new(),
            wallclock_s: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&p, text)?;
        Ok(p)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::config::ConfigError(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text).map_err(|e| crate::config::ConfigError(format!("{}: {e}", path.display())))?)
    }
}

/// CSV text builder: a header, rows, and the trailing provenance comment.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: header.join(",") + "\n" }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        let line: Vec<&str> = cells.iter().map(|c| c.as_ref()).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn finish(mut self, run_id: &str) -> String {
        self.text.push_str(&format!("# run_id={run_id}\n"));
        self.text
    }
}

/// Fixed-precision float cell; empty for `None`.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_tracks_inputs() {
        let c = RunConfig::default();
        let a = run_id(&Command::GenData, 1, &c);
        assert_eq!(a, run_id(&Command::GenData, 1, &c));
        assert_eq!(a.len(), 16);
        assert_ne!(a, run_id(&Command::GenData, 2, &c));
        let mut c2 = c.clone();
        c2.data.n = 5;
        assert_ne!(a, run_id(&Command::GenData, 1, &c2));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(
            Command::Study { name: StudyName::Steps, data: "d".into(), ckpt: "b".into(), lora: None },
            3,
            RunConfig::default(),
        );
        let p = m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"command\": \"study\""));
    }

    #[test]
    fn csv_carries_trailer() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&["1", "2"]);
        assert_eq!(c.finish("abc"), "a,b\n1,2\n# run_id=abc\n");
    }
}
