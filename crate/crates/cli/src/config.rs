//! Serializable description of one command invocation.

use std::path::{Path, PathBuf};

use lmmpqs::episodes::DEFAULT_M_QUERY;
use lmmpqs::fewshot::{BackboneSpec, MetaTrainConfig};
use lmmpqs::losses::HyperParams;
use lmmpqs::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Synth,
    Metatrain,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalChoice {
    WithPqs,
    NoFinetune,
    /// Both modes on the same episodes plus their paired difference.
    Ablate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    /// Unshifted base domain, class ids from 0.
    Source,
    /// Shifted novel domain, class ids from 1000.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub domain: DomainKind,
    pub classes: usize,
    pub images_per_class: usize,
    pub size: usize,
    /// Overrides the domain's default shift.
    pub shift: Option<f64>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            domain: DomainKind::Source,
            classes: 64,
            images_per_class: 30,
            size: 16,
            shift: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub backbone: BackboneSpec,
}

impl Default for MetaParams {
    fn default() -> Self {
        let m = MetaTrainConfig::default();
        Self {
            epochs: m.epochs,
            episodes_per_epoch: m.episodes_per_epoch,
            learning_rate: m.learning_rate,
            momentum: m.momentum,
            backbone: BackboneSpec::default(),
        }
    }
}

/// Everything a command needs. Saving it next to the outputs and replaying it
/// reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub hp: HyperParams,
    pub mode: EvalChoice,
    pub synth: SynthParams,
    pub meta: MetaParams,
    pub seed: u64,
    /// Worker threads for evaluation, 0 for one per available core. Does not
    /// affect results.
    pub workers: usize,
    /// Record wall-clock time in reports, which makes them non-reproducible.
    pub timing: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Eval,
            source: None,
            target: None,
            snapshot: None,
            n_way: 5,
            k_shot: 5,
            m_query: DEFAULT_M_QUERY,
            hp: HyperParams::default(),
            mode: EvalChoice::WithPqs,
            synth: SynthParams::default(),
            meta: MetaParams::default(),
            seed: 0,
            workers: 0,
            timing: false,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parameter(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&p, self.to_json())?;
        Ok(p)
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }
}
