//! Multi-episode evaluation with confidence intervals and the paired
//! with/without pseudo-query ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{build_pseudo_query, sample_episode, LabeledDataset, PqsPolicy, DEFAULT_M_QUERY};
use crate::error::{Error, Result};
use crate::fewshot::{finetune, infer, Backbone, FinetuneState};
use crate::imageaug::{AugmentationConfig, RngStream};
use crate::losses::HyperParams;

/// Episode count used when a run does not ask for the full 600-task protocol.
pub const DESK_EPISODES: usize = 100;

/// Normal-approximation multiplier of the 95% interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Build pseudo queries, fine-tune, then infer.
    WithPqs,
    /// Infer with the unadapted backbone.
    NoFinetune,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::WithPqs => "with_pqs",
            EvalMode::NoFinetune => "no_finetune",
        }
    }
}

/// Everything that determines the outcome of an evaluation, plus the worker
/// count and timing switch, which do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub hp: HyperParams,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub master_seed: u64,
    pub policy: PqsPolicy,
    pub augmentation: AugmentationConfig,
    #[serde(skip)]
    pub workers: usize,
    /// Store wall-clock time in reports. Off by default so reports are
    /// byte-reproducible.
    #[serde(skip)]
    pub record_wall_time: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            n_way: 5,
            k_shot: 5,
            m_query: DEFAULT_M_QUERY,
            master_seed: 0,
            policy: PqsPolicy::default(),
            augmentation: AugmentationConfig::default(),
            workers: 1,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub mode: EvalMode,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub wall_seconds: Option<f64>,
    /// Digest of each episode's sampled image indices.
    #[serde(skip)]
    pub episode_digests: Vec<String>,
}

/// Mean and 95% half-width `1.96 · s / √T` with the sample standard deviation.
/// Identical values, including a single one, have half-width exactly 0.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    let t = values.len();
    if t == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t - 1) as f64;
    (mean, Z95 * var.sqrt() / (t as f64).sqrt())
}

/// Hash of the settings that determine results, the backbone and the target
/// dataset.
pub fn fingerprint(bk: &Backbone, target: &LabeledDataset, settings: &EvalSettings) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    h.update(Sha256::digest(bk.to_bytes()));
    h.update(target.digest().as_bytes());
    hex::encode(h.finalize())
}

fn run_episode(bk: &Backbone, target: &LabeledDataset, s: &EvalSettings, mode: EvalMode, index: u64) -> Result<(f64, String)> {
    let mut sample_rng = RngStream::new(s.master_seed, 2 * index);
    let ep = sample_episode(target, s.n_way, s.k_shot, s.m_query, &mut sample_rng)?;
    let digest = ep.digest();
    let acc = match mode {
        EvalMode::NoFinetune => infer(&mut FinetuneState::pristine(bk), &ep, &s.hp)?,
        EvalMode::WithPqs => {
            let mut pqs_rng = RngStream::new(s.master_seed, 2 * index + 1);
            let ep = build_pseudo_query(ep, &s.policy, &s.augmentation, &mut pqs_rng)?;
            let mut state = finetune(bk, &ep, &s.hp)?;
            infer(&mut state, &ep, &s.hp)?
        }
    };
    Ok((acc, digest))
}

/// Evaluates `hp.episodes_count` episodes. Episode `i` draws from streams
/// `2i` (sampling) and `2i + 1` (pseudo queries) of the master seed, so
/// results do not depend on the worker count.
pub fn run_eval(bk: &Backbone, target: &LabeledDataset, settings: &EvalSettings, mode: EvalMode) -> Result<EvalReport> {
    settings.hp.validate()?;
    let t = settings.hp.episodes_count;
    if t == 0 {
        return Err(Error::Parameter("episode count must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot build worker pool: {e}")))?;
    let start = Instant::now();
    let results: Vec<(f64, String)> = pool.install(|| {
        (0..t as u64)
            .into_par_iter()
            .map(|i| run_episode(bk, target, settings, mode, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    let (accuracies, episode_digests): (Vec<f64>, Vec<String>) = results.into_iter().unzip();
    let (mean, ci95) = summarize(&accuracies);
    Ok(EvalReport {
        fingerprint: fingerprint(bk, target, settings),
        mode,
        n_way: settings.n_way,
        k_shot: settings.k_shot,
        episodes: t,
        mean,
        ci95,
        accuracies,
        wall_seconds: settings.record_wall_time.then_some(elapsed),
        episode_digests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_pqs: EvalReport,
    pub no_finetune: EvalReport,
    /// Per-episode `with_pqs − no_finetune`.
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub ci95_delta: f64,
}

/// Runs both modes on the same episodes and reports the paired difference.
pub fn ablate(bk: &Backbone, target: &LabeledDataset, settings: &EvalSettings) -> Result<AblationReport> {
    let with_pqs = run_eval(bk, target, settings, EvalMode::WithPqs)?;
    let no_finetune = run_eval(bk, target, settings, EvalMode::NoFinetune)?;
    if with_pqs.episode_digests != no_finetune.episode_digests {
        return Err(Error::Contract("ablation arms sampled different episodes".into()));
    }
    let deltas: Vec<f64> = with_pqs.accuracies.iter().zip(&no_finetune.accuracies).map(|(a, b)| a - b).collect();
    let (mean_delta, ci95_delta) = summarize(&deltas);
    Ok(AblationReport {
        with_pqs,
        no_finetune,
        deltas,
        mean_delta,
        ci95_delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    MachineReadable,
    Both,
}

fn cell(mean: f64, ci: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * ci)
}

/// One-row accuracy table in percent, `mean±half-width`.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>14}", "mode", "task", "episodes", "accuracy (%)");
    let task = format!("{}w{}s", r.n_way, r.k_shot);
    let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>14}", r.mode.as_str(), task, r.episodes, cell(r.mean, r.ci95));
    s
}

pub fn render_ablation_table(a: &AblationReport) -> String {
    let mut s = render_table(&a.with_pqs);
    let r = &a.no_finetune;
    let task = format!("{}w{}s", r.n_way, r.k_shot);
    let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>14}", r.mode.as_str(), task, r.episodes, cell(r.mean, r.ci95));
    let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>14}", "delta", task, r.episodes, cell(a.mean_delta, a.ci95_delta));
    s
}

/// Keys in a fixed order: fingerprint, mode, n_way, k_shot, episodes, mean,
/// ci95, accuracies, wall_seconds.
pub fn to_json(r: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `<stem>.txt` and/or `<stem>.json` into `dir` and returns the paths.
pub fn emit_report(r: &EvalReport, format: ReportFormat, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Table | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.txt"));
        std::fs::write(&p, render_table(r))?;
        written.push(p);
    }
    if matches!(format, ReportFormat::MachineReadable | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.json"));
        std::fs::write(&p, to_json(r))?;
        written.push(p);
    }
    Ok(written)
}
