//! Command-line flags and their translation into a [`RunConfig`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Command, DomainKind, EvalChoice, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lmmpqs", version, about = "Cross-domain few-shot fine-tuning with pseudo query sets")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render a synthetic dataset as PPM files.
    Synth(SynthArgs),
    /// Meta-train a backbone on a source dataset and save a snapshot.
    Metatrain(MetatrainArgs),
    /// Evaluate a snapshot on a target dataset.
    Eval(EvalArgs),
    /// Replay a saved run_config.json.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Task {
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub m_query: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = DomainKind::Source)]
    pub domain: DomainKind,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub images_per_class: Option<usize>,
    /// Image side length.
    #[arg(long)]
    pub size: Option<usize>,
    /// Domain shift in [0, 1]; defaults to 0 for source and 1 for target.
    #[arg(long)]
    pub shift: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MetatrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub task: Task,
    /// Source dataset directory.
    #[arg(long)]
    pub source: PathBuf,
    /// Meta-training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub task: Task,
    /// Backbone snapshot written by `metatrain`.
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Target dataset directory.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalChoice::WithPqs)]
    pub mode: EvalChoice,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Fine-tuning epochs per episode.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Normalize queries with their own batch statistics.
    #[arg(long, action = clap::ArgAction::Set)]
    pub transductive: Option<bool>,
    /// Weight of the triplet term.
    #[arg(long)]
    pub lambda_pt: Option<f64>,
    /// Scale of the margin loss.
    #[arg(long = "s")]
    pub s: Option<f64>,
    /// Additive cosine margin.
    #[arg(long = "m")]
    pub m: Option<f64>,
    /// Triplet margin.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Number of evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Record wall-clock time in the reports.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_task(cfg: &mut RunConfig, t: Task) {
    set(&mut cfg.n_way, t.n_way);
    set(&mut cfg.k_shot, t.k_shot);
    set(&mut cfg.m_query, t.m_query);
}

impl Cmd {
    /// Builds the run configuration; `rerun` loads it from disk.
    pub fn into_config(self) -> lmmpqs::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        match self {
            Cmd::Synth(a) => {
                cfg.command = Command::Synth;
                cfg.seed = a.common.seed;
                cfg.out = a.common.out;
                cfg.synth.domain = a.domain;
                set(&mut cfg.synth.classes, a.classes);
                set(&mut cfg.synth.images_per_class, a.images_per_class);
                set(&mut cfg.synth.size, a.size);
                cfg.synth.shift = a.shift;
            }
            Cmd::Metatrain(a) => {
                cfg.command = Command::Metatrain;
                cfg.seed = a.common.seed;
                cfg.out = a.common.out;
                cfg.source = Some(a.source);
                apply_task(&mut cfg, a.task);
                let m = &mut cfg.meta;
                set(&mut m.epochs, a.epochs);
                set(&mut m.episodes_per_epoch, a.episodes_per_epoch);
                set(&mut m.learning_rate, a.lr);
                set(&mut m.momentum, a.momentum);
                set(&mut m.backbone.hidden, a.hidden);
                set(&mut m.backbone.embed_dim, a.embed_dim);
            }
            Cmd::Eval(a) => {
                cfg.command = Command::Eval;
                cfg.seed = a.common.seed;
                cfg.out = a.common.out;
                cfg.snapshot = Some(a.snapshot);
                cfg.target = Some(a.target);
                cfg.mode = a.mode;
                cfg.workers = a.workers;
                cfg.timing = a.timing;
                apply_task(&mut cfg, a.task);
                let hp = &mut cfg.hp;
                set(&mut hp.finetune_epochs, a.epochs);
                set(&mut hp.transductive, a.transductive);
                set(&mut hp.ptloss_weight, a.lambda_pt);
                set(&mut hp.lmm_scale, a.s);
                set(&mut hp.lmm_margin, a.m);
                set(&mut hp.triplet_margin, a.margin);
                set(&mut hp.learning_rate, a.lr);
                set(&mut hp.momentum, a.momentum);
                set(&mut hp.episodes_count, a.episodes);
            }
            Cmd::Rerun(a) => {
                cfg = RunConfig::load(&a.config)?;
                set(&mut cfg.out, a.out);
            }
        }
        Ok(cfg)
    }
}
