//! Command implementations. Each writes its outputs and a copy of its
//! [`RunConfig`] under the output directory and returns a short summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lmmpqs::episodes::{generate_synthetic, load_dataset, save_dataset, DomainSpec, LabeledDataset, PqsPolicy};
use lmmpqs::evalharness::{ablate, emit_report, render_ablation_table, render_table, run_eval, EvalMode, EvalSettings, ReportFormat};
use lmmpqs::fewshot::{meta_train, Backbone, MetaTrainConfig};
use lmmpqs::imageaug::{AugmentationConfig, RngStream};
use lmmpqs::{Error, Result};
use serde::Serialize;

use crate::config::{Command, DomainKind, EvalChoice, RunConfig};

pub const SNAPSHOT_FILE: &str = "backbone.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.json";

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Parameter(format!("--{flag} is required")))
}

pub fn execute(cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(&cfg.out)?;
    cfg.save(&cfg.out)?;
    match cfg.command {
        Command::Synth => synth(cfg),
        Command::Metatrain => metatrain(cfg),
        Command::Eval => eval(cfg),
    }
}

pub fn domain_spec(cfg: &RunConfig) -> DomainSpec {
    let p = &cfg.synth;
    let mut spec = match p.domain {
        DomainKind::Source => DomainSpec::source(p.classes, p.images_per_class),
        DomainKind::Target => DomainSpec::target(p.classes, p.images_per_class),
    };
    spec.size = p.size;
    if let Some(s) = p.shift {
        spec.shift = s;
    }
    spec
}

fn synth(cfg: &RunConfig) -> Result<String> {
    let spec = domain_spec(cfg);
    if !(0.0..=1.0).contains(&spec.shift) {
        return Err(Error::Parameter(format!("shift must lie in [0, 1], got {}", spec.shift)));
    }
    let ds = generate_synthetic(&spec, cfg.seed)?;
    save_dataset(&ds, &cfg.out)?;
    Ok(format!(
        "wrote {} classes x {} images ({}x{}) to {}\n",
        ds.num_classes(),
        spec.images_per_class,
        spec.size,
        spec.size,
        cfg.out.display()
    ))
}

#[derive(Serialize)]
struct LossLog<'a> {
    epochs: usize,
    episodes_per_epoch: usize,
    epoch_losses: &'a [f64],
}

fn metatrain(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(required(&cfg.source, "source")?)?;
    let mut spec = cfg.meta.backbone.clone();
    let (c, h, w) = ds.image_dims().expect("datasets are non-empty");
    (spec.channels, spec.height, spec.width) = (c, h, w);
    let bk = Backbone::new(spec, cfg.seed)?;
    let mcfg = MetaTrainConfig {
        epochs: cfg.meta.epochs,
        episodes_per_epoch: cfg.meta.episodes_per_epoch,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        learning_rate: cfg.meta.learning_rate,
        momentum: cfg.meta.momentum,
    };
    let out = meta_train(&bk, &ds, &mcfg, &mut RngStream::new(cfg.seed, 1))?;
    out.backbone.save(&cfg.out.join(SNAPSHOT_FILE))?;
    let log = LossLog {
        epochs: mcfg.epochs,
        episodes_per_epoch: mcfg.episodes_per_epoch,
        epoch_losses: &out.epoch_losses,
    };
    let mut json = serde_json::to_string_pretty(&log).expect("loss log serializes");
    json.push('\n');
    fs::write(cfg.out.join(LOSS_LOG_FILE), json)?;
    let mut s = String::new();
    for (i, l) in out.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "epoch {:>3}  loss {l:.6}", i + 1);
    }
    let _ = writeln!(s, "snapshot written to {}", cfg.out.join(SNAPSHOT_FILE).display());
    Ok(s)
}

pub fn eval_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        hp: cfg.hp.clone(),
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        master_seed: cfg.seed,
        policy: PqsPolicy::default(),
        augmentation: AugmentationConfig::default(),
        workers: cfg.effective_workers(),
        record_wall_time: cfg.timing,
    }
}

fn load_inputs(cfg: &RunConfig) -> Result<(Backbone, LabeledDataset)> {
    let bk = Backbone::load(required(&cfg.snapshot, "snapshot")?)?;
    let ds = load_dataset(required(&cfg.target, "target")?)?;
    Ok((bk, ds))
}

fn eval(cfg: &RunConfig) -> Result<String> {
    let (bk, ds) = load_inputs(cfg)?;
    let settings = eval_settings(cfg);
    if cfg.mode != EvalChoice::NoFinetune {
        let plan = settings.policy.plan(cfg.n_way, cfg.k_shot);
        if plan.fallback {
            log::warn!(
                "no pseudo query rule for {}-shot; using {} pseudo queries per support image",
                cfg.k_shot,
                plan.pseudo_per_source
            );
        }
    }
    let single = |mode: EvalMode| -> Result<String> {
        let r = run_eval(&bk, &ds, &settings, mode)?;
        emit_report(&r, ReportFormat::Both, &cfg.out, mode.as_str())?;
        Ok(render_table(&r))
    };
    match cfg.mode {
        EvalChoice::WithPqs => single(EvalMode::WithPqs),
        EvalChoice::NoFinetune => single(EvalMode::NoFinetune),
        EvalChoice::Ablate => {
            let a = ablate(&bk, &ds, &settings)?;
            emit_report(&a.with_pqs, ReportFormat::Both, &cfg.out, EvalMode::WithPqs.as_str())?;
            emit_report(&a.no_finetune, ReportFormat::Both, &cfg.out, EvalMode::NoFinetune.as_str())?;
            let table = render_ablation_table(&a);
            fs::write(cfg.out.join("ablation.txt"), &table)?;
            let mut json = serde_json::to_string_pretty(&a).expect("ablation serializes");
            json.push('\n');
            fs::write(cfg.out.join("ablation.json"), json)?;
            Ok(table)
        }
    }
}

/// Process exit status for an error: 2 usage, 3 data, 4 contract violation.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_) => 2,
        Error::Capacity(_) | Error::Load { .. } | Error::Snapshot(_) | Error::Io(_) | Error::Shape(_) => 3,
        Error::Dimension { .. } | Error::DegenerateBatch { .. } | Error::Contract(_) | Error::QueryAccess => 4,
    }
}
