//! Stage-by-stage training of one method with per-stage checkpoints and a
//! JSON-lines metric stream.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_digest, decode_params, encode_params, load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use crate::autodiff::ParamStore;
use crate::baselines::{Method, RunState, StageReport};
use crate::dataset::DatasetBundle;
use crate::engine::{ModelSpec, Sampling};
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const MANIFEST_FILE: &str = "run.json";
pub const SOURCE_PARAMS_FILE: &str = "source.params";

pub fn checkpoint_path(out: &Path, stage: usize) -> PathBuf {
    out.join("checkpoints").join(format!("stage{stage}.ckpt"))
}

/// Describes a run directory well enough to report on it without the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub order: String,
    pub sampling: Sampling,
    pub alpha: f64,
    pub tasks: Vec<String>,
    pub metrics: Vec<String>,
    pub config: String,
}

/// Wall-clock seconds of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub method: String,
    pub order: String,
    pub stage: usize,
    pub task: String,
    pub epoch: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Stop once this many stages are complete.
    pub stop_after: Option<usize>,
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Source-task parameters to use instead of pretraining: a parameter file
    /// or a run directory holding one.
    pub init_from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub completed: usize,
    pub total: usize,
    pub warnings: Vec<String>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], append: bool) -> Result<()> {
    let mut file = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Drops lines of a record stream whose stage is `completed` or later, keeping
/// the surviving lines byte for byte.
fn truncate_stream(path: &Path, completed: usize) -> Result<()> {
    #[derive(Deserialize)]
    struct Stage {
        stage: usize,
    }
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let mut kept = String::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Stage = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            reason: e.to_string(),
        })?;
        if row.stage < completed {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn latest_checkpoint(out: &Path, total: usize) -> Option<usize> {
    (0..total).rev().find(|&s| checkpoint_path(out, s).exists())
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Loads source-task parameters and checks them against the model layout.
pub fn load_source_params(path: &Path, spec: &ModelSpec) -> Result<ParamStore> {
    let file = if path.is_dir() { path.join(SOURCE_PARAMS_FILE) } else { path.to_path_buf() };
    let store = decode_params(&fs::read(&file)?)?;
    let want = spec.init(&mut ChaCha8Rng::seed_from_u64(0))?;
    let same = want.len() == store.len()
        && want.iter().all(|(n, a)| store.get(n).map(|b| b.shape() == a.shape()).unwrap_or(false));
    if !same {
        return Err(Error::ResumeMismatch(format!(
            "{} does not match the configured backbone and source task",
            file.display()
        )));
    }
    Ok(store)
}

fn stage_records(method: &str, order: &str, bundle: &DatasetBundle, r: &StageReport) -> Vec<MetricRecord> {
    let mut rows: Vec<MetricRecord> = r
        .logs
        .iter()
        .map(|l| MetricRecord {
            method: method.into(),
            order: order.into(),
            stage: r.task,
            task: bundle.tasks[l.task].name.clone(),
            epoch: Some(l.epoch),
            split: l.split.into(),
            metric: l.metric.clone(),
            value: l.value,
        })
        .collect();
    rows.extend(r.scores.iter().map(|(&t, &v)| MetricRecord {
        method: method.into(),
        order: order.into(),
        stage: r.task,
        task: bundle.tasks[t].name.clone(),
        epoch: None,
        split: "test".into(),
        metric: bundle.tasks[t].metric.name().into(),
        value: v,
    }));
    rows
}

/// Trains the configured method over the task order, evaluating every trained
/// task after each stage and checkpointing the stage.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let bundle = cfg.prepare_bundle()?;
    let spec = cfg.model_spec(&bundle);
    let total = bundle.tasks.len();
    let out = cfg.out.as_path();
    let manifest = RunManifest {
        method: cfg.method,
        order: cfg.order.clone(),
        sampling: cfg.sampling,
        alpha: cfg.alpha,
        tasks: bundle.tasks.iter().map(|t| t.name.clone()).collect(),
        metrics: bundle.tasks.iter().map(|t| t.metric.name().to_string()).collect(),
        config: cfg.fingerprint(),
    };
    fs::create_dir_all(out.join("checkpoints"))?;
    let (records_path, timings_path) = (out.join(RECORDS_FILE), out.join(TIMINGS_FILE));

    let mut state = RunState::new(cfg.method, spec.clone());
    let resumed = if opts.resume { latest_checkpoint(out, total) } else { None };
    if let Some(stage) = resumed {
        let previous = load_manifest(out)?;
        if previous.config != manifest.config {
            return Err(Error::ResumeMismatch(format!("{} was written with a different configuration", out.display())));
        }
        let (loaded, info) = load_checkpoint(&checkpoint_path(out, stage), spec.clone())?;
        if info.fingerprint != config_digest(&manifest.config) || info.method != cfg.method {
            return Err(Error::ResumeMismatch(format!("checkpoint for stage {stage} belongs to another run")));
        }
        state = loaded;
        truncate_stream(&records_path, state.completed)?;
        truncate_stream(&timings_path, state.completed)?;
        log::info!("resuming {} after stage {stage}", out.display());
    } else {
        for s in 0..total {
            let p = checkpoint_path(out, s);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        write_jsonl::<MetricRecord>(&records_path, &[], false)?;
        write_jsonl::<TimingRecord>(&timings_path, &[], false)?;
    }

    let source = match &opts.init_from {
        Some(p) => Some(load_source_params(p, &spec)?),
        None => None,
    };
    let conure = cfg.conure();
    let method = cfg.method.name();
    let mut warnings = Vec::new();
    while state.completed < total {
        if opts.stop_after.is_some_and(|n| state.completed >= n) {
            break;
        }
        let stage = state.completed;
        let report = state.run_stage(&bundle, &cfg.train_config(stage), &conure, source.as_ref())?;
        if let Some(p) = &report.source {
            fs::write(out.join(SOURCE_PARAMS_FILE), encode_params(p))?;
        }
        write_jsonl(&records_path, &stage_records(method, &cfg.order, &bundle, &report), true)?;
        let timings: Vec<TimingRecord> = report
            .timings
            .iter()
            .enumerate()
            .map(|(epoch, &seconds)| TimingRecord {
                method: method.into(),
                order: cfg.order.clone(),
                stage,
                task: bundle.tasks[stage].name.clone(),
                epoch,
                seconds,
            })
            .collect();
        write_jsonl(&timings_path, &timings, true)?;
        save_checkpoint(&checkpoint_path(out, stage), &state, &manifest.config)?;
        log::info!(
            "{method}: finished {} ({}/{total})",
            bundle.tasks[stage].name,
            stage + 1
        );
        warnings.extend(report.warnings);
    }
    Ok(RunSummary { completed: state.completed, total, warnings })
}

/// Scores every trained task of the latest (or given) checkpoint on `split`.
pub fn evaluate_run(cfg: &ExperimentConfig, stage: Option<usize>, split: &str) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let bundle = cfg.prepare_bundle()?;
    let spec = cfg.model_spec(&bundle);
    let out = cfg.out.as_path();
    let stage = match stage {
        Some(s) => s,
        None => latest_checkpoint(out, bundle.tasks.len())
            .ok_or_else(|| Error::InvalidArgument(format!("no checkpoints in {}", out.display())))?,
    };
    let (state, info) = load_checkpoint(&checkpoint_path(out, stage), spec)?;
    if info.fingerprint != config_digest(&cfg.fingerprint()) {
        return Err(Error::ResumeMismatch(format!("checkpoint for stage {stage} belongs to another configuration")));
    }
    let cfg_t = cfg.train_config(stage);
    (0..state.completed)
        .map(|t| {
            let split_users = bundle.split(t)?;
            let users = match split {
                "train" => split_users.train,
                "valid" => split_users.valid,
                "test" => split_users.test,
                other => return Err(Error::config("split", format!("unknown split `{other}`"))),
            };
            Ok(MetricRecord {
                method: cfg.method.name().into(),
                order: cfg.order.clone(),
                stage,
                task: bundle.tasks[t].name.clone(),
                epoch: None,
                split: split.into(),
                metric: bundle.tasks[t].metric.name().into(),
                value: state.evaluate_task(&bundle, &cfg_t, t, &users)?,
            })
        })
        .collect()
}
