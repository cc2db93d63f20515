use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::baselines::{ConureConfig, Method, DEFAULT_PRUNE_RATIOS};
use crate::dataset::{
    default_noise_position, generate_bundle, inject_noisy_task, load_bundle, DatasetBundle, GeneratorConfig,
    TaskKind,
};
use crate::engine::{ModelSpec, Sampling, TrainConfig};
use crate::error::{Error, Result};

/// Everything a run depends on. Loaded from a flat TOML file; any key may be
/// overridden afterwards with `key=value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset file; when absent the bundle is generated from `tasks`.
    pub dataset: Option<PathBuf>,
    pub tasks: String,
    pub users: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub data_seed: u64,

    pub method: Method,
    /// `forward`, `reversed`, or comma-separated task names starting with the
    /// source task.
    pub order: String,
    pub noisy_task: bool,
    pub noise_fraction: f64,
    pub noise_classes: usize,
    pub noise_position: Option<usize>,
    pub sampling: Sampling,

    pub lr: f64,
    /// Per-task learning rates; task `t` falls back to `lr` past the end.
    pub task_lr: Vec<f64>,
    pub pretrain_lr: f64,
    pub alpha: f64,
    pub c: f64,
    pub s_max: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub seed: u64,

    pub dim: usize,
    pub dilations: Vec<usize>,
    pub kernel_width: usize,
    pub mask_per_activation: bool,

    pub prune_ratios: Vec<f64>,
    pub freeze_embedding: bool,

    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let backbone = BackboneConfig::default();
        ExperimentConfig {
            dataset: None,
            tasks: "ttl-like".into(),
            users: 2000,
            vocab: backbone.vocab,
            seq_len: 20,
            data_seed: 7,
            method: Method::Teracon,
            order: "forward".into(),
            noisy_task: false,
            noise_fraction: 0.5,
            noise_classes: 50,
            noise_position: None,
            sampling: train.sampling,
            lr: train.lr,
            task_lr: Vec::new(),
            pretrain_lr: train.pretrain_lr,
            alpha: train.alpha,
            c: train.c,
            s_max: train.s_max,
            batch_size: train.batch_size,
            epochs: train.epochs,
            pretrain_epochs: train.pretrain_epochs,
            patience: train.patience,
            seed: train.seed,
            dim: backbone.dim,
            dilations: backbone.dilations,
            kernel_width: backbone.kernel_width,
            mask_per_activation: backbone.mask_per_activation,
            prune_ratios: DEFAULT_PRUNE_RATIOS.to_vec(),
            freeze_embedding: false,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn toml_error(err: toml::de::Error) -> Error {
    let msg = err.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .unwrap_or("config")
        .to_string();
    Error::Config { field, reason: msg }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`, where the value is TOML (bare words are taken as
    /// strings).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config("override", format!("`{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) && !matches!(key, "dataset" | "noise_position") {
            return Err(Error::config(key, "unknown setting"));
        }
        table.insert(key.to_string(), value);
        *self = table.try_into().map_err(toml_error)?;
        Ok(())
    }

    pub fn train_config(&self, task: usize) -> TrainConfig {
        TrainConfig {
            lr: self.task_lr.get(task).copied().unwrap_or(self.lr),
            pretrain_lr: self.pretrain_lr,
            alpha: self.alpha,
            c: self.c,
            s_max: self.s_max,
            batch_size: self.batch_size,
            epochs: self.epochs,
            pretrain_epochs: self.pretrain_epochs,
            patience: self.patience,
            seed: self.seed,
            sampling: self.sampling,
        }
    }

    pub fn backbone(&self, vocab: usize) -> BackboneConfig {
        BackboneConfig {
            vocab,
            dim: self.dim,
            dilations: self.dilations.clone(),
            kernel_width: self.kernel_width,
            mask_per_activation: self.mask_per_activation,
        }
    }

    pub fn model_spec(&self, bundle: &DatasetBundle) -> ModelSpec {
        ModelSpec::for_bundle(self.backbone(bundle.vocab), bundle, self.method.mask_kind())
    }

    pub fn conure(&self) -> ConureConfig {
        ConureConfig { prune_ratios: self.prune_ratios.clone(), freeze_embedding: self.freeze_embedding }
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        GeneratorConfig::preset(&self.tasks, self.data_seed, self.users, self.vocab, self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        for (k, &lr) in self.task_lr.iter().enumerate() {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("task_lr", format!("entry {k} must be positive, got {lr}")));
            }
        }
        self.backbone(self.vocab).validate()?;
        if self.dataset.is_none() {
            self.generator()?.validate()?;
        }
        if !matches!(self.order.as_str(), "forward" | "reversed") && !self.order.contains(',') {
            return Err(Error::config("order", format!("`{}`: use forward, reversed, or a comma-separated list", self.order)));
        }
        if !(self.noise_fraction > 0.0 && self.noise_fraction <= 1.0) {
            return Err(Error::config("noise_fraction", "must lie in (0, 1]"));
        }
        if self.noise_classes < 2 {
            return Err(Error::config("noise_classes", "at least 2 classes are required"));
        }
        if self.noise_position == Some(0) {
            return Err(Error::config("noise_position", "the source task stays first"));
        }
        if self.prune_ratios.is_empty() || self.prune_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config("prune_ratios", "ratios must lie in [0, 1) and the list must be non-empty"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "an output directory is required"));
        }
        Ok(())
    }

    /// Configuration that determines the metric stream; the output directory
    /// is excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }

    /// Loads or generates the bundle, then applies the task order and the
    /// optional noisy task.
    pub fn prepare_bundle(&self) -> Result<DatasetBundle> {
        let bundle = match &self.dataset {
            Some(path) => load_bundle(path)?,
            None => generate_named(&self.generator()?, &self.tasks, self.noise_fraction, self.noise_classes)?,
        };
        let mut bundle = apply_order(&bundle, &self.order)?;
        if self.noisy_task && bundle.task_index("noise").is_none() {
            let at = self.noise_position.unwrap_or_else(|| default_noise_position(bundle.tasks.len()));
            bundle = inject_noisy_task(&bundle, self.noise_fraction, self.noise_classes, self.data_seed, at)
                .map_err(|e| Error::config("noise_position", e.to_string()))?;
        }
        Ok(bundle)
    }
}

/// Generates a preset bundle; the `noisy` preset also carries the random-label
/// task.
pub fn generate_named(cfg: &GeneratorConfig, preset: &str, fraction: f64, classes: usize) -> Result<DatasetBundle> {
    let bundle = generate_bundle(cfg)?;
    if preset == "noisy" {
        let at = default_noise_position(bundle.tasks.len());
        return inject_noisy_task(&bundle, fraction, classes, cfg.seed, at);
    }
    Ok(bundle)
}

/// Reorders tasks. `reversed` keeps the source task first and reverses the
/// rest.
pub fn apply_order(bundle: &DatasetBundle, order: &str) -> Result<DatasetBundle> {
    let m = bundle.tasks.len();
    let perm: Vec<usize> = match order {
        "forward" => (0..m).collect(),
        "reversed" => std::iter::once(0).chain((1..m).rev()).collect(),
        list => {
            let mut perm = Vec::new();
            for name in list.split(',').map(str::trim) {
                let t = bundle
                    .task_index(name)
                    .ok_or_else(|| Error::config("order", format!("unknown task `{name}`")))?;
                if perm.contains(&t) {
                    return Err(Error::config("order", format!("task `{name}` listed twice")));
                }
                perm.push(t);
            }
            perm
        }
    };
    if perm.len() != m {
        return Err(Error::config("order", format!("{} of {m} tasks listed", perm.len())));
    }
    if bundle.tasks[perm[0]].kind != TaskKind::NextItem {
        return Err(Error::config("order", "the next-item task must come first"));
    }
    let mut out = bundle.clone();
    out.tasks = perm.iter().map(|&t| bundle.tasks[t].clone()).collect();
    Ok(out)
}
