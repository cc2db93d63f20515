//! Comparison methods sharing the backbone, and a stage-by-stage runner for
//! every method.
//!
//! CONURE isolates parameters: after each task the largest free coordinates
//! are claimed by that task and frozen for all later tasks; inference for task
//! `t` sees only coordinates claimed by tasks `≤ t`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{FreezeMap, ParamStore};
use crate::backbone::{classifier_bias, classifier_weight, ITEM_EMBEDDING};
use crate::dataset::DatasetBundle;
use crate::engine::{
    evaluate, pretrain_first_task, stream_rng, train_task, EpochLog, FrozenTeacher, ModelSpec, Purpose,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::task_mask::MaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Teracon,
    Conure,
    NoRelation,
    OnlyPositive,
    Sinmo,
    Fineall,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Teracon, Method::Conure, Method::NoRelation, Method::OnlyPositive, Method::Sinmo, Method::Fineall];

    pub fn name(self) -> &'static str {
        match self {
            Method::Teracon => "teracon",
            Method::Conure => "conure",
            Method::NoRelation => "no-relation",
            Method::OnlyPositive => "only-positive",
            Method::Sinmo => "sinmo",
            Method::Fineall => "fineall",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }

    pub fn mask_kind(self) -> Option<MaskKind> {
        match self {
            Method::Teracon => Some(MaskKind::Relation),
            Method::NoRelation => Some(MaskKind::Base),
            Method::OnlyPositive => Some(MaskKind::PositiveOnly),
            Method::Conure | Method::Sinmo | Method::Fineall => None,
        }
    }

    /// Whether each task keeps its own copy of the model.
    pub fn per_task_models(self) -> bool {
        matches!(self, Method::Sinmo | Method::Fineall)
    }
}

/// Binary coordinates claimed by one task, keyed by tensor name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsolationMask {
    pub task: usize,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl IsolationMask {
    pub fn claimed(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }
}

/// Union of `prior` masks for tensor `name`, failing if any two overlap.
pub fn coverage(prior: &[IsolationMask], name: &str, len: usize) -> Result<Vec<bool>> {
    let mut cover = vec![false; len];
    for m in prior {
        if let Some(mask) = m.masks.get(name) {
            if mask.len() != len {
                return Err(Error::shape("coverage", format!("mask for `{name}` has {} entries, tensor {len}", mask.len())));
            }
            for (c, &b) in cover.iter_mut().zip(mask) {
                if b && *c {
                    return Err(Error::MaskOverlap(name.to_string()));
                }
                *c |= b;
            }
        }
    }
    Ok(cover)
}

/// Freeze map that stops updates on every coordinate claimed by `prior`. The
/// forward pass still reads all coordinates.
pub fn conure_effective_params(store: &ParamStore, prior: &[IsolationMask], tensors: &[String]) -> Result<FreezeMap> {
    tensors.iter().map(|name| Ok((name.clone(), coverage(prior, name, store.get(name)?.len())?))).collect()
}

/// Claims, for `task`, every uncovered coordinate with `|Z| > δ`.
pub fn conure_prune_mask(
    store: &ParamStore,
    prior: &[IsolationMask],
    tensors: &[String],
    delta: f64,
    task: usize,
) -> Result<IsolationMask> {
    let mut masks = BTreeMap::new();
    for name in tensors {
        let z = store.get(name)?;
        let cover = coverage(prior, name, z.len())?;
        masks.insert(name.clone(), z.data().iter().zip(&cover).map(|(v, &c)| !c && v.abs() > delta).collect());
    }
    Ok(IsolationMask { task, masks })
}

/// Threshold keeping the `keep` fraction of uncovered coordinates with the
/// largest magnitude: exactly `round(keep·N)` of them exceed it when magnitudes
/// are distinct.
pub fn conure_threshold(store: &ParamStore, prior: &[IsolationMask], tensors: &[String], keep: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&keep) {
        return Err(Error::InvalidArgument(format!("keep fraction {keep} outside [0, 1]")));
    }
    let mut free = Vec::new();
    for name in tensors {
        let z = store.get(name)?;
        let cover = coverage(prior, name, z.len())?;
        free.extend(z.data().iter().zip(&cover).filter(|(_, &c)| !c).map(|(v, _)| v.abs()));
    }
    if free.is_empty() {
        return Ok(f64::INFINITY);
    }
    let k = (keep * free.len() as f64).round() as usize;
    free.sort_by(|a, b| b.partial_cmp(a).expect("finite parameters"));
    Ok(if k == 0 {
        free[0]
    } else if k >= free.len() {
        -1.0
    } else {
        free[k]
    })
}

/// `Ẑ ⊙ Σ_{j≤t} M_j` on the isolated tensors; every other tensor is copied.
pub fn conure_inference_params(
    store: &ParamStore,
    masks: &[IsolationMask],
    tensors: &[String],
    task: usize,
) -> Result<ParamStore> {
    if !masks.iter().any(|m| m.task == task) {
        return Err(Error::UntrainedTask(task));
    }
    let upto: Vec<IsolationMask> = masks.iter().filter(|m| m.task <= task).cloned().collect();
    let mut out = store.clone();
    for name in tensors {
        let cover = coverage(&upto, name, store.get(name)?.len())?;
        let t = out.get_mut(name)?;
        for (v, &c) in t.data_mut().iter_mut().zip(&cover) {
            if !c {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Default per-task pruning ratios; task `t` uses entry `min(t, len − 1)`.
pub const DEFAULT_PRUNE_RATIOS: [f64; 6] = [0.7, 0.8, 0.9, 0.8, 0.9, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConureConfig {
    /// Fraction of free coordinates released after each task.
    pub prune_ratios: Vec<f64>,
    /// Claim the whole item embedding table for the source task.
    pub freeze_embedding: bool,
}

impl Default for ConureConfig {
    fn default() -> Self {
        ConureConfig { prune_ratios: DEFAULT_PRUNE_RATIOS.to_vec(), freeze_embedding: false }
    }
}

impl ConureConfig {
    pub fn ratio(&self, task: usize) -> f64 {
        self.prune_ratios.get(task).or(self.prune_ratios.last()).copied().unwrap_or(0.0)
    }
}

/// Output of one completed stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub task: usize,
    pub logs: Vec<EpochLog>,
    pub timings: Vec<f64>,
    /// Test score of every task trained so far, after this stage.
    pub scores: BTreeMap<usize, f64>,
    pub warnings: Vec<String>,
    /// Source-task parameters straight after pretraining, when this stage ran it.
    pub source: Option<ParamStore>,
}

/// Mutable state of one method's run across stages.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub method: Method,
    pub spec: ModelSpec,
    /// One shared model, or one per trained task for per-task methods.
    pub models: Vec<ParamStore>,
    pub isolation: Vec<IsolationMask>,
    pub completed: usize,
}

impl RunState {
    pub fn new(method: Method, spec: ModelSpec) -> Self {
        RunState { method, spec, models: Vec::new(), isolation: Vec::new(), completed: 0 }
    }

    fn isolated_tensors(&self) -> Vec<String> {
        self.spec.backbone.param_names()
    }

    /// Parameters used to score `task`.
    fn scoring_params(&self, task: usize) -> Result<ParamStore> {
        match self.method {
            Method::Conure => conure_inference_params(&self.models[0], &self.isolation, &self.isolated_tensors(), task),
            m if m.per_task_models() => self.models.get(task).cloned().ok_or(Error::UntrainedTask(task)),
            _ => Ok(self.models[0].clone()),
        }
    }

    pub fn evaluate_task(&self, bundle: &DatasetBundle, cfg: &TrainConfig, task: usize, users: &[usize]) -> Result<f64> {
        if task >= self.completed {
            return Err(Error::UntrainedTask(task));
        }
        let current = if self.method.per_task_models() { task } else { self.completed - 1 };
        let params = self.scoring_params(task)?;
        evaluate(&self.spec, &params, bundle, task, current, cfg.s_max, users)
    }

    /// Trains the next task in order and scores every task trained so far.
    /// `pretrained`, when given, replaces source-task training.
    pub fn run_stage(
        &mut self,
        bundle: &DatasetBundle,
        cfg: &TrainConfig,
        conure: &ConureConfig,
        pretrained: Option<&ParamStore>,
    ) -> Result<StageReport> {
        let task = self.completed;
        if task >= bundle.tasks.len() {
            return Err(Error::InvalidArgument("every task has been trained".into()));
        }
        let mut report = StageReport { task, ..StageReport::default() };
        if task == 0 {
            let mut store = match pretrained {
                Some(p) => p.clone(),
                None => {
                    let mut s = self.spec.init(&mut stream_rng(cfg.seed, 0, 0, Purpose::Init))?;
                    let out = pretrain_first_task(&self.spec, &mut s, bundle, cfg, None)?;
                    report.logs = out.logs;
                    report.timings = out.timings;
                    report.source = Some(s.clone());
                    s
                }
            };
            if self.method == Method::Conure {
                self.conure_claim(&mut store, bundle, cfg, conure, 0, &mut report)?;
            }
            self.models = vec![store];
        } else {
            let mut rng = stream_rng(cfg.seed, task, 0, Purpose::Init);
            match self.method {
                Method::Sinmo | Method::Fineall => {
                    let mut store = if self.method == Method::Sinmo {
                        self.spec.init(&mut rng)?
                    } else {
                        self.models[0].clone()
                    };
                    self.spec.start_task(&mut store, task, cfg.s_max, &mut rng)?;
                    let plain = TrainConfig { alpha: 0.0, ..cfg.clone() };
                    let out = train_task(&self.spec, &mut store, bundle, &plain, task, None, None)?;
                    report.logs = out.logs;
                    report.timings = out.timings;
                    self.models.push(store);
                }
                Method::Conure => {
                    let mut store = std::mem::take(&mut self.models[0]);
                    self.spec.start_task(&mut store, task, cfg.s_max, &mut rng)?;
                    let freeze = conure_effective_params(&store, &self.isolation, &self.isolated_tensors())?;
                    if freeze.values().all(|f| f.iter().all(|&b| b)) {
                        let msg = format!("no free backbone parameters left for task {task}; training its classifier only");
                        log::warn!("{msg}");
                        report.warnings.push(msg);
                    }
                    let plain = TrainConfig { alpha: 0.0, ..cfg.clone() };
                    let out = train_task(&self.spec, &mut store, bundle, &plain, task, None, Some(&freeze))?;
                    report.logs = out.logs;
                    report.timings = out.timings;
                    self.conure_claim(&mut store, bundle, cfg, conure, task, &mut report)?;
                    self.models[0] = store;
                }
                Method::Teracon | Method::NoRelation | Method::OnlyPositive => {
                    let store = &mut self.models[0];
                    self.spec.start_task(store, task, cfg.s_max, &mut rng)?;
                    let teacher = if cfg.alpha > 0.0 {
                        Some(FrozenTeacher::capture(&self.spec, store, task, cfg.s_max)?)
                    } else {
                        None
                    };
                    let out = train_task(&self.spec, store, bundle, cfg, task, teacher.as_ref(), None)?;
                    report.logs = out.logs;
                    report.timings = out.timings;
                }
            }
        }
        self.completed = task + 1;
        for t in 0..=task {
            let test = bundle.split(t)?.test;
            report.scores.insert(t, self.evaluate_task(bundle, cfg, t, &test)?);
        }
        Ok(report)
    }

    /// Prunes to the configured ratio, then fine-tunes the claimed coordinates
    /// for one epoch with every unclaimed coordinate zeroed.
    fn conure_claim(
        &mut self,
        store: &mut ParamStore,
        bundle: &DatasetBundle,
        cfg: &TrainConfig,
        conure: &ConureConfig,
        task: usize,
        report: &mut StageReport,
    ) -> Result<()> {
        let tensors = self.isolated_tensors();
        let keep = 1.0 - conure.ratio(task);
        let delta = conure_threshold(store, &self.isolation, &tensors, keep)?;
        let mut mask = conure_prune_mask(store, &self.isolation, &tensors, delta, task)?;
        if task == 0 && conure.freeze_embedding {
            let n = store.get(ITEM_EMBEDDING)?.len();
            mask.masks.insert(ITEM_EMBEDDING.to_string(), vec![true; n]);
        }
        self.isolation.push(mask);
        let mut masked = conure_inference_params(store, &self.isolation, &tensors, task)?;
        let own = self.isolation.last().expect("just pushed");
        let freeze: FreezeMap = own.masks.iter().map(|(n, m)| (n.clone(), m.iter().map(|&b| !b).collect())).collect();
        let one = TrainConfig { epochs: 1, pretrain_epochs: 1, alpha: 0.0, ..cfg.clone() };
        let out = train_task(&self.spec, &mut masked, bundle, &one, task, None, Some(&freeze))?;
        report.timings.extend(out.timings);
        for (name, m) in &own.masks {
            let src = masked.get(name)?.data().to_vec();
            let dst = store.get_mut(name)?;
            for ((d, s), &b) in dst.data_mut().iter_mut().zip(src).zip(m) {
                if b {
                    *d = s;
                }
            }
        }
        for name in [classifier_weight(task), classifier_bias(task)] {
            store.insert(name.clone(), masked.get(&name)?.clone());
        }
        Ok(())
    }
}

/// Trains `method` over every task of `bundle` in order.
pub fn run_variant(
    method: Method,
    bundle: &DatasetBundle,
    spec: ModelSpec,
    cfg: &TrainConfig,
    conure: &ConureConfig,
    pretrained: Option<&ParamStore>,
) -> Result<(RunState, Vec<StageReport>)> {
    let mut state = RunState::new(method, spec);
    let mut reports = Vec::with_capacity(bundle.tasks.len());
    for _ in 0..bundle.tasks.len() {
        reports.push(state.run_stage(bundle, cfg, conure, pretrained)?);
    }
    Ok((state, reports))
}
