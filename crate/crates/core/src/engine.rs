//! Sequential task training: next-item pretraining of the source task, masked
//! classification for later tasks, and pseudo-label retention of earlier tasks
//! over relation-sampled users.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Adam, DenseArray, FreezeMap, Graph, ParamStore, Var};
use crate::backbone::{
    autoregressive_loss, classify, encode, init_backbone, init_classifier, BackboneConfig, BehaviorSequence,
};
use crate::dataset::{DatasetBundle, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax, mrr_at_k, Metric};
use crate::task_mask::{
    allocate, anneal_scale, init_embeddings, is_initialized, mask_vars, mixer_weight, snapshot_masks, task_masks,
    FrozenMasks, MaskKind, MaskLayout,
};

/// How many current-task users retain each earlier task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Rate from mask similarity, per earlier task.
    Relation,
    /// The smallest relation rate, applied to every earlier task.
    Min,
    /// Every user for every earlier task.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub pretrain_lr: f64,
    pub alpha: f64,
    pub c: f64,
    pub s_max: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub sampling: Sampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            pretrain_lr: 1e-3,
            alpha: 0.7,
            c: 6.0,
            s_max: 50.0,
            batch_size: 128,
            epochs: 30,
            pretrain_epochs: 30,
            patience: 5,
            seed: 0,
            sampling: Sampling::Relation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("c", self.c)];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be non-negative, got {}", self.alpha)));
        }
        if !(self.s_max > 1.0) {
            return Err(Error::config("s_max", format!("must exceed 1, got {}", self.s_max)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return Err(Error::config("epochs", "at least one epoch per task is required"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be positive"));
        }
        Ok(())
    }
}

/// Independent random streams keyed by what they are used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Shuffle,
    Sample(usize),
}

pub fn stream_rng(seed: u64, stage: usize, epoch: usize, purpose: Purpose) -> ChaCha8Rng {
    let tag = match purpose {
        Purpose::Init => 1,
        Purpose::Shuffle => 2,
        Purpose::Sample(j) => 3 + j as u64,
    };
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [stage as u64, epoch as u64, tag] {
        h = splitmix(h ^ v.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Architecture of a continual model: the backbone, one classifier per task
/// and, optionally, soft task masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    /// Output size of every task's classifier, in training order.
    pub classes: Vec<usize>,
    pub mask: Option<MaskKind>,
}

/// The input a task reads from a sequence: the next-item task holds out the
/// final item as its target.
pub fn task_input(seq: &BehaviorSequence, kind: TaskKind) -> &[usize] {
    match kind {
        TaskKind::NextItem => &seq.items[..seq.items.len() - 1],
        TaskKind::Classification => &seq.items,
    }
}

pub fn task_label(bundle: &DatasetBundle, task: usize, user: usize) -> Result<usize> {
    let spec = &bundle.tasks[task];
    match spec.kind {
        TaskKind::NextItem => Ok(*bundle.users[user].items.last().expect("sequences are non-empty")),
        TaskKind::Classification => spec.labels[user].ok_or_else(|| {
            Error::InvalidArgument(format!("user {} has no label for {}", bundle.users[user].user_id, spec.name))
        }),
    }
}

impl ModelSpec {
    pub fn for_bundle(backbone: BackboneConfig, bundle: &DatasetBundle, mask: Option<MaskKind>) -> Self {
        ModelSpec { backbone, classes: bundle.tasks.iter().map(|t| t.cardinality).collect(), mask }
    }

    pub fn layout(&self) -> MaskLayout {
        MaskLayout { tasks: self.classes.len(), slots: self.backbone.mask_slots(), dim: self.backbone.dim }
    }

    /// Fresh backbone and source-task classifier.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        if self.classes.first() != Some(&self.backbone.vocab) {
            return Err(Error::config("classes", "the source task predicts over the item vocabulary"));
        }
        let mut store = ParamStore::new();
        init_backbone(&mut store, &self.backbone, rng)?;
        init_classifier(&mut store, 0, self.backbone.dim, self.backbone.vocab, rng);
        Ok(store)
    }

    /// Prepares `task` for training: its classifier and, for masked models,
    /// its embeddings (plus the source task's, which joins as relation context).
    pub fn start_task(&self, store: &mut ParamStore, task: usize, s_max: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        if task == 0 || task >= self.classes.len() {
            return Err(Error::InvalidArgument(format!("cannot start task {task}")));
        }
        if let Some(_kind) = self.mask {
            let layout = self.layout();
            if !store.contains(&mixer_weight(0, 0)) {
                allocate(store, &layout);
            }
            if !is_initialized(store, &layout, 0) {
                init_embeddings(store, &layout, 0, s_max, rng)?;
            }
            init_embeddings(store, &layout, task, s_max, rng)?;
        }
        init_classifier(store, task, self.backbone.dim, self.classes[task], rng);
        Ok(())
    }

    /// Logits of `task` with masks built inside `g` at scale `s`.
    pub fn task_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        task: usize,
        current: usize,
        s: f64,
        inputs: &[&[usize]],
    ) -> Result<Var> {
        let masks = match self.mask {
            Some(kind) if task > 0 => Some(mask_vars(g, store, &self.layout(), kind, task, current, s)?),
            _ => None,
        };
        let enc = encode(g, store, &self.backbone, inputs, masks.as_deref())?;
        classify(g, store, task, enc)
    }

    /// Mask values of `task` at scale `s`, or `None` where the task is unmasked.
    pub fn mask_values(&self, store: &ParamStore, task: usize, current: usize, s: f64) -> Result<Option<Vec<Vec<f64>>>> {
        match self.mask {
            Some(kind) if task > 0 => Ok(Some(task_masks(store, &self.layout(), kind, task, current, s)?)),
            _ => Ok(None),
        }
    }

    /// Logits with fixed mask values, without gradient bookkeeping beyond the
    /// graph itself. Users are processed in chunks of `chunk`.
    pub fn logits_with_masks(
        &self,
        store: &ParamStore,
        task: usize,
        masks: Option<&[Vec<f64>]>,
        inputs: &[&[usize]],
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let mask_vars = match masks {
                Some(ms) => Some(
                    ms.iter().map(|m| g.constant(DenseArray::vector(m.clone()))).collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let enc = encode(&mut g, store, &self.backbone, part, mask_vars.as_deref())?;
            let logits = classify(&mut g, store, task, enc)?;
            let v = g.value(logits);
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Inference logits of `task` with masks at `s_max`.
    pub fn infer(
        &self,
        store: &ParamStore,
        task: usize,
        current: usize,
        s_max: f64,
        inputs: &[&[usize]],
    ) -> Result<Vec<Vec<f64>>> {
        if !store.contains(&crate::backbone::classifier_weight(task)) {
            return Err(Error::UntrainedTask(task));
        }
        let masks = self.mask_values(store, task, current, s_max)?;
        self.logits_with_masks(store, task, masks.as_deref(), inputs, 256)
    }
}

/// Score of `task` over `users` with inference masks.
pub fn evaluate(
    spec: &ModelSpec,
    store: &ParamStore,
    bundle: &DatasetBundle,
    task: usize,
    current: usize,
    s_max: f64,
    users: &[usize],
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let kind = bundle.tasks[task].kind;
    let inputs: Vec<&[usize]> = users.iter().map(|&u| task_input(&bundle.users[u], kind)).collect();
    let labels: Vec<usize> = users.iter().map(|&u| task_label(bundle, task, u)).collect::<Result<_>>()?;
    let logits = spec.infer(store, task, current, s_max, &inputs)?;
    score(bundle.tasks[task].metric, &logits, &labels)
}

pub fn score(metric: Metric, logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    match metric {
        Metric::Mrr5 => {
            let total = logits.iter().zip(labels).map(|(l, &y)| mrr_at_k(l, y, 5)).sum::<Result<f64>>()?;
            Ok(total / labels.len() as f64)
        }
        Metric::Acc => accuracy(&logits.iter().map(|l| argmax(l)).collect::<Vec<_>>(), labels),
    }
}

/// Frozen copy of the model taken before a task starts, with the inference
/// masks of every earlier task.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTeacher {
    pub params: ParamStore,
    pub masks: Vec<Option<FrozenMasks>>,
}

impl FrozenTeacher {
    pub fn capture(spec: &ModelSpec, store: &ParamStore, current: usize, s_max: f64) -> Result<Self> {
        let masks = (0..current)
            .map(|j| match spec.mask {
                Some(kind) => snapshot_masks(store, &spec.layout(), kind, j, current, s_max).map(Some),
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(FrozenTeacher { params: store.clone(), masks })
    }

    /// Mask values the teacher applies for task `j` (none for the source task).
    fn forward_masks(&self, j: usize) -> Option<&[Vec<f64>]> {
        if j == 0 {
            None
        } else {
            self.masks[j].as_ref().map(|m| m.slots.as_slice())
        }
    }
}

/// Raw teacher logits of task `j` for `users`.
pub fn generate_pseudo_labels(
    spec: &ModelSpec,
    teacher: &FrozenTeacher,
    bundle: &DatasetBundle,
    j: usize,
    users: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if j >= teacher.masks.len() {
        return Err(Error::InvalidArgument(format!("teacher holds no task {j}")));
    }
    let kind = bundle.tasks[j].kind;
    let inputs: Vec<&[usize]> = users
        .iter()
        .map(|&u| bundle.users.get(u).map(|s| task_input(s, kind)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidArgument("pseudo-labels requested for an unknown user".into()))?;
    spec.logits_with_masks(&teacher.params, j, teacher.forward_masks(j), &inputs, 256)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `ρ = 1 − mean_k σ(c·cos(m_k, m̃_k))`.
pub fn sampling_ratio(current: &[Vec<f64>], frozen: &[Vec<f64>], c: f64) -> Result<f64> {
    if current.len() != frozen.len() || current.is_empty() {
        return Err(Error::shape("sampling_ratio", format!("{} vs {} mask slots", current.len(), frozen.len())));
    }
    if c <= 0.0 {
        return Err(Error::InvalidArgument(format!("c must be positive, got {c}")));
    }
    let mut total = 0.0;
    for (a, b) in current.iter().zip(frozen) {
        if a.len() != b.len() {
            return Err(Error::shape("sampling_ratio", format!("slot widths {} vs {}", a.len(), b.len())));
        }
        total += sigmoid(c * cosine(a, b));
    }
    Ok(1.0 - total / current.len() as f64)
}

/// `⌈ρ·|U|⌉` distinct users (at least one), uniformly without replacement.
pub fn sample_users(roster: &[usize], rho: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("sampling rate {rho} outside [0, 1]")));
    }
    if roster.is_empty() {
        return Err(Error::EmptyInput("sample_users"));
    }
    let n = ((rho * roster.len() as f64).ceil() as usize).clamp(1, roster.len());
    Ok(sample(rng, roster.len(), n).into_iter().map(|k| roster[k]).collect())
}

/// Per-epoch retention targets: for each earlier task its rate, loss weight,
/// sampled users and their cached pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionPlan {
    pub rho: Vec<f64>,
    pub weights: Vec<f64>,
    pub users: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Vec<f64>>>,
}

impl RetentionPlan {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &ModelSpec,
        store: &ParamStore,
        teacher: &FrozenTeacher,
        bundle: &DatasetBundle,
        cfg: &TrainConfig,
        task: usize,
        roster: &[usize],
        epoch: usize,
    ) -> Result<Self> {
        if task == 0 {
            return Err(Error::InvalidArgument("the source task retains nothing".into()));
        }
        let own = spec.mask_values(store, task, task, cfg.s_max)?;
        let mut rho = (0..task)
            .map(|j| match (&own, &teacher.masks[j]) {
                (Some(m), Some(f)) => sampling_ratio(m, &f.slots, cfg.c),
                _ => Ok(1.0),
            })
            .collect::<Result<Vec<f64>>>()?;
        match cfg.sampling {
            Sampling::Relation => {}
            Sampling::Min => {
                let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
                rho.iter_mut().for_each(|r| *r = min);
            }
            Sampling::Full => rho.iter_mut().for_each(|r| *r = 1.0),
        }
        let weights = normalized(&rho)?;
        let mut users = Vec::with_capacity(task);
        let mut targets = Vec::with_capacity(task);
        for (j, &r) in rho.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, task, epoch, Purpose::Sample(j));
            let picked = sample_users(roster, r, &mut rng)?;
            targets.push(generate_pseudo_labels(spec, teacher, bundle, j, &picked)?);
            users.push(picked);
        }
        Ok(RetentionPlan { rho, weights, users, targets })
    }

    /// Users and pseudo-labels that earlier task `j` contributes to batch `b`
    /// of `batches`; the sample is cycled so every batch sees at least one user.
    pub fn chunk(&self, j: usize, b: usize, batches: usize) -> (Vec<usize>, Vec<f64>) {
        let m = self.users[j].len();
        let per = m.div_ceil(batches);
        let idx = (b * per..(b + 1) * per).map(|k| k % m);
        let mut users = Vec::with_capacity(per);
        let mut flat = Vec::new();
        for k in idx {
            users.push(self.users[j][k]);
            flat.extend_from_slice(&self.targets[j][k]);
        }
        (users, flat)
    }
}

fn normalized(rho: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = rho.iter().sum();
    if rho.is_empty() || total <= 0.0 {
        return Err(Error::EmptyInput("retention plan"));
    }
    Ok(rho.iter().map(|r| r / total).collect())
}

/// Cross-entropy of `task` on a batch with masks at scale `s`.
#[allow(clippy::too_many_arguments)]
pub fn class_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    store: &ParamStore,
    bundle: &DatasetBundle,
    task: usize,
    s: f64,
    users: &[usize],
) -> Result<Var> {
    let kind = bundle.tasks[task].kind;
    let inputs: Vec<&[usize]> = users.iter().map(|&u| task_input(&bundle.users[u], kind)).collect();
    let labels: Vec<usize> = users.iter().map(|&u| task_label(bundle, task, u)).collect::<Result<_>>()?;
    let logits = spec.task_logits(g, store, task, task, s, &inputs)?;
    g.cross_entropy(logits, &labels)
}

/// Weighted MSE between current predictions of every earlier task and the
/// teacher's pseudo-labels, over the plan's users for batch `b`.
#[allow(clippy::too_many_arguments)]
pub fn retention_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    store: &ParamStore,
    bundle: &DatasetBundle,
    plan: &RetentionPlan,
    task: usize,
    s_max: f64,
    b: usize,
    batches: usize,
) -> Result<Var> {
    if plan.rho.is_empty() {
        return Err(Error::EmptyInput("retention plan"));
    }
    let mut total: Option<Var> = None;
    for j in 0..plan.rho.len() {
        let (users, targets) = plan.chunk(j, b, batches);
        let kind = bundle.tasks[j].kind;
        let inputs: Vec<&[usize]> = users.iter().map(|&u| task_input(&bundle.users[u], kind)).collect();
        let logits = spec.task_logits(g, store, j, task, s_max, &inputs)?;
        let mse = g.mse(logits, &targets)?;
        let term = g.scale(mse, plan.weights[j])?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one earlier task"))
}

/// One line of per-epoch training output.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Task the value refers to (an earlier task for retention statistics).
    pub task: usize,
    pub split: &'static str,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskOutcome {
    pub logs: Vec<EpochLog>,
    /// Wall-clock seconds per epoch.
    pub timings: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

struct EarlyStop {
    best: f64,
    best_epoch: usize,
    best_params: Option<ParamStore>,
    stale: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop { best: f64::NEG_INFINITY, best_epoch: 0, best_params: None, stale: 0, patience }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, valid: f64, store: &ParamStore) -> bool {
        if valid > self.best {
            self.best = valid;
            self.best_epoch = epoch;
            self.best_params = Some(store.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    fn finish(self, store: &mut ParamStore, outcome: &mut TaskOutcome) {
        if let Some(p) = self.best_params {
            *store = p;
        }
        outcome.best_epoch = self.best_epoch;
        outcome.best_valid = self.best;
    }
}

fn batches_of(users: &[usize], size: usize) -> Vec<&[usize]> {
    users.chunks(size).collect()
}

/// Trains the backbone and source-task classifier to predict every next item;
/// keeps the parameters with the best validation score.
pub fn pretrain_first_task(
    spec: &ModelSpec,
    store: &mut ParamStore,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    freeze: Option<&FreezeMap>,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if bundle.tasks.first().map(|t| t.kind) != Some(TaskKind::NextItem) {
        return Err(Error::InvalidArgument("the first task must be next-item".into()));
    }
    let split = bundle.split(0)?;
    if split.train.is_empty() {
        return Err(Error::EmptyInput("pretrain_first_task"));
    }
    let mut adam = Adam::new(cfg.pretrain_lr);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut outcome = TaskOutcome::default();
    for epoch in 0..cfg.pretrain_epochs {
        let started = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut stream_rng(cfg.seed, 0, epoch, Purpose::Shuffle));
        let mut loss_sum = 0.0;
        let batches = batches_of(&order, cfg.batch_size);
        for batch in &batches {
            let seqs: Vec<&[usize]> = batch.iter().map(|&u| bundle.users[u].items.as_slice()).collect();
            let mut g = Graph::new();
            let loss = autoregressive_loss(&mut g, store, &spec.backbone, 0, &seqs)?;
            loss_sum += g.value(loss).data()[0];
            let grads = g.backward(loss)?;
            adam.step(store, &grads, freeze)?;
        }
        let valid = evaluate(spec, store, bundle, 0, 0, cfg.s_max, &split.valid)?;
        outcome.timings.push(started.elapsed().as_secs_f64());
        outcome.logs.push(EpochLog { epoch, task: 0, split: "train", metric: "loss".into(), value: loss_sum / batches.len() as f64 });
        outcome.logs.push(EpochLog { epoch, task: 0, split: "valid", metric: bundle.tasks[0].metric.name().into(), value: valid });
        if stop.observe(epoch, valid, store) {
            break;
        }
    }
    stop.finish(store, &mut outcome);
    Ok(outcome)
}

/// Trains classification task `task` on its training users. With a teacher and
/// `cfg.alpha > 0`, adds the weighted retention loss over earlier tasks,
/// refreshing the retention plan every epoch.
pub fn train_task(
    spec: &ModelSpec,
    store: &mut ParamStore,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    task: usize,
    teacher: Option<&FrozenTeacher>,
    freeze: Option<&FreezeMap>,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if task == 0 {
        return pretrain_first_task(spec, store, bundle, cfg, freeze);
    }
    let retain = cfg.alpha > 0.0;
    if retain && teacher.is_none() {
        return Err(Error::InvalidArgument(format!("task {task} needs a frozen teacher for retention")));
    }
    let split = bundle.split(task)?;
    if split.train.is_empty() {
        return Err(Error::EmptyInput("train_task"));
    }
    let metric = bundle.tasks[task].metric;
    let mut adam = Adam::new(cfg.lr);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut outcome = TaskOutcome::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut stream_rng(cfg.seed, task, epoch, Purpose::Shuffle));
        let batches = batches_of(&order, cfg.batch_size);
        let plan = match (retain, teacher) {
            (true, Some(t)) => {
                let plan = RetentionPlan::build(spec, store, t, bundle, cfg, task, &split.train, epoch)?;
                for j in 0..task {
                    outcome.logs.push(EpochLog { epoch, task: j, split: "train", metric: "rho".into(), value: plan.rho[j] });
                    outcome.logs.push(EpochLog {
                        epoch,
                        task: j,
                        split: "train",
                        metric: "pseudo_users".into(),
                        value: plan.users[j].len() as f64,
                    });
                }
                Some(plan)
            }
            _ => None,
        };
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let s = anneal_scale(b + 1, batches.len(), cfg.s_max)?;
            let mut g = Graph::new();
            let mut loss = class_loss(&mut g, spec, store, bundle, task, s, batch)?;
            if let Some(plan) = &plan {
                let kr = retention_loss(&mut g, spec, store, bundle, plan, task, cfg.s_max, b, batches.len())?;
                let kr = g.scale(kr, cfg.alpha)?;
                loss = g.add(loss, kr)?;
            }
            loss_sum += g.value(loss).data()[0];
            let grads = g.backward(loss)?;
            adam.step(store, &grads, freeze)?;
        }
        let valid = evaluate(spec, store, bundle, task, task, cfg.s_max, &split.valid)?;
        outcome.timings.push(started.elapsed().as_secs_f64());
        outcome.logs.push(EpochLog { epoch, task, split: "train", metric: "loss".into(), value: loss_sum / batches.len() as f64 });
        outcome.logs.push(EpochLog { epoch, task, split: "valid", metric: metric.name().into(), value: valid });
        if stop.observe(epoch, valid, store) {
            break;
        }
    }
    stop.finish(store, &mut outcome);
    Ok(outcome)
}

/// Test scores of every task up to `current`.
pub fn evaluate_all(
    spec: &ModelSpec,
    store: &ParamStore,
    bundle: &DatasetBundle,
    current: usize,
    s_max: f64,
) -> Result<BTreeMap<usize, f64>> {
    (0..=current)
        .map(|t| Ok((t, evaluate(spec, store, bundle, t, current, s_max, &bundle.split(t)?.test)?)))
        .collect()
}
