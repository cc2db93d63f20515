//! Synthetic multi-task user data, its text file format and per-task splits.
//!
//! Every user has a primary latent state (8 values) and a secondary one (4
//! values). Items are drawn from a per-state Zipf distribution with Markov
//! successor jumps, so both states leave traces in the sequence. Classification
//! labels are functions of the latent states, replaced by uniform noise with
//! probability `1 − λ`.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BehaviorSequence;
use crate::error::{Error, Result};
use crate::metrics::Metric;

pub const PRIMARY_STATES: usize = 8;
pub const SECONDARY_STATES: usize = 4;
const FORMAT_HEADER: &str = "#usercl-dataset";
const FORMAT_VERSION: &str = "v1";
const SUCCESSOR_PROB: f64 = 0.35;
const SECONDARY_PROB: f64 = 0.3;
const ZIPF_EXPONENT: f64 = 1.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NextItem,
    Classification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NextItem => "next_item",
            TaskKind::Classification => "classification",
        }
    }
}

/// Which latent state a classification task reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Primary,
    Secondary,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub name: String,
    pub kind: TaskKind,
    pub cardinality: usize,
    pub roster_fraction: f64,
    /// Probability that a label follows the latent state rather than noise.
    pub lambda: f64,
    pub factor: Factor,
    pub metric: Metric,
}

impl TaskDescriptor {
    pub fn classification(name: &str, cardinality: usize, factor: Factor, lambda: f64, metric: Metric) -> Self {
        TaskDescriptor {
            name: name.into(),
            kind: TaskKind::Classification,
            cardinality,
            roster_fraction: 1.0,
            lambda,
            factor,
            metric,
        }
    }

    pub fn with_roster(mut self, fraction: f64) -> Self {
        self.roster_fraction = fraction;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub vocab: usize,
    pub users: usize,
    pub seq_len: usize,
    /// Classification tasks; the next-item source task is always prepended.
    pub tasks: Vec<TaskDescriptor>,
}

impl GeneratorConfig {
    /// Named task layouts: `ttl-like`, `three-task`, and `noisy` (ttl-like with
    /// an injected random-label task).
    pub fn preset(name: &str, seed: u64, users: usize, vocab: usize, seq_len: usize) -> Result<Self> {
        use Factor::*;
        let tasks = match name {
            "ttl-like" | "noisy" => vec![
                TaskDescriptor::classification("click", 32, Joint, 0.8, Metric::Mrr5).with_roster(0.8),
                TaskDescriptor::classification("age", 8, Primary, 0.9, Metric::Acc).with_roster(0.6),
                TaskDescriptor::classification("gender", 2, Secondary, 0.95, Metric::Acc).with_roster(0.6),
            ],
            "three-task" => vec![
                TaskDescriptor::classification("profile", 4, Secondary, 0.9, Metric::Acc),
                TaskDescriptor::classification("age", 8, Primary, 0.9, Metric::Acc),
            ],
            other => return Err(Error::config("tasks", format!("unknown preset `{other}`"))),
        };
        Ok(GeneratorConfig { seed, vocab, users, seq_len, tasks })
    }

    pub fn validate(&self) -> Result<()> {
        if self.users < 3 {
            return Err(Error::config("users", "at least 3 users are required"));
        }
        if self.vocab < 2 * PRIMARY_STATES {
            return Err(Error::config("vocab", format!("at least {} items are required", 2 * PRIMARY_STATES)));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len", "sequences need at least 2 items"));
        }
        for t in &self.tasks {
            if t.kind != TaskKind::Classification {
                return Err(Error::config("tasks", format!("`{}`: only classification tasks follow the source task", t.name)));
            }
            if t.cardinality < 2 {
                return Err(Error::config("tasks", format!("`{}` needs at least 2 classes", t.name)));
            }
            if !(0.0..=1.0).contains(&t.lambda) || !(t.roster_fraction > 0.0 && t.roster_fraction <= 1.0) {
                return Err(Error::config("tasks", format!("`{}`: λ and roster fraction must lie in [0, 1]", t.name)));
            }
            if t.name.contains(|c: char| c.is_whitespace() || c == '=') || t.name.is_empty() {
                return Err(Error::config("tasks", format!("task name `{}` must be a non-empty token", t.name)));
            }
        }
        Ok(())
    }
}

/// A task as stored in a bundle. Classification labels are indexed by user;
/// next-item tasks carry no stored labels (the target is each sequence's last item).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub cardinality: usize,
    pub metric: Metric,
    pub labels: Vec<Option<usize>>,
}

impl TaskSpec {
    /// Indices of the users that belong to this task.
    pub fn roster(&self, users: usize) -> Vec<usize> {
        match self.kind {
            TaskKind::NextItem => (0..users).collect(),
            TaskKind::Classification => {
                self.labels.iter().enumerate().filter_map(|(u, l)| l.map(|_| u)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub vocab: usize,
    pub split_seed: u64,
    pub users: Vec<BehaviorSequence>,
    pub tasks: Vec<TaskSpec>,
}

/// Train/validation/test user indices of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetBundle {
    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn split(&self, task: usize) -> Result<TaskSplit> {
        let spec = self.tasks.get(task).ok_or_else(|| Error::InvalidArgument(format!("no task {task}")))?;
        let roster = spec.roster(self.users.len());
        let ids: Vec<&str> = roster.iter().map(|&u| self.users[u].user_id.as_str()).collect();
        let (train, valid, test) = split_task(&ids, self.split_seed)?;
        let pick = |v: Vec<usize>| v.into_iter().map(|k| roster[k]).collect();
        Ok(TaskSplit { train: pick(train), valid: pick(valid), test: pick(test) })
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.tasks.first().ok_or_else(|| Error::config("tasks", "bundle has no tasks"))?;
        if first.kind != TaskKind::NextItem {
            return Err(Error::config("tasks", "the first task must be next-item"));
        }
        let n = self.users.first().map_or(0, |u| u.len());
        for u in &self.users {
            if u.len() != n {
                return Err(Error::InvalidArgument(format!("user {} has length {} (expected {n})", u.user_id, u.len())));
            }
        }
        for t in &self.tasks[1..] {
            if t.labels.len() != self.users.len() {
                return Err(Error::InvalidArgument(format!("task {} labels {} of {} users", t.name, t.labels.len(), self.users.len())));
            }
            if let Some(&label) = t.labels.iter().flatten().find(|&&l| l >= t.cardinality) {
                return Err(Error::LabelOutOfRange { label, classes: t.cardinality });
            }
        }
        Ok(())
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Assigns users to train/validation/test by a seeded hash of their ids:
/// `⌊5%⌋` validation, `⌊15%⌋` test, the rest training. Returns positions into `ids`.
pub fn split_task(ids: &[&str], seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if ids.len() < 3 {
        return Err(Error::InvalidArgument(format!("roster of {} users cannot be split", ids.len())));
    }
    let mut keyed: Vec<(u64, &str, usize)> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| (fnv1a(id.bytes().chain(seed.to_le_bytes()), 0xcbf2_9ce4_8422_2325), *id, k))
        .collect();
    keyed.sort();
    let n_valid = ids.len() * 5 / 100;
    let n_test = ids.len() * 15 / 100;
    let valid = keyed[..n_valid].iter().map(|k| k.2).collect();
    let test = keyed[n_valid..n_valid + n_test].iter().map(|k| k.2).collect();
    let train = keyed[n_valid + n_test..].iter().map(|k| k.2).collect();
    Ok((train, valid, test))
}

fn zipf_table(vocab: usize, rng: &mut impl Rng) -> (Vec<usize>, WeightedIndex<f64>) {
    let order: Vec<usize> = sample(rng, vocab, vocab).into_vec();
    let weights: Vec<f64> = (0..vocab).map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT)).collect();
    (order, WeightedIndex::new(weights).expect("positive weights"))
}

fn latent_label(factor: Factor, cardinality: usize, a: usize, b: usize) -> usize {
    match factor {
        Factor::Primary => a % cardinality,
        Factor::Secondary => b % cardinality,
        Factor::Joint => (a * SECONDARY_STATES + b) % cardinality,
    }
}

pub fn generate_bundle(cfg: &GeneratorConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let primary: Vec<_> = (0..PRIMARY_STATES).map(|_| zipf_table(cfg.vocab, &mut rng)).collect();
    let secondary: Vec<_> = (0..SECONDARY_STATES).map(|_| zipf_table(cfg.vocab, &mut rng)).collect();
    let successors: Vec<Vec<usize>> =
        (0..PRIMARY_STATES).map(|_| (0..cfg.vocab).map(|_| rng.gen_range(0..cfg.vocab)).collect()).collect();

    let width = cfg.users.to_string().len().max(4);
    let mut latents = Vec::with_capacity(cfg.users);
    let mut users = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let a = rng.gen_range(0..PRIMARY_STATES);
        let b = rng.gen_range(0..SECONDARY_STATES);
        let draw = |rng: &mut ChaCha8Rng, (order, dist): &(Vec<usize>, WeightedIndex<f64>)| order[dist.sample(rng)];
        let mut items = vec![draw(&mut rng, &primary[a])];
        while items.len() < cfg.seq_len {
            let r: f64 = rng.gen();
            let next = if r < SUCCESSOR_PROB {
                successors[a][*items.last().expect("non-empty")]
            } else if r < SUCCESSOR_PROB + SECONDARY_PROB {
                draw(&mut rng, &secondary[b])
            } else {
                draw(&mut rng, &primary[a])
            };
            items.push(next);
        }
        latents.push((a, b));
        users.push(BehaviorSequence::new(format!("u{u:0width$}"), items, cfg.vocab)?);
    }

    let mut tasks = vec![TaskSpec {
        name: "watch".into(),
        kind: TaskKind::NextItem,
        cardinality: cfg.vocab,
        metric: Metric::Mrr5,
        labels: Vec::new(),
    }];
    for d in &cfg.tasks {
        let distinct = match d.factor {
            Factor::Primary => PRIMARY_STATES,
            Factor::Secondary => SECONDARY_STATES,
            Factor::Joint => PRIMARY_STATES * SECONDARY_STATES,
        };
        if d.cardinality > distinct {
            log::warn!("task {} has {} classes but only {distinct} latent states inform it", d.name, d.cardinality);
        }
        let size = ((d.roster_fraction * cfg.users as f64).ceil() as usize).clamp(1, cfg.users);
        let mut labels = vec![None; cfg.users];
        let mut roster = sample(&mut rng, cfg.users, size).into_vec();
        roster.sort_unstable();
        for u in roster {
            let (a, b) = latents[u];
            labels[u] = Some(if rng.gen::<f64>() < d.lambda {
                latent_label(d.factor, d.cardinality, a, b)
            } else {
                rng.gen_range(0..d.cardinality)
            });
        }
        tasks.push(TaskSpec {
            name: d.name.clone(),
            kind: TaskKind::Classification,
            cardinality: d.cardinality,
            metric: d.metric,
            labels,
        });
    }
    let bundle = DatasetBundle { vocab: cfg.vocab, split_seed: cfg.seed, users, tasks };
    bundle.validate()?;
    Ok(bundle)
}

/// Inserts a task with uniformly random labels over `⌈fraction·|U|⌉` users at
/// task position `position`.
pub fn inject_noisy_task(
    bundle: &DatasetBundle,
    fraction: f64,
    classes: usize,
    seed: u64,
    position: usize,
) -> Result<DatasetBundle> {
    if position == 0 || position > bundle.tasks.len() {
        return Err(Error::InvalidArgument(format!("noisy task position {position} of {}", bundle.tasks.len())));
    }
    if classes < 2 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument("noisy task needs ≥ 2 classes and a fraction in (0, 1]".into()));
    }
    let users = bundle.users.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_79);
    let size = ((fraction * users as f64).ceil() as usize).min(users);
    let mut labels = vec![None; users];
    let mut roster = sample(&mut rng, users, size).into_vec();
    roster.sort_unstable();
    for u in roster {
        labels[u] = Some(rng.gen_range(0..classes));
    }
    let mut out = bundle.clone();
    out.tasks.insert(
        position,
        TaskSpec {
            name: "noise".into(),
            kind: TaskKind::Classification,
            cardinality: classes,
            metric: Metric::Acc,
            labels,
        },
    );
    Ok(out)
}

/// Position at which the noisy task goes: after the third task when there are
/// at least four, otherwise before the last.
pub fn default_noise_position(tasks: usize) -> usize {
    if tasks >= 4 {
        3
    } else {
        tasks.saturating_sub(1).max(1)
    }
}

pub fn format_bundle(bundle: &DatasetBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_HEADER} {FORMAT_VERSION}");
    let _ = writeln!(out, "vocab {}", bundle.vocab);
    let _ = writeln!(out, "split_seed {}", bundle.split_seed);
    for t in &bundle.tasks {
        let _ = writeln!(out, "task {} {} {} {}", t.name, t.kind.name(), t.cardinality, t.metric.name());
    }
    let _ = writeln!(out, "users {}", bundle.users.len());
    for (u, seq) in bundle.users.iter().enumerate() {
        let items: Vec<String> = seq.items.iter().map(usize::to_string).collect();
        let labels: Vec<String> = bundle
            .tasks
            .iter()
            .filter(|t| t.kind == TaskKind::Classification)
            .map(|t| match t.labels[u] {
                Some(l) => format!("{}={l}", t.name),
                None => format!("{}=_", t.name),
            })
            .collect();
        let _ = writeln!(out, "{}\t{}\t{}", seq.user_id, items.join(" "), labels.join(" "));
    }
    out
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    std::fs::write(path, format_bundle(bundle))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    parse_bundle(&std::fs::read_to_string(path)?, path)
}

pub fn parse_bundle(text: &str, path: &Path) -> Result<DatasetBundle> {
    let err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("file ended before {what}")));

    let (ln, header) = next("the header")?;
    let version = header
        .strip_prefix(FORMAT_HEADER)
        .map(str::trim)
        .ok_or_else(|| err(ln, format!("expected `{FORMAT_HEADER} {FORMAT_VERSION}`")))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version.to_string(), expected: FORMAT_VERSION.to_string() });
    }
    let keyed = |ln: usize, line: &str, key: &str| -> Result<u64> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| err(ln, format!("expected `{key} <number>`")))
    };
    let (ln, line) = next("vocab")?;
    let vocab = keyed(ln, line, "vocab")? as usize;
    let (ln, line) = next("split_seed")?;
    let split_seed = keyed(ln, line, "split_seed")?;

    let mut tasks = Vec::new();
    let user_count = loop {
        let (ln, line) = next("the user count")?;
        if line.starts_with("users") {
            break keyed(ln, line, "users")? as usize;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [ "task", name, kind, card, metric ] = parts[..] else {
            return Err(err(ln, "expected `task <name> <kind> <classes> <metric>`".into()));
        };
        let kind = match kind {
            "next_item" => TaskKind::NextItem,
            "classification" => TaskKind::Classification,
            other => return Err(err(ln, format!("unknown task kind `{other}`"))),
        };
        let cardinality = card.parse().map_err(|_| err(ln, format!("bad class count `{card}`")))?;
        let metric = Metric::parse(metric).ok_or_else(|| err(ln, format!("unknown metric `{metric}`")))?;
        tasks.push(TaskSpec { name: name.to_string(), kind, cardinality, metric, labels: Vec::new() });
    };

    let mut users = Vec::with_capacity(user_count);
    let classified: Vec<usize> =
        (0..tasks.len()).filter(|&t| tasks[t].kind == TaskKind::Classification).collect();
    for &t in &classified {
        tasks[t].labels = Vec::with_capacity(user_count);
    }
    for _ in 0..user_count {
        let (ln, line) = next("all users were read")
            .map_err(|_| err(text.lines().count() + 1, format!("expected {user_count} users, file truncated")))?;
        let mut fields = line.split('\t');
        let (Some(id), Some(items), labels) = (fields.next(), fields.next(), fields.next().unwrap_or("")) else {
            return Err(err(ln, "expected `id<TAB>items<TAB>labels`".into()));
        };
        let items: Vec<usize> = items
            .split(' ')
            .map(|s| s.parse().map_err(|_| err(ln, format!("bad item `{s}`"))))
            .collect::<Result<_>>()?;
        let seq = BehaviorSequence::new(id, items, vocab).map_err(|e| err(ln, e.to_string()))?;
        let pairs: Vec<&str> = if labels.is_empty() { Vec::new() } else { labels.split(' ').collect() };
        if pairs.len() != classified.len() {
            return Err(err(ln, format!("{} labels for {} classification tasks", pairs.len(), classified.len())));
        }
        for (&t, pair) in classified.iter().zip(pairs) {
            let value = pair
                .strip_prefix(tasks[t].name.as_str())
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| err(ln, format!("expected `{}=<label>`", tasks[t].name)))?;
            let label = match value {
                "_" => None,
                v => {
                    let l: usize = v.parse().map_err(|_| err(ln, format!("bad label `{v}`")))?;
                    if l >= tasks[t].cardinality {
                        return Err(err(ln, format!("label {l} out of range for {} classes", tasks[t].cardinality)));
                    }
                    Some(l)
                }
            };
            tasks[t].labels.push(label);
        }
        users.push(seq);
    }
    if let Some((ln, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(err(ln, "unexpected content after the last user".into()));
    }
    let bundle = DatasetBundle { vocab, split_seed, users, tasks };
    bundle.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(bundle)
}
