//! NextItNet-style temporal convolutional backbone.
//!
//! Each residual block is `conv(d) → layer norm → ReLU → conv(2d) → layer norm
//! → ReLU` plus the identity skip. A task mask, when supplied, multiplies each
//! ReLU output feature-wise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform, DenseArray, Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const ITEM_EMBEDDING: &str = "item_emb";

/// One user's ordered interaction history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: String,
    pub items: Vec<usize>,
}

impl BehaviorSequence {
    pub fn new(user_id: impl Into<String>, items: Vec<usize>, vocab: usize) -> Result<Self> {
        if items.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "behavior sequences need at least 2 items, got {}",
                items.len()
            )));
        }
        if let Some((position, &item)) = items.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(Error::OutOfVocabulary { position, item, vocab });
        }
        Ok(BehaviorSequence { user_id: user_id.into(), items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub dim: usize,
    /// Block `k` convolves with dilation `d_k` then `2·d_k`.
    pub dilations: Vec<usize>,
    pub kernel_width: usize,
    /// One mask vector per ReLU (two per block) instead of one per block.
    pub mask_per_activation: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab: 500,
            dim: 64,
            dilations: vec![1, 2, 4, 8],
            kernel_width: 3,
            mask_per_activation: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::config("dilations", "at least one residual block is required"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::config("dilations", "dilations must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "embedding size must be positive"));
        }
        if self.kernel_width == 0 {
            return Err(Error::config("kernel_width", "kernel width must be positive"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "vocabulary needs at least 2 items"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.dilations.len()
    }

    /// Number of mask vectors a task carries.
    pub fn mask_slots(&self) -> usize {
        if self.mask_per_activation {
            2 * self.blocks()
        } else {
            self.blocks()
        }
    }

    /// Mask slot gating ReLU `activation` (0 or 1) of block `block`.
    pub fn slot(&self, block: usize, activation: usize) -> usize {
        if self.mask_per_activation {
            2 * block + activation
        } else {
            block
        }
    }

    /// Names of every backbone tensor (shared across tasks).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![ITEM_EMBEDDING.to_string()];
        for k in 0..self.blocks() {
            for a in 1..=2 {
                names.push(conv_name(k, a));
                names.push(format!("{}.gain", ln_name(k, a)));
                names.push(format!("{}.bias", ln_name(k, a)));
            }
        }
        names
    }
}

fn conv_name(block: usize, which: usize) -> String {
    format!("block{block}.conv{which}")
}

fn ln_name(block: usize, which: usize) -> String {
    format!("block{block}.ln{which}")
}

pub fn classifier_weight(task: usize) -> String {
    format!("clf{task}.w")
}

pub fn classifier_bias(task: usize) -> String {
    format!("clf{task}.b")
}

/// Adds freshly initialized backbone tensors to `store`.
pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let f = cfg.dim;
    store.insert(ITEM_EMBEDDING, uniform(rng, &[cfg.vocab, f], 1.0 / (f as f64).sqrt()));
    let conv_bound = 1.0 / ((cfg.kernel_width * f) as f64).sqrt();
    for k in 0..cfg.blocks() {
        for a in 1..=2 {
            store.insert(conv_name(k, a), uniform(rng, &[cfg.kernel_width, f, f], conv_bound));
            store.insert(format!("{}.gain", ln_name(k, a)), DenseArray::filled(&[f], 1.0));
            store.insert(format!("{}.bias", ln_name(k, a)), DenseArray::zeros(&[f]));
        }
    }
    Ok(())
}

/// Task classifier `G(E) = E[-1,:]·W + b`: `W` uniform(±1/√f), `b` zero.
pub fn init_classifier(store: &mut ParamStore, task: usize, dim: usize, classes: usize, rng: &mut impl Rng) {
    store.insert(classifier_weight(task), uniform(rng, &[dim, classes], 1.0 / (dim as f64).sqrt()));
    store.insert(classifier_bias(task), DenseArray::zeros(&[classes]));
}

/// Looks up item embeddings for a batch of equal-length sequences: `[batch, n, f]`.
pub fn embed_sequences(g: &mut Graph, store: &ParamStore, seqs: &[&[usize]]) -> Result<Var> {
    let n = seqs.first().ok_or(Error::EmptyInput("embed_sequences"))?.len();
    if n == 0 {
        return Err(Error::EmptyInput("embed_sequences"));
    }
    if let Some(bad) = seqs.iter().find(|s| s.len() != n) {
        return Err(Error::shape("embed_sequences", format!("sequence lengths {n} and {}", bad.len())));
    }
    let flat: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let table = g.param(store, ITEM_EMBEDDING)?;
    g.gather(table, &flat, &[seqs.len(), n]).map_err(|e| match e {
        Error::OutOfVocabulary { position, item, vocab } => {
            Error::OutOfVocabulary { position: position % n, item, vocab }
        }
        other => other,
    })
}

/// `R_k(E) = F_k(E; m) + E`. `masks` gates the two ReLU outputs.
pub fn residual_block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    block: usize,
    input: Var,
    masks: Option<(Var, Var)>,
) -> Result<Var> {
    let d = cfg.dilations[block];
    let f = cfg.dim;
    if let Some((m1, m2)) = masks {
        for m in [m1, m2] {
            if g.value(m).len() != f {
                return Err(Error::shape(
                    "residual_block",
                    format!("mask of length {} for {f} features", g.value(m).len()),
                ));
            }
        }
    }
    let mut h = input;
    for (a, dilation) in [(1, d), (2, 2 * d)] {
        let kernel = g.param(store, &conv_name(block, a))?;
        let gain = g.param(store, &format!("{}.gain", ln_name(block, a)))?;
        let bias = g.param(store, &format!("{}.bias", ln_name(block, a)))?;
        h = g.conv1d(h, kernel, dilation)?;
        h = g.layer_norm(h, gain, bias)?;
        h = g.relu(h)?;
        if let Some((m1, m2)) = masks {
            h = g.gate(h, if a == 1 { m1 } else { m2 })?;
        }
    }
    g.add(h, input)
}

/// Runs the embedded batch through every residual block. `masks`, when given,
/// holds one gate vector per mask slot.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    seqs: &[&[usize]],
    masks: Option<&[Var]>,
) -> Result<Var> {
    if let Some(m) = masks {
        if m.len() != cfg.mask_slots() {
            return Err(Error::shape(
                "encode",
                format!("{} mask slots supplied, {} expected", m.len(), cfg.mask_slots()),
            ));
        }
    }
    let mut h = embed_sequences(g, store, seqs)?;
    for k in 0..cfg.blocks() {
        let block_masks = masks.map(|m| (m[cfg.slot(k, 0)], m[cfg.slot(k, 1)]));
        h = residual_block(g, store, cfg, k, h, block_masks)?;
    }
    Ok(h)
}

/// Task logits from the final row of each encoded sequence: `[batch, classes]`.
pub fn classify(g: &mut Graph, store: &ParamStore, task: usize, encoded: Var) -> Result<Var> {
    let last = g.last_rows(encoded)?;
    let w = g.param(store, &classifier_weight(task))?;
    let b = g.param(store, &classifier_bias(task))?;
    let z = g.matmul(last, w)?;
    g.add_bias(z, b)
}

/// Next-item logits for every prefix: row `b·(n-1) + j` scores item `j+1` of
/// sequence `b` given items `0..=j`. Uses the classifier of `task`.
pub fn autoregressive_logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    task: usize,
    seqs: &[&[usize]],
) -> Result<Var> {
    let n = seqs.first().map_or(0, |s| s.len());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("autoregressive training needs n ≥ 2, got {n}")));
    }
    let encoded = encode(g, store, cfg, seqs, None)?;
    let rows: Vec<usize> = (0..seqs.len()).flat_map(|b| (0..n - 1).map(move |j| b * n + j)).collect();
    let prefix = g.select_rows(encoded, &rows)?;
    let w = g.param(store, &classifier_weight(task))?;
    let b = g.param(store, &classifier_bias(task))?;
    let z = g.matmul(prefix, w)?;
    g.add_bias(z, b)
}

/// Mean next-item cross-entropy over all positions of a batch.
pub fn autoregressive_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    task: usize,
    seqs: &[&[usize]],
) -> Result<Var> {
    let logits = autoregressive_logits(g, store, cfg, task, seqs)?;
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
    g.cross_entropy(logits, &targets)
}

/// Encodes one user outside of any training graph. `masks` holds one vector
/// per mask slot.
pub fn encode_user(
    store: &ParamStore,
    cfg: &BackboneConfig,
    items: &[usize],
    masks: Option<&[Vec<f64>]>,
) -> Result<DenseArray> {
    let mut g = Graph::new();
    let mask_vars = match masks {
        Some(ms) => Some(
            ms.iter()
                .map(|m| g.constant(DenseArray::vector(m.clone())))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let out = encode(&mut g, store, cfg, &[items], mask_vars.as_deref())?;
    let n = items.len();
    g.value(out).clone().reshaped(vec![n, cfg.dim])
}
