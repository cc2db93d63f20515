use std::collections::BTreeMap;

use super::array::DenseArray;
use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-tensor Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: DenseArray,
    pub v: DenseArray,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: DenseArray::zeros(shape), v: DenseArray::zeros(shape), step: 0 }
    }
}

/// One bias-corrected Adam step. Coordinates with `frozen[k] == true` are left
/// untouched, moments included.
pub fn adam_update(
    param: &mut DenseArray,
    grad: &DenseArray,
    state: &mut AdamState,
    lr: f64,
    frozen: Option<&[bool]>,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() {
        return Err(Error::shape(
            "adam_update",
            format!("param {:?}, grad {:?}, state {:?}", param.shape(), grad.shape(), state.m.shape()),
        ));
    }
    if let Some(f) = frozen {
        if f.len() != param.len() {
            return Err(Error::shape("adam_update", "freeze mask length differs from parameter"));
        }
    }
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let (p, g) = (param.data_mut(), grad.data());
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for k in 0..p.len() {
        if frozen.is_some_and(|f| f[k]) {
            continue;
        }
        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
        let mh = m[k] / c1;
        let vh = v[k] / c2;
        p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Coordinates that must not move, keyed by parameter name.
pub type FreezeMap = BTreeMap<String, Vec<bool>>;

/// Adam over a [`ParamStore`]. Parameters absent from a step's gradients are
/// not touched, so tensors outside the current graph keep both value and moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, states: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, freeze: Option<&FreezeMap>) -> Result<()> {
        for (name, g) in grads {
            let param = store.get_mut(name)?;
            let state = self.states.entry(name.clone()).or_insert_with(|| AdamState::new(param.shape()));
            let frozen = freeze.and_then(|f| f.get(name)).map(Vec::as_slice);
            adam_update(param, g, state, self.lr, frozen)?;
        }
        Ok(())
    }
}
