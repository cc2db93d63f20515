//! Browser bindings: the mask-sharpness schedule, soft task masks with their
//! opposite-relatedness rows, and the relation sampling rate.

use usercl::engine::sampling_ratio;
use usercl::task_mask::{anneal_scale, base_mask, opposite_pair};
use wasm_bindgen::prelude::*;

fn js(err: usercl::Error) -> JsError {
    JsError::new(&err.to_string())
}

/// Sharpness `s` for every batch `1..=batches` of an epoch.
#[wasm_bindgen]
pub fn anneal_curve(batches: usize, s_max: f64) -> Result<Vec<f64>, JsError> {
    (1..=batches).map(|b| anneal_scale(b, batches, s_max).map_err(js)).collect()
}

/// Three rows of length `f`, flattened: the soft mask `σ(s·own)`, then
/// `tanh(s·other)` and `tanh(−s·other)`.
#[wasm_bindgen]
pub fn mask_rows(own: Vec<f64>, other: Vec<f64>, s: f64) -> Result<Vec<f64>, JsError> {
    if own.len() != other.len() || own.is_empty() {
        return Err(JsError::new("embeddings must be non-empty and of equal length"));
    }
    let mut out = base_mask(&own, s);
    out.extend_from_slice(opposite_pair(&other, s).data());
    Ok(out)
}

/// Fraction of current-task users that retain an earlier task whose mask is
/// `previous`.
#[wasm_bindgen]
pub fn sampling_rate(current: Vec<f64>, previous: Vec<f64>, c: f64) -> Result<f64, JsError> {
    sampling_ratio(&[current], &[previous], c).map_err(js)
}
