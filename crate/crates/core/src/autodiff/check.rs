use super::array::DenseArray;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the scalar value and its analytic gradient at a point. The
/// result is `max_k |analytic_k - numeric_k| / max(1, |analytic_k|)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = f(point)?;
    if analytic.len() != point.len() {
        return Err(Error::shape("finite_diff_check", "gradient length differs from point"));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + eps;
        let (up, _) = f(&x)?;
        x[k] = orig - eps;
        let (down, _) = f(&x)?;
        x[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[k] - numeric).abs() / analytic[k].abs().max(1.0));
    }
    Ok(worst)
}

/// Gradient check over every value in `store`. `loss` builds a graph from the
/// store and returns its scalar root.
pub fn check_params<L>(store: &ParamStore, eps: f64, loss: L) -> Result<f64>
where
    L: Fn(&ParamStore) -> Result<(Graph, Var)>,
{
    let layout: Vec<(String, Vec<usize>)> =
        store.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect();
    let rebuild = |flat: &[f64]| -> Result<ParamStore> {
        let mut s = ParamStore::new();
        let mut off = 0;
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            s.insert(name.clone(), DenseArray::new(shape.clone(), flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(s)
    };
    let point: Vec<f64> = store.iter().flat_map(|(_, a)| a.data().to_vec()).collect();
    finite_diff_check(
        |flat| {
            let s = rebuild(flat)?;
            let (g, root) = loss(&s)?;
            let value = g.forward(root)?.data()[0];
            let grads = g.backward(root)?;
            let mut flat_grad = Vec::with_capacity(flat.len());
            for (name, shape) in &layout {
                match grads.get(name) {
                    Some(a) => flat_grad.extend_from_slice(a.data()),
                    None => flat_grad.extend(std::iter::repeat(0.0).take(shape.iter().product())),
                }
            }
            Ok((value, flat_grad))
        },
        &point,
        eps,
    )
}
