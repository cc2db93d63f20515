use std::collections::BTreeMap;

use super::array::DenseArray;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Layer-normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients of a scalar root with respect to every parameter leaf it reaches.
pub type Gradients = BTreeMap<String, DenseArray>;

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gate(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv1d { input: Var, kernel: Var, dilation: usize },
    LayerNorm { input: Var, gain: Var, xhat: Vec<f64>, rstd: Vec<f64>, bias: Var },
    Gather { table: Var, indices: Vec<usize> },
    SelectRows { input: Var, rows: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Gate(..) => "gate",
            Op::MatMul(..) => "matmul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Conv1d { .. } => "causal_dilated_conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph. Values are computed eagerly as nodes are
/// appended, so node order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C[m,n] (+)= A[m,k] * B[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n (row-major, contiguous) regions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Returns the (already computed) value of `root`.
    pub fn forward(&self, root: Var) -> Result<&DenseArray> {
        self.nodes.get(root.0).map(|n| &n.value).ok_or(Error::UnknownNode(root.0))
    }

    fn push(&mut self, op: Op, value: DenseArray, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf holding data that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> Result<Var> {
        self.push(Op::Constant, value, false)
    }

    /// Trainable leaf copied from `store`; repeated requests for the same name
    /// share one node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(Op::Param(name.to_string()), value, true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaf registered under a parameter name without a backing store.
    pub fn param_value(&mut self, name: &str, value: DenseArray) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` already in graph")));
        }
        let v = self.push(Op::Param(name.to_string()), value, true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = DenseArray::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    fn row_broadcast(&mut self, x: Var, v: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        if vv.len() != vx.last_dim() {
            return Err(Error::shape(
                op.name(),
                format!("vector of {} against trailing axis {}", vv.len(), vx.last_dim()),
            ));
        }
        let w = vv.len();
        let data = vx.data().iter().enumerate().map(|(i, &a)| f(a, vv.data()[i % w])).collect();
        let value = DenseArray::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(v);
        self.push(op, value, ng)
    }

    /// `x + b` with `b` broadcast along the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, Op::AddBias(x, b), |a, c| a + c)
    }

    /// `x ∘ m` with the gate vector `m` broadcast along the trailing axis.
    pub fn gate(&mut self, x: Var, m: Var) -> Result<Var> {
        self.row_broadcast(x, m, Op::Gate(x, m), |a, c| a * c)
    }

    /// `x · w` where `x` is viewed as `[rows, k]` (leading axes flattened) and
    /// `w` is `[k, n]`. The result keeps the leading axes of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape().len() != 2 || vw.shape()[0] != vx.last_dim() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", vx.shape(), vw.shape())));
        }
        let (m, k, n) = (vx.rows(), vx.last_dim(), vw.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, vx.data(), (k as isize, 1), vw.data(), (n as isize, 1), 0.0, &mut out);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = DenseArray::new(shape, out)?;
        let ng = self.ng(x) || self.ng(w);
        self.push(Op::MatMul(x, w), value, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(Op::Relu(a), value, ng)
    }

    /// Causal dilated 1-D convolution. `input` is `[n, f_in]` or
    /// `[batch, n, f_in]`, `kernel` is `[w, f_in, f_out]`. Tap `j` reads input
    /// position `t - (w-1-j)·dilation`; positions before the sequence start are
    /// zero, so output `t` never depends on inputs after `t`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be at least 1".into()));
        }
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (batch, n, fin) = match *vi.shape() {
            [n, f] => (1, n, f),
            [b, n, f] => (b, n, f),
            _ => return Err(Error::shape("causal_dilated_conv1d", format!("input {:?}", vi.shape()))),
        };
        if n == 0 {
            return Err(Error::EmptyInput("causal_dilated_conv1d"));
        }
        let (w, kin, fout) = match *vk.shape() {
            [w, a, b] => (w, a, b),
            _ => return Err(Error::shape("causal_dilated_conv1d", format!("kernel {:?}", vk.shape()))),
        };
        if kin != fin {
            return Err(Error::shape(
                "causal_dilated_conv1d",
                format!("kernel expects {kin} input features, input has {fin}"),
            ));
        }
        let rows = batch * n;
        let mut out = vec![0.0; rows * fout];
        let mut tap_out = vec![0.0; rows * fout];
        for j in 0..w {
            let shift = (w - 1 - j) * dilation;
            if shift >= n {
                continue;
            }
            let kj = &vk.data()[j * fin * fout..(j + 1) * fin * fout];
            gemm(rows, fin, fout, vi.data(), (fin as isize, 1), kj, (fout as isize, 1), 0.0, &mut tap_out);
            for b in 0..batch {
                for t in shift..n {
                    let dst = (b * n + t) * fout;
                    let src = (b * n + t - shift) * fout;
                    for o in 0..fout {
                        out[dst + o] += tap_out[src + o];
                    }
                }
            }
        }
        let mut shape = vi.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let value = DenseArray::new(shape, out)?;
        let ng = self.ng(input) || self.ng(kernel);
        self.push(Op::Conv1d { input, kernel, dilation }, value, ng)
    }

    /// Normalizes each row over the trailing axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vi, vg, vb) = (self.value(input), self.value(gain), self.value(bias));
        let f = vi.last_dim();
        if vg.len() != f || vb.len() != f {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {} / bias {} against {f} features", vg.len(), vb.len()),
            ));
        }
        let rows = vi.rows();
        let mut xhat = vec![0.0; rows * f];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * f];
        for r in 0..rows {
            let x = vi.row(r);
            let mean = x.iter().sum::<f64>() / f as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..f {
                let h = (x[c] - mean) * rs;
                xhat[r * f + c] = h;
                out[r * f + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = DenseArray::new(vi.shape().to_vec(), out)?;
        let ng = self.ng(input) || self.ng(gain) || self.ng(bias);
        self.push(Op::LayerNorm { input, gain, xhat, rstd, bias }, value, ng)
    }

    /// Row lookup: output shape is `out_shape ++ [table columns]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], out_shape: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", vt.shape())));
        }
        let (vocab, f) = (vt.shape()[0], vt.shape()[1]);
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather", format!("{} indices for {out_shape:?}", indices.len())));
        }
        let mut out = Vec::with_capacity(indices.len() * f);
        for (pos, &i) in indices.iter().enumerate() {
            if i >= vocab {
                return Err(Error::OutOfVocabulary { position: pos, item: i, vocab });
            }
            out.extend_from_slice(vt.row(i));
        }
        let mut shape = out_shape.to_vec();
        shape.push(f);
        let value = DenseArray::new(shape, out)?;
        let ng = self.ng(table);
        self.push(Op::Gather { table, indices: indices.to_vec() }, value, ng)
    }

    /// Picks rows of `input` viewed as `[rows, last_dim]`; result is `[k, last_dim]`.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let vi = self.value(input);
        let (total, f) = (vi.rows(), vi.last_dim());
        if rows.is_empty() {
            return Err(Error::EmptyInput("select_rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            if r >= total {
                return Err(Error::shape("select_rows", format!("row {r} of {total}")));
            }
            out.extend_from_slice(vi.row(r));
        }
        let value = DenseArray::new(vec![rows.len(), f], out)?;
        let ng = self.ng(input);
        self.push(Op::SelectRows { input, rows: rows.to_vec() }, value, ng)
    }

    /// Final position of every sequence in a `[batch, n, f]` (or `[n, f]`) array.
    pub fn last_rows(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (batch, n) = match shape[..] {
            [n, _] => (1, n),
            [b, n, _] => (b, n),
            _ => return Err(Error::shape("last_rows", format!("{shape:?}"))),
        };
        let rows: Vec<usize> = (0..batch).map(|b| b * n + n - 1).collect();
        self.select_rows(input, &rows)
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = DenseArray::vector(out);
        self.push(Op::Concat(parts.to_vec()), value, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(a);
        self.push(Op::Reshape(a), value, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), DenseArray::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Op::Mean(a), DenseArray::scalar(s), ng)
    }

    /// Mean softmax cross-entropy of `logits` (`[rows, classes]`) against
    /// integer labels, evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, c) = (vl.rows(), vl.last_dim());
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[y];
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        let value = DenseArray::scalar(total / rows as f64);
        self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, value, ng)
    }

    /// Mean over all elements of `(pred - target)²`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != target.len() {
            return Err(Error::shape("mse", format!("{} predictions, {} targets", vp.len(), target.len())));
        }
        let s = vp.data().iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        let value = DenseArray::scalar(s / target.len() as f64);
        let ng = self.ng(pred);
        self.push(Op::Mse { pred, target: target.to_vec() }, value, ng)
    }

    /// Reverse pass from a scalar root. Returns `d root / d param` for every
    /// parameter leaf that the root depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.forward(root)?;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), DenseArray::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, 1.0, &g));
                    self.acc(&mut grads, *b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, 1.0, &g));
                    self.acc(&mut grads, *b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * vb[k];
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * va[k];
                        }
                    });
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, |d| axpy(d, *c, &g)),
                Op::AddBias(x, b) => {
                    self.acc(&mut grads, *x, |d| axpy(d, 1.0, &g));
                    self.acc(&mut grads, *b, |d| {
                        let w = d.len();
                        for (k, gv) in g.iter().enumerate() {
                            d[k % w] += gv;
                        }
                    });
                }
                Op::Gate(x, m) => {
                    let (vx, vm) = (self.value(*x).data(), self.value(*m).data());
                    let w = vm.len();
                    self.acc(&mut grads, *x, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * vm[k % w];
                        }
                    });
                    self.acc(&mut grads, *m, |d| {
                        for k in 0..g.len() {
                            d[k % w] += g[k] * vx[k];
                        }
                    });
                }
                Op::MatMul(x, w) => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (vx.rows(), vx.last_dim(), vw.shape()[1]);
                    // dX = dY · Wᵀ
                    self.acc(&mut grads, *x, |d| {
                        gemm(m, n, k, &g, (n as isize, 1), vw.data(), (1, n as isize), 1.0, d)
                    });
                    // dW = Xᵀ · dY
                    self.acc(&mut grads, *w, |d| {
                        gemm(k, m, n, vx.data(), (1, k as isize), &g, (n as isize, 1), 1.0, d)
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * y[k] * (1.0 - y[k]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut grads, *a, |d| {
                        for k in 0..d.len() {
                            if x[k] > 0.0 {
                                d[k] += g[k];
                            }
                        }
                    });
                }
                Op::Conv1d { input, kernel, dilation } => {
                    self.conv1d_backward(&mut grads, &g, *input, *kernel, *dilation);
                }
                Op::LayerNorm { input, gain, xhat, rstd, bias } => {
                    let vg = self.value(*gain).data();
                    let f = vg.len();
                    let rows = rstd.len();
                    self.acc(&mut grads, *gain, |d| {
                        for r in 0..rows {
                            for c in 0..f {
                                d[c] += g[r * f + c] * xhat[r * f + c];
                            }
                        }
                    });
                    self.acc(&mut grads, *bias, |d| {
                        for r in 0..rows {
                            for c in 0..f {
                                d[c] += g[r * f + c];
                            }
                        }
                    });
                    self.acc(&mut grads, *input, |d| {
                        let mut dh = vec![0.0; f];
                        for r in 0..rows {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for c in 0..f {
                                dh[c] = g[r * f + c] * vg[c];
                                m1 += dh[c];
                                m2 += dh[c] * xhat[r * f + c];
                            }
                            m1 /= f as f64;
                            m2 /= f as f64;
                            for c in 0..f {
                                d[r * f + c] += rstd[r] * (dh[c] - m1 - xhat[r * f + c] * m2);
                            }
                        }
                    });
                }
                Op::Gather { table, indices } => {
                    let f = self.value(*table).shape()[1];
                    self.acc(&mut grads, *table, |d| {
                        for (pos, &i) in indices.iter().enumerate() {
                            axpy(&mut d[i * f..(i + 1) * f], 1.0, &g[pos * f..(pos + 1) * f]);
                        }
                    });
                }
                Op::SelectRows { input, rows } => {
                    let f = self.value(*input).last_dim();
                    self.acc(&mut grads, *input, |d| {
                        for (k, &r) in rows.iter().enumerate() {
                            axpy(&mut d[r * f..(r + 1) * f], 1.0, &g[k * f..(k + 1) * f]);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(&mut grads, p, |d| axpy(d, 1.0, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::Reshape(a) => self.acc(&mut grads, *a, |d| axpy(d, 1.0, &g)),
                Op::Sum(a) => self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.value(*logits).last_dim();
                    let scale = g[0] / labels.len() as f64;
                    self.acc(&mut grads, *logits, |d| {
                        for (r, &y) in labels.iter().enumerate() {
                            for k in 0..c {
                                let onehot = if k == y { 1.0 } else { 0.0 };
                                d[r * c + k] += scale * (probs[r * c + k] - onehot);
                            }
                        }
                    });
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred).data();
                    let scale = 2.0 * g[0] / target.len() as f64;
                    self.acc(&mut grads, *pred, |d| {
                        for k in 0..d.len() {
                            d[k] += scale * (p[k] - target[k]);
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn conv1d_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        input: Var,
        kernel: Var,
        dilation: usize,
    ) {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (batch, n, fin) = match *vi.shape() {
            [n, f] => (1, n, f),
            [b, n, f] => (b, n, f),
            _ => unreachable!("validated in forward"),
        };
        let (w, fout) = (vk.shape()[0], vk.shape()[2]);
        let rows = batch * n;
        let mut shifted = vec![0.0; rows * fout];
        for j in 0..w {
            let shift = (w - 1 - j) * dilation;
            if shift >= n {
                continue;
            }
            // Upstream gradient realigned to the source positions of tap j.
            shifted.iter_mut().for_each(|v| *v = 0.0);
            for b in 0..batch {
                for t in shift..n {
                    let src = (b * n + t - shift) * fout;
                    let dst = (b * n + t) * fout;
                    shifted[src..src + fout].copy_from_slice(&g[dst..dst + fout]);
                }
            }
            let kj = &vk.data()[j * fin * fout..(j + 1) * fin * fout];
            self.acc(grads, input, |d| {
                gemm(rows, fout, fin, &shifted, (fout as isize, 1), kj, (1, fout as isize), 1.0, d)
            });
            self.acc(grads, kernel, |d| {
                let dj = &mut d[j * fin * fout..(j + 1) * fin * fout];
                gemm(fin, rows, fout, vi.data(), (1, fin as isize), &shifted, (fout as isize, 1), 1.0, dj)
            });
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
