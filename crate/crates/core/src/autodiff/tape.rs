//! Append-only operation tape with reverse-mode gradients.
//!
//! Every forward op pushes a node holding its output value. Node inputs always
//! precede the node itself, so a single reverse sweep over the node list
//! visits each node exactly once in reverse topological order.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Owns every trainable array of a model together with its gradient buffer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds an array that takes part in the forward pass but is never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].requires_grad = false;
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the parameter gradients collected by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.params {
            let p = &mut self.params[id.0];
            if p.requires_grad {
                p.grad.add_assign(g);
            }
        }
    }
}

/// How the second operand of a binary elementwise op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Detached,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    /// Local derivative kept from the forward pass.
    Gelu(Var, Tensor),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    Column { src: Var, col: usize },
    GatherRows { table: Var, index: Vec<usize> },
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match out.as_mut() {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// libm tanh dominates GELU-heavy graphs; the exp form is accurate to a few ulp
// in absolute terms, which is all GELU needs.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

/// `(gelu(x), gelu'(x))` from one tanh evaluation.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= s;
        }
    }
    Tensor::matrix(r, c, out).expect("softmax shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Detached, value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Op::Param(id), p.value.clone(), p.requires_grad)
    }

    /// Stop-gradient: same value, excluded from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(Op::Detached, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        if (ra, ca) == (rb, cb) {
            Ok(Bcast::Same)
        } else if rb == 1 && cb == 1 {
            Ok(Bcast::Scalar)
        } else if rb == 1 && cb == ca {
            Ok(Bcast::Row)
        } else if cb == 1 && rb == ra {
            Ok(Bcast::Col)
        } else {
            Err(Error::Shape {
                op,
                detail: format!("[{ra}, {ca}] vs [{rb}, {cb}]"),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let bc = self.bcast(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let (r, c) = av.dims2();
        let ad = av.data();
        let bd = bv.data();
        // The broadcast mode is matched outside the loops so they vectorize.
        let mut out = vec![0.0; r * c];
        match bc {
            Bcast::Same => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (x, y))| *o = f(*x, *y)),
            Bcast::Row => {
                for (orow, arow) in out.chunks_exact_mut(c.max(1)).zip(ad.chunks_exact(c.max(1))) {
                    for ((o, x), y) in orow.iter_mut().zip(arow).zip(bd) {
                        *o = f(*x, *y);
                    }
                }
            }
            Bcast::Col => {
                for ((orow, arow), y) in out.chunks_exact_mut(c.max(1)).zip(ad.chunks_exact(c.max(1))).zip(bd) {
                    for (o, x) in orow.iter_mut().zip(arow) {
                        *o = f(*x, *y);
                    }
                }
            }
            Bcast::Scalar => out.iter_mut().zip(ad).for_each(|(o, x)| *o = f(*x, bd[0])),
        }
        debug_assert_eq!(out.len(), r * c);
        let shape = av.shape().to_vec();
        Ok((Tensor::new(shape, out)?, bc))
    }

    /// `a + b`; `b` may be the same shape, a `[1, cols]` row, a `[rows, 1]`
    /// column, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b, bc), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b, bc), t, rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b, bc), t, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), t, rg)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let t = self.value(a).map(|x| x + offset);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), t, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), t, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), t, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let rg = self.rg(&[a]);
        let n = x.len();
        let (mut y, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(if rg { n } else { 0 }));
        for &v in x.data() {
            let (f, d) = gelu_with_grad(v);
            y.push(f);
            if rg {
                dy.push(d);
            }
        }
        let shape = x.shape().to_vec();
        let deriv = if rg { Tensor::new(shape.clone(), dy).expect("gelu shape") } else { Tensor::zeros(&[0]) };
        self.push(Op::Gelu(a, deriv), Tensor::new(shape, y).expect("gelu shape"), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), t, rg)
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {} and {}", rows, r),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(rows, total, out)?, rg))
    }

    /// Stacks row blocks on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts {} and {}", cols, v.cols()),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, cols, data)?, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {}..{} of {}", start, start + len, r),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows { src: a, start }, Tensor::matrix(len, c, data)?, rg))
    }

    /// Column `col` as a `[rows, 1]` tensor.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if col >= c {
            return Err(Error::Shape {
                op: "column",
                detail: format!("column {} of {}", col, c),
            });
        }
        let v = self.value(a);
        let data = (0..r).map(|i| v.at(i, col)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Column { src: a, col }, Tensor::matrix(r, 1, data)?, rg))
    }

    /// Embedding lookup: row `index[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Shape {
                    op: "gather_rows",
                    detail: format!("row {} of {}", i, r),
                });
            }
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            Tensor::matrix(index.len(), c, data)?,
            rg,
        ))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(m), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(Error::Shape {
                op: "mse",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(s / n), rg))
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let w = vec![1.0; targets.len()];
        self.weighted_cross_entropy(logits, targets, &w)
    }

    /// Cross-entropy with a per-row weight; the result is
    /// `sum_r w_r * ce_r / sum_r w_r`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2();
        if targets.len() != r || weights.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{} rows, {} targets, {} weights", r, targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::ClassIndex { index: bad, classes: c });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::InvalidArgument("cross_entropy weights sum to zero".into()));
        }
        let probs = softmax_rows(self.value(logits));
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let lv = self.value(logits).row_slice(i);
            let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += w * (lse - lv[t]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss / wsum),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Detached => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, g.clone()));
                    grads[idx] = Some(g);
                    continue;
                }
                _ => {}
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients { nodes: grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&delta),
            None => grads[v.0] = Some(delta.reshape(self.nodes[v.0].value.shape().to_vec()).expect("grad shape")),
        }
    }

    fn reduce_bcast(&self, g: &Tensor, target: Var, bc: Bcast, scale: impl Fn(usize, usize) -> f64) -> Tensor {
        let (r, c) = g.dims2();
        let shape = self.value(target).shape().to_vec();
        let gd = g.data();
        let data = match bc {
            Bcast::Same => (0..r * c).map(|i| gd[i] * scale(i / c, i % c)).collect(),
            Bcast::Row => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += gd[i * c + j] * scale(i, j);
                    }
                }
                out
            }
            Bcast::Col => (0..r)
                .map(|i| (0..c).map(|j| gd[i * c + j] * scale(i, j)).sum())
                .collect(),
            Bcast::Scalar => vec![(0..r * c).map(|i| gd[i] * scale(i / c, i % c)).sum()],
        };
        Tensor::new(shape, data).expect("broadcast grad shape")
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Detached => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    self.accum(grads, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    self.accum(grads, *b, Tensor::matrix(k, n, db).unwrap());
                }
            }
            Op::Add(a, b, bc) => {
                self.accum(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let d = self.reduce_bcast(g, *b, *bc, |_, _| 1.0);
                    self.accum(grads, *b, d);
                }
            }
            Op::Sub(a, b, bc) => {
                self.accum(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let d = self.reduce_bcast(g, *b, *bc, |_, _| -1.0);
                    self.accum(grads, *b, d);
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let c = av.cols();
                if self.requires_grad(*a) {
                    let bd = bv.data();
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            let y = match bc {
                                Bcast::Same => bd[i],
                                Bcast::Row => bd[i % c],
                                Bcast::Col => bd[i / c],
                                Bcast::Scalar => bd[0],
                            };
                            gv * y
                        })
                        .collect();
                    self.accum(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.requires_grad(*b) {
                    let ad = av.data();
                    let d = self.reduce_bcast(g, *b, *bc, |i, j| ad[i * c + j]);
                    self.accum(grads, *b, d);
                }
            }
            Op::Scale(a, f) => self.accum(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accum(grads, *a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Gelu(a, deriv) => {
                let d = g.data().iter().zip(deriv.data()).map(|(gv, dv)| gv * dv).collect();
                self.accum(grads, *a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(a) => {
                let (r, c) = out.dims2();
                let y = out.data();
                let gd = g.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| gd[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        d[i * c + j] = y[i * c + j] * (gd[i * c + j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.accum(grads, *p, Tensor::matrix(r, w, d).unwrap());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut row = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.requires_grad(*p) {
                        let d = g.data()[row * c..(row + r) * c].to_vec();
                        self.accum(grads, *p, Tensor::matrix(r, c, d).unwrap());
                    }
                    row += r;
                }
            }
            Op::SliceRows { src, start } => {
                if !self.requires_grad(*src) {
                    return;
                }
                // Accumulate in place; sequence scans slice the same source many times.
                let c = self.value(*src).cols();
                let acc = grads[src.0].get_or_insert_with(|| Tensor::zeros(self.value(*src).shape()));
                for (dst, s) in acc.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                    *dst += s;
                }
            }
            Op::Column { src, col } => {
                if !self.requires_grad(*src) {
                    return;
                }
                let (r, c) = self.value(*src).dims2();
                let acc = grads[src.0].get_or_insert_with(|| Tensor::zeros(self.value(*src).shape()));
                let d = acc.data_mut();
                for i in 0..r {
                    d[i * c + col] += g.data()[i];
                }
            }
            Op::GatherRows { table, index } => {
                let (r, c) = self.value(*table).dims2();
                let mut d = vec![0.0; r * c];
                for (i, &row) in index.iter().enumerate() {
                    let src = &g.data()[i * c..(i + 1) * c];
                    for (dst, s) in d[row * c..(row + 1) * c].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                self.accum(grads, *table, Tensor::matrix(r, c, d).unwrap());
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                let s = g.item() / v.len().max(1) as f64;
                self.accum(grads, *a, Tensor::full(v.shape(), s));
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = 2.0 * g.item() / av.len().max(1) as f64;
                let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| k * (x - y)).collect();
                if self.requires_grad(*b) {
                    let neg = diff.iter().map(|v| -v).collect();
                    self.accum(grads, *b, Tensor::new(bv.shape().to_vec(), neg).unwrap());
                }
                self.accum(grads, *a, Tensor::new(av.shape().to_vec(), diff).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (r, c) = probs.dims2();
                let wsum: f64 = weights.iter().sum();
                let gs = g.item() / wsum;
                let mut d = probs.data().to_vec();
                for i in 0..r {
                    d[i * c + targets[i]] -= 1.0;
                    let w = weights[i] * gs;
                    for v in &mut d[i * c..(i + 1) * c] {
                        *v *= w;
                    }
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accum(grads, *logits, Tensor::new(shape, d).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0; 4]));
        let y = t.softmax(x);
        for &v in t.value(y).data() {
            assert_relative_eq!(v, 0.25);
        }
    }

    #[test]
    fn sigmoid_inverts_logit() {
        assert_relative_eq!(logit(0.9), 9f64.ln());
        assert_relative_eq!(logit(0.9), 2.197_224_577, epsilon = 1e-8);
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(logit(0.9)));
        let y = t.sigmoid(x);
        assert_relative_eq!(t.value(y).item(), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn mse_identity_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[1.0, 2.0]));
        let b = t.constant(Tensor::row(&[1.0, 2.0]));
        let l = t.mse(a, b).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn linear_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let wv = t.param(&store, w);
        let y = t.matmul(x, wv).unwrap();
        let loss = t.mean(y);
        let g = t.backward(loss).unwrap();
        store.accumulate(&g);
        assert_eq!(store.grad(w).item(), 3.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.0; 4]));
        let l = t.cross_entropy(x, &[0]).unwrap();
        assert_relative_eq!(t.value(l).item(), 4f64.ln());
        let g = t.backward(l).unwrap();
        let gx = g.get(x).unwrap().data().to_vec();
        assert_eq!(gx, vec![-0.75, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn backward_twice_errors_until_reset() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.mean(x);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::BackwardTwice)));
        t.reset();
        assert!(t.is_empty());
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.mean(x);
        assert!(t.backward(y).is_ok());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0; 3]));
        assert!(matches!(t.cross_entropy(x, &[3]), Err(Error::ClassIndex { index: 3, classes: 3 })));
    }

    #[test]
    fn detached_path_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(&[1.0, 2.0]));
        let b = store.add("b", Tensor::row(&[3.0, 4.0]));
        let mut t = Tape::new();
        let av = t.param(&store, a);
        let bv = t.param(&store, b);
        let bd = t.detach(bv);
        let s = t.mul(av, bd).unwrap();
        let l = t.mean(s);
        let g = t.backward(l).unwrap();
        store.accumulate(&g);
        assert_eq!(store.grad(b).data(), &[0.0, 0.0]);
        assert_eq!(store.grad(a).data(), &[1.5, 2.0]);
    }

    #[test]
    fn unreachable_param_has_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let unused = store.add("unused", Tensor::row(&[1.0, 1.0]));
        let mut t = Tape::new();
        let av = t.param(&store, a);
        let l = t.mean(av);
        let g = t.backward(l).unwrap();
        store.accumulate(&g);
        assert!(g.param(unused).is_none());
        assert_eq!(store.grad(unused).data(), &[0.0, 0.0]);
        assert_eq!(store.grad(a).item(), 1.0);
    }
}
