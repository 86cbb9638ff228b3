//! Define-by-run computation record with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive call
//! evaluates eagerly and appends one node; [`Graph::backward`] walks the
//! nodes in reverse execution order, which is a valid reverse topological
//! order because inputs always precede outputs.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{self, dot, KL_FLOOR};
use super::{NumError, ParamGrads, ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds with their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Leaf,
    Param(ParamId),
    /// `W x` with `W: m×n`, `x: n`.
    MatVec,
    Concat,
    Slice { start: usize, len: usize },
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Vector times a one-element tensor.
    ScaleBy,
    AddN,
    Mean,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
    Softmax,
    LogSoftmax,
    Sum,
    Dot,
    Cosine,
    KlDivergence,
    /// `[r_1·x, …, r_n·x]`; inputs are the rows followed by `x`.
    RowDots,
    Index(usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    kind: Primitive,
    inputs: Vec<Var>,
}

/// One executed entry of the computation record.
#[derive(Debug)]
pub struct RecordEntry<'r> {
    pub output: Var,
    pub kind: &'r Primitive,
    pub inputs: &'r [Var],
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> NumError {
    NumError::Shape(msg.into())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), consumed: false }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    pub fn store(&self) -> Option<&'a ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn record(&self) -> impl Iterator<Item = RecordEntry<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| RecordEntry {
            output: Var(i),
            kind: &n.kind,
            inputs: &n.inputs,
        })
    }

    fn push(&mut self, value: Cow<'a, Tensor>, kind: Primitive, inputs: Vec<Var>) -> Var {
        self.nodes.push(Node { value, kind, inputs });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Primitive::Leaf, Vec::new())
    }

    /// Leaf that borrows its value; no copy is made.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Primitive::Leaf, Vec::new())
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.constant(Tensor::vector(data))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node
    /// so gradients for one parameter accumulate in a single buffer.
    pub fn param(&mut self, id: ParamId) -> Result<Var, NumError> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.store.ok_or(NumError::NoParamStore)?;
        if id.0 >= store.len() {
            return Err(NumError::UnknownParam(id.0));
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Primitive::Param(id), Vec::new());
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Executes one primitive and appends it to the record.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var, NumError> {
        let value = self.forward(&kind, inputs)?;
        Ok(self.push(Cow::Owned(value), kind, inputs.to_vec()))
    }

    fn forward(&self, kind: &Primitive, inputs: &[Var]) -> Result<Tensor, NumError> {
        use Primitive::*;
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(shape_err(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        let val = |i: usize| self.value(inputs[i]);
        let vec_input = |i: usize| -> Result<&[f64], NumError> {
            let t = val(i);
            if t.is_vector() {
                Ok(t.data())
            } else {
                Err(shape_err(format!("{kind:?} expects a vector, got {:?}", t.shape())))
            }
        };
        let same_len = |a: &Tensor, b: &Tensor| {
            if a.len() == b.len() {
                Ok(())
            } else {
                Err(shape_err(format!("{kind:?}: {:?} vs {:?}", a.shape(), b.shape())))
            }
        };
        let map = |f: &dyn Fn(f64) -> f64| -> Result<Tensor, NumError> {
            arity(1)?;
            let x = val(0);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        match kind {
            Leaf | Param(_) => Err(shape_err("leaf kinds are created through constant/param")),
            MatVec => {
                arity(2)?;
                let w = val(0);
                let x = vec_input(1)?;
                if w.shape().len() != 2 || w.cols() != x.len() {
                    return Err(shape_err(format!(
                        "matvec {:?} × {}",
                        w.shape(),
                        x.len()
                    )));
                }
                Ok(Tensor::vector(tensor::matvec(w.data(), w.rows(), w.cols(), x)))
            }
            Concat => {
                if inputs.is_empty() {
                    return Err(shape_err("concat of nothing"));
                }
                let mut out = Vec::new();
                for i in 0..inputs.len() {
                    out.extend_from_slice(vec_input(i)?);
                }
                Ok(Tensor::vector(out))
            }
            Slice { start, len } => {
                arity(1)?;
                let x = vec_input(0)?;
                if *len == 0 || start + len > x.len() {
                    return Err(shape_err(format!("slice {start}+{len} of {}", x.len())));
                }
                Ok(Tensor::vector(x[*start..start + len].to_vec()))
            }
            Add | Sub | Mul => {
                arity(2)?;
                let (a, b) = (val(0), val(1));
                same_len(a, b)?;
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| match kind {
                        Add => x + y,
                        Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Scale(c) => map(&|v| c * v),
            ScaleBy => {
                arity(2)?;
                let s = val(1);
                if !s.is_scalar() {
                    return Err(shape_err("scale_by needs a one-element scale"));
                }
                let s = s.item();
                let x = val(0);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())
            }
            AddN | Mean => {
                if inputs.is_empty() {
                    return Err(shape_err(format!("{kind:?} of nothing")));
                }
                let first = val(0);
                let mut acc = first.data().to_vec();
                for i in 1..inputs.len() {
                    let t = val(i);
                    same_len(first, t)?;
                    acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
                }
                if matches!(kind, Mean) {
                    let n = inputs.len() as f64;
                    acc.iter_mut().for_each(|a| *a /= n);
                }
                Tensor::new(first.shape().to_vec(), acc)
            }
            Sigmoid => map(&tensor::sigmoid),
            Tanh => map(&f64::tanh),
            Relu => map(&|v| v.max(0.0)),
            LeakyRelu { slope } => {
                if !(*slope > 0.0 && *slope < 1.0) {
                    return Err(NumError::InvalidAttribute(format!(
                        "leaky rectifier slope {slope} outside (0, 1)"
                    )));
                }
                map(&|v| if v > 0.0 { v } else { slope * v })
            }
            Softmax => {
                arity(1)?;
                Ok(Tensor::vector(tensor::softmax(vec_input(0)?)))
            }
            LogSoftmax => {
                arity(1)?;
                Ok(Tensor::vector(tensor::log_softmax(vec_input(0)?)))
            }
            Sum => {
                arity(1)?;
                Ok(Tensor::scalar(val(0).data().iter().sum()))
            }
            Dot => {
                arity(2)?;
                same_len(val(0), val(1))?;
                Ok(Tensor::scalar(dot(val(0).data(), val(1).data())))
            }
            Cosine => {
                arity(2)?;
                same_len(val(0), val(1))?;
                Ok(Tensor::scalar(tensor::cosine(val(0).data(), val(1).data())))
            }
            KlDivergence => {
                arity(2)?;
                let p = vec_input(0)?;
                let q = vec_input(1)?;
                if p.len() != q.len() {
                    return Err(shape_err(format!("kl over {} vs {}", p.len(), q.len())));
                }
                for (name, d) in [("p", p), ("q", q)] {
                    let total: f64 = d.iter().sum();
                    if d.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
                        return Err(NumError::NotADistribution(format!(
                            "{name} sums to {total} or has negative entries"
                        )));
                    }
                }
                Ok(Tensor::scalar(tensor::kl_divergence(p, q)))
            }
            RowDots => {
                if inputs.len() < 2 {
                    return Err(shape_err("row_dots needs at least one row and a vector"));
                }
                let x = vec_input(inputs.len() - 1)?;
                let mut out = Vec::with_capacity(inputs.len() - 1);
                for i in 0..inputs.len() - 1 {
                    let r = vec_input(i)?;
                    if r.len() != x.len() {
                        return Err(shape_err(format!("row {i} has {} entries, vector {}", r.len(), x.len())));
                    }
                    out.push(dot(r, x));
                }
                Ok(Tensor::vector(out))
            }
            Index(i) => {
                arity(1)?;
                let x = val(0);
                x.data()
                    .get(*i)
                    .map(|&v| Tensor::scalar(v))
                    .ok_or_else(|| shape_err(format!("index {i} out of {}", x.len())))
            }
        }
    }

    /// Reverse pass from a scalar loss. Gradients are available for every
    /// node reachable backwards from `loss`; everything else is zero.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumError> {
        if self.consumed {
            return Err(NumError::RecordConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(NumError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        use Primitive::*;
        let y = node.value.data();
        let ins = &node.inputs;
        let input = |i: usize| self.value(ins[i]).data();
        match &node.kind {
            Leaf | Param(_) => {}
            MatVec => {
                let w = self.value(ins[0]);
                let x = input(1);
                let (rows, cols) = (w.rows(), w.cols());
                {
                    let dw = slot(grads, ins[0], rows * cols);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            tensor::axpy(g[r], x, &mut dw[r * cols..(r + 1) * cols]);
                        }
                    }
                }
                let dx = slot(grads, ins[1], cols);
                let wd = w.data();
                for r in 0..rows {
                    if g[r] != 0.0 {
                        tensor::axpy(g[r], &wd[r * cols..(r + 1) * cols], dx);
                    }
                }
            }
            Concat => {
                let mut offset = 0;
                for &v in ins {
                    let n = self.value(v).len();
                    let d = slot(grads, v, n);
                    d.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, b)| *a += b);
                    offset += n;
                }
            }
            Slice { start, len } => {
                let n = self.value(ins[0]).len();
                let d = slot(grads, ins[0], n);
                d[*start..start + len].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Add | Sub => {
                let sign = if matches!(node.kind, Add) { 1.0 } else { -1.0 };
                add_into(slot(grads, ins[0], g.len()), g, 1.0);
                add_into(slot(grads, ins[1], g.len()), g, sign);
            }
            Mul => {
                let (a, b) = (input(0).to_vec(), input(1).to_vec());
                let da = slot(grads, ins[0], g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * b[k];
                }
                let db = slot(grads, ins[1], g.len());
                for k in 0..g.len() {
                    db[k] += g[k] * a[k];
                }
            }
            Scale(c) => add_into(slot(grads, ins[0], g.len()), g, *c),
            ScaleBy => {
                let s = self.value(ins[1]).item();
                let x = input(0);
                let ds: f64 = dot(g, x);
                add_into(slot(grads, ins[0], g.len()), g, s);
                slot(grads, ins[1], 1)[0] += ds;
            }
            AddN => {
                for &v in ins {
                    add_into(slot(grads, v, g.len()), g, 1.0);
                }
            }
            Mean => {
                let w = 1.0 / ins.len() as f64;
                for &v in ins {
                    add_into(slot(grads, v, g.len()), g, w);
                }
            }
            Sigmoid => {
                let d = slot(grads, ins[0], g.len());
                for k in 0..g.len() {
                    d[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Tanh => {
                let d = slot(grads, ins[0], g.len());
                for k in 0..g.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Relu | LeakyRelu { .. } => {
                let neg = match node.kind {
                    LeakyRelu { slope } => slope,
                    _ => 0.0,
                };
                let x = input(0).to_vec();
                let d = slot(grads, ins[0], g.len());
                for k in 0..g.len() {
                    d[k] += g[k] * if x[k] > 0.0 { 1.0 } else { neg };
                }
            }
            Softmax => {
                let gy = dot(g, y);
                let d = slot(grads, ins[0], g.len());
                for k in 0..g.len() {
                    d[k] += y[k] * (g[k] - gy);
                }
            }
            LogSoftmax => {
                let total: f64 = g.iter().sum();
                let d = slot(grads, ins[0], g.len());
                for k in 0..g.len() {
                    d[k] += g[k] - y[k].exp() * total;
                }
            }
            Sum => {
                let n = self.value(ins[0]).len();
                slot(grads, ins[0], n).iter_mut().for_each(|a| *a += g[0]);
            }
            Dot => {
                let (a, b) = (input(0).to_vec(), input(1).to_vec());
                add_into(slot(grads, ins[0], a.len()), &b, g[0]);
                add_into(slot(grads, ins[1], b.len()), &a, g[0]);
            }
            Cosine => {
                let (a, b) = (input(0).to_vec(), input(1).to_vec());
                let na = tensor::l2_norm(&a);
                let nb = tensor::l2_norm(&b);
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = y[0];
                let da = slot(grads, ins[0], a.len());
                for k in 0..a.len() {
                    da[k] += g[0] * (b[k] / (na * nb) - c * a[k] / (na * na));
                }
                let db = slot(grads, ins[1], b.len());
                for k in 0..b.len() {
                    db[k] += g[0] * (a[k] / (na * nb) - c * b[k] / (nb * nb));
                }
            }
            KlDivergence => {
                let (p, q) = (input(0).to_vec(), input(1).to_vec());
                let dp = slot(grads, ins[0], p.len());
                for k in 0..p.len() {
                    if p[k] > 0.0 {
                        dp[k] += g[0] * ((p[k] / q[k].max(KL_FLOOR)).ln() + 1.0);
                    }
                }
                let dq = slot(grads, ins[1], q.len());
                for k in 0..q.len() {
                    if p[k] > 0.0 && q[k] >= KL_FLOOR {
                        dq[k] -= g[0] * p[k] / q[k];
                    }
                }
            }
            RowDots => {
                let n_rows = ins.len() - 1;
                let x = input(n_rows).to_vec();
                let mut dx = vec![0.0; x.len()];
                for i in 0..n_rows {
                    if g[i] == 0.0 {
                        continue;
                    }
                    let r = input(i);
                    tensor::axpy(g[i], r, &mut dx);
                    add_into(slot(grads, ins[i], x.len()), &x, g[i]);
                }
                add_into(slot(grads, ins[n_rows], x.len()), &dx, 1.0);
            }
            Index(i) => {
                let n = self.value(ins[0]).len();
                slot(grads, ins[0], n)[*i] += g[0];
            }
        }
    }

    // Convenience wrappers, one per primitive.

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::MatVec, &[w, x])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        self.apply(Primitive::Slice { start, len }, &[x])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumError> {
        self.apply(Primitive::Scale(c), &[x])
    }
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, NumError> {
        self.apply(Primitive::ScaleBy, &[x, s])
    }
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var, NumError> {
        self.apply(Primitive::AddN, xs)
    }
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, NumError> {
        self.apply(Primitive::Mean, xs)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Tanh, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NumError> {
        self.apply(Primitive::LeakyRelu { slope }, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::LogSoftmax, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Dot, &[a, b])
    }
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.apply(Primitive::Cosine, &[a, b])
    }
    pub fn kl(&mut self, p: Var, q: Var) -> Result<Var, NumError> {
        self.apply(Primitive::KlDivergence, &[p, q])
    }
    pub fn row_dots(&mut self, rows: &[Var], x: Var) -> Result<Var, NumError> {
        let mut ins = rows.to_vec();
        ins.push(x);
        self.apply(Primitive::RowDots, &ins)
    }
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var, NumError> {
        self.apply(Primitive::Index(i), &[x])
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], alpha: f64) {
    tensor::axpy(alpha, src, dst);
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not reach it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Zero-filled gradient for `v`.
    pub fn wrt_dense(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        let mut t = Tensor::zeros(graph.value(v).shape());
        if let Some(g) = self.wrt(v) {
            t.data_mut().copy_from_slice(g);
        }
        t
    }

    /// Moves parameter gradients into a store-indexed buffer set.
    pub fn into_param_grads(mut self, n_params: usize) -> ParamGrads {
        let mut out = ParamGrads::zeros(n_params);
        for (p, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                out.set(p, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.0; 3]);
        let p = g.softmax(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(s), 0.5);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut g = Graph::new();
        let p = g.vector(vec![0.2, 0.3, 0.5]);
        let q = g.vector(vec![0.2, 0.3, 0.5]);
        let kl = g.kl(p, q).unwrap();
        assert_eq!(g.scalar(kl), 0.0);
    }

    #[test]
    fn kl_rejects_non_distribution() {
        let mut g = Graph::new();
        let p = g.vector(vec![0.2, 0.3]);
        let q = g.vector(vec![0.5, 0.5]);
        assert!(matches!(g.kl(p, q), Err(NumError::NotADistribution(_))));
    }

    #[test]
    fn leaky_slope_must_be_in_unit_interval() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0]);
        assert!(matches!(g.leaky_relu(x, 1.0), Err(NumError::InvalidAttribute(_))));
        assert!(matches!(g.leaky_relu(x, 0.0), Err(NumError::InvalidAttribute(_))));
    }

    #[test]
    fn matvec_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(&[2, 3]));
        let x = g.vector(vec![1.0, 2.0]);
        assert!(matches!(g.matvec(w, x), Err(NumError::Shape(_))));
    }

    #[test]
    fn linear_loss_gradient_is_outer_product() {
        // loss = sum(W x)  =>  dW[r][c] = x[c], dx[c] = sum_r W[r][c]
        let mut store = ParamStore::new();
        let w_id = store
            .add("w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let unused = store.add("unused", Tensor::vector(vec![1.0, 1.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let w = g.param(w_id).unwrap();
        let x = g.vector(vec![0.5, -1.0, 2.0]);
        let y = g.matvec(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[5.0, 7.0, 9.0]);
        let pg = grads.into_param_grads(store.len());
        assert_eq!(pg.get(w_id).unwrap(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(pg.get(unused).is_none());
        assert_eq!(pg.dense(unused, &store).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(NumError::RecordConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn record_lists_ops_in_execution_order() {
        let mut g = Graph::new();
        let a = g.vector(vec![1.0, 2.0]);
        let b = g.tanh(a).unwrap();
        let c = g.sum(b).unwrap();
        let kinds: Vec<_> = g.record().map(|e| e.kind.clone()).collect();
        assert_eq!(kinds, vec![Primitive::Leaf, Primitive::Tanh, Primitive::Sum]);
        let last = g.record().last().unwrap();
        assert_eq!(last.output, c);
        assert_eq!(last.inputs, &[b]);
    }
}
