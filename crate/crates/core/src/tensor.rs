//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] walks the recorded operations once, in reverse insertion
//! order, and leaves `d loss / d var` on every node that requires a gradient.
//! Tapes are rebuilt on every forward pass and are confined to one thread.

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: slice {slice} has no unmasked entries")]
    DegenerateSlice { op: &'static str, slice: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Contract("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, e) in index.iter().zip(&self.shape) {
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Boolean array that is broadcast against a tensor of equal rank; every
/// extent equals the tensor's or is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Contract(format!(
                "mask shape {shape:?} does not hold {} entries",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Expands to the full `target` shape.
    fn broadcast_to(&self, target: &[usize]) -> Result<Vec<bool>> {
        let compatible = self.shape.len() == target.len()
            && self
                .shape
                .iter()
                .zip(target)
                .all(|(&m, &t)| m == t || m == 1);
        if !compatible {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                lhs: target.to_vec(),
                rhs: self.shape.clone(),
            });
        }
        if self.shape == target {
            return Ok(self.data.clone());
        }
        let n: usize = target.iter().product();
        let mut out = Vec::with_capacity(n);
        let mut index = vec![0usize; target.len()];
        for _ in 0..n {
            let mut flat = 0;
            for (axis, &i) in index.iter().enumerate() {
                let e = self.shape[axis];
                flat = flat * e + if e == 1 { 0 } else { i };
            }
            out.push(self.data[flat]);
            for axis in (0..target.len()).rev() {
                index[axis] += 1;
                if index[axis] < target[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has extent 1 on the last axis.
    LastAxis,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    MatVec(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Elu(usize),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
    Row(usize, usize),
    Sum(usize),
    SumRows(usize),
    PairwiseAdd(usize, usize),
    Attend(usize, usize),
    MaskedSoftmax {
        input: usize,
        axis: usize,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation recorder for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    fn insert(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.insert(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradient left on `var` by the last [`Tape::backward`] call.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Runs `f` on the raw gradient of `var`, if it has one.
    pub fn with_grad<R>(&self, var: Var<'_>, f: impl FnOnce(&[f64]) -> R) -> Option<R> {
        let nodes = self.nodes.borrow();
        nodes[var.id].grad.as_deref().map(f)
    }

    /// Fills in `d loss / d node` for every node that requires a gradient and
    /// is reachable from `loss`. Gradients from repeated uses are summed.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to another tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            )));
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands belong to different tapes".into()))
        }
    }

    /// Matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(rhs.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err("matmul", &a, &b));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    let brow = &b.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        self.tape
            .push("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// `self[m×k] · rhs[n×k]ᵀ`, i.e. applying a `[out × in]` weight to each row.
    pub fn matmul_nt(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(rhs.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
                return Err(shape_err("matmul_nt", &a, &b));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b.data[j * k..(j + 1) * k];
                    out[i * n + j] = dot(arow, brow);
                }
            }
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        self.tape
            .push("matmul_nt", out, Op::MatMulNt(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// Matrix-vector product `self[m×n] · x[n]`.
    pub fn matvec(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&x)?;
        let out = {
            let w = self.tape.value_of(self.id);
            let v = self.tape.value_of(x.id);
            if w.rank() != 2 || v.rank() != 1 || w.shape[1] != v.shape[0] {
                return Err(shape_err("matvec", &w, &v));
            }
            let (m, n) = (w.shape[0], w.shape[1]);
            let data = (0..m)
                .map(|i| dot(&w.data[i * n..(i + 1) * n], &v.data))
                .collect();
            Tensor {
                shape: vec![m],
                data,
            }
        };
        self.tape
            .push("matvec", out, Op::MatVec(self.id, x.id), &[self.id, x.id])
    }

    fn binary(
        &self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (out, mode) = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(rhs.id);
            let mode = broadcast_mode(name, &a, &b)?;
            let data = match mode {
                Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::LastAxis => {
                    let last = *a.shape.last().unwrap_or(&1);
                    a.data
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b.data[i / last]))
                        .collect()
                }
            };
            (
                Tensor {
                    shape: a.shape.clone(),
                    data,
                },
                mode,
            )
        };
        self.tape
            .push(name, out, make(self.id, rhs.id, mode), &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a `[d]` bias to every length-`d` row of `self`.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(bias.id);
            if b.rank() != 1 || a.shape.last() != Some(&b.shape[0]) {
                return Err(shape_err("add_bias", &a, &b));
            }
            let d = b.shape[0];
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.data[i % d])
                .collect();
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.tape
            .push("add_bias", out, Op::AddBias(self.id, bias.id), &[self.id, bias.id])
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_of(self.id);
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&x| f(x)).collect(),
            }
        };
        self.tape.push(name, out, op, &[self.id])
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| c * x, Op::Scale(self.id, c))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn elu(&self) -> Result<Var<'t>> {
        self.unary(
            "elu",
            |x| if x > 0.0 { x } else { x.exp_m1() },
            Op::Elu(self.id),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.tape.value_of(self.id).data.iter().sum());
        self.tape.push("sum", out, Op::Sum(self.id), &[self.id])
    }

    /// Column sums of a `[T×d]` matrix, giving `[d]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_of(self.id);
            if a.rank() != 2 {
                return Err(shape_err("sum_rows", &a, &a));
            }
            let d = a.shape[1];
            let mut data = vec![0.0; d];
            for row in a.data.chunks(d) {
                for (o, v) in data.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor {
                shape: vec![d],
                data,
            }
        };
        self.tape.push("sum_rows", out, Op::SumRows(self.id), &[self.id])
    }

    /// Row `index` of a `[T×d]` matrix.
    pub fn row(&self, index: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_of(self.id);
            if a.rank() != 2 || index >= a.shape[0] {
                return Err(TensorError::Contract(format!(
                    "row {index} out of range for shape {:?}",
                    a.shape
                )));
            }
            Tensor {
                shape: vec![a.shape[1]],
                data: a.row(index).to_vec(),
            }
        };
        self.tape.push("row", out, Op::Row(self.id, index), &[self.id])
    }

    /// Softmax along `axis`, restricted to positions where `mask` is true.
    /// Masked positions get weight exactly 0; a slice with no unmasked
    /// position is an error.
    pub fn masked_softmax(&self, axis: usize, mask: &Mask) -> Result<Var<'t>> {
        let (out, full_mask) = {
            let x = self.tape.value_of(self.id);
            if axis >= x.rank() {
                return Err(TensorError::Contract(format!(
                    "softmax axis {axis} out of range for shape {:?}",
                    x.shape
                )));
            }
            let full = mask.broadcast_to(&x.shape)?;
            let (outer, len, inner) = split_axis(&x.shape, axis);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let idx = |t: usize| base + t * inner;
                    let mut max = f64::NEG_INFINITY;
                    for t in 0..len {
                        if full[idx(t)] {
                            max = max.max(x.data[idx(t)]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(TensorError::DegenerateSlice {
                            op: "masked_softmax",
                            slice: o * inner + i,
                        });
                    }
                    let mut total = 0.0;
                    for t in 0..len {
                        if full[idx(t)] {
                            let e = (x.data[idx(t)] - max).exp();
                            out[idx(t)] = e;
                            total += e;
                        }
                    }
                    for t in 0..len {
                        out[idx(t)] /= total;
                    }
                }
            }
            (
                Tensor {
                    shape: x.shape.clone(),
                    data: out,
                },
                full,
            )
        };
        self.tape.push(
            "masked_softmax",
            out,
            Op::MaskedSoftmax {
                input: self.id,
                axis,
                mask: full_mask,
            },
            &[self.id],
        )
    }

    /// Unmasked softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let mask = Mask::new(vec![1; shape.len()], vec![true])?;
        self.masked_softmax(axis, &mask)
    }
}

/// Concatenates along the last axis; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
    let tape = first.tape;
    for p in parts {
        first.same_tape(p)?;
    }
    let out = {
        let values: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
        let lead = &values[0].shape[..values[0].rank() - 1];
        for v in &values[1..] {
            if v.rank() != values[0].rank() || &v.shape[..v.rank() - 1] != lead {
                return Err(shape_err("concat", &values[0], v));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor { shape, data }
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push("concat", out, Op::Concat(ids.clone()), &ids)
}

/// Stacks equally shaped vectors `[d]` into a `[n×d]` matrix.
pub fn stack<'t>(rows: &[Var<'t>]) -> Result<Var<'t>> {
    let first = rows
        .first()
        .ok_or_else(|| TensorError::Contract("stack of nothing".into()))?;
    let tape = first.tape;
    for r in rows {
        first.same_tape(r)?;
    }
    let out = {
        let values: Vec<_> = rows.iter().map(|p| tape.value_of(p.id)).collect();
        for v in &values {
            if v.rank() != 1 || v.shape != values[0].shape {
                return Err(shape_err("stack", &values[0], v));
            }
        }
        let d = values[0].shape[0];
        let mut data = Vec::with_capacity(values.len() * d);
        for v in &values {
            data.extend_from_slice(&v.data);
        }
        Tensor {
            shape: vec![values.len(), d],
            data,
        }
    };
    let ids: Vec<usize> = rows.iter().map(|p| p.id).collect();
    tape.push("stack", out, Op::Stack(ids.clone()), &ids)
}

/// `out[i,j,k] = a[i,k] + b[j,k]` for `a[T×d]`, `b[S×d]`.
pub fn pairwise_add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.same_tape(&b)?;
    let tape = a.tape;
    let out = {
        let av = tape.value_of(a.id);
        let bv = tape.value_of(b.id);
        if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[1] {
            return Err(shape_err("pairwise_add", &av, &bv));
        }
        let (t, s, d) = (av.shape[0], bv.shape[0], av.shape[1]);
        let mut data = Vec::with_capacity(t * s * d);
        for i in 0..t {
            let arow = av.row(i);
            for j in 0..s {
                data.extend(arow.iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        Tensor {
            shape: vec![t, s, d],
            data,
        }
    };
    tape.push("pairwise_add", out, Op::PairwiseAdd(a.id, b.id), &[a.id, b.id])
}

/// Per-dimension attention: `out[i,k] = Σ_j weights[i,j,k] · values[j,k]`.
pub fn attend<'t>(weights: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
    weights.same_tape(&values)?;
    let tape = weights.tape;
    let out = {
        let p = tape.value_of(weights.id);
        let v = tape.value_of(values.id);
        if p.rank() != 3 || v.rank() != 2 || p.shape[1] != v.shape[0] || p.shape[2] != v.shape[1] {
            return Err(shape_err("attend", &p, &v));
        }
        let (t, s, d) = (p.shape[0], p.shape[1], p.shape[2]);
        let mut data = vec![0.0; t * d];
        for i in 0..t {
            let orow = &mut data[i * d..(i + 1) * d];
            for j in 0..s {
                let prow = &p.data[(i * s + j) * d..(i * s + j + 1) * d];
                for ((o, w), x) in orow.iter_mut().zip(prow).zip(v.row(j)) {
                    *o += w * x;
                }
            }
        }
        Tensor {
            shape: vec![t, d],
            data,
        }
    };
    tape.push("attend", out, Op::Attend(weights.id, values.id), &[weights.id, values.id])
}

/// Mean over rows of `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let tape = logits.tape;
    let (out, probs) = {
        let z = tape.value_of(logits.id);
        if z.rank() != 2 || z.shape[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: z.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let classes = z.shape[1];
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = 0.0;
        for (row, &label) in z.data.chunks(classes).zip(labels) {
            if label >= classes {
                return Err(TensorError::Label { label, classes });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        (Tensor::scalar(loss / labels.len() as f64), probs)
    };
    tape.push(
        "cross_entropy",
        out,
        Op::CrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
            probs,
        },
        &[logits.id],
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Four interleaved partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn broadcast_mode(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape == b.shape {
        return Ok(Broadcast::Same);
    }
    let r = a.rank();
    if r >= 1 && b.rank() == r && b.shape[r - 1] == 1 && a.shape[..r - 1] == b.shape[..r - 1] {
        return Ok(Broadcast::LastAxis);
    }
    Err(shape_err(op, a, b))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn reduce_broadcast(g: &[f64], mode: Broadcast, last: usize, sign: f64, out: &mut [f64]) {
    match mode {
        Broadcast::Same => {
            for (o, v) in out.iter_mut().zip(g) {
                *o += sign * v;
            }
        }
        Broadcast::LastAxis => {
            for (i, v) in g.iter().enumerate() {
                out[i / last] += sign * v;
            }
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            accumulate(nodes, grads, a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv.data[p * n..(p + 1) * n]);
                    }
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        axpy(av.data[i * k + p], &g[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                    }
                }
            });
        }
        &Op::MatMulNt(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[0]);
            accumulate(nodes, grads, a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        axpy(g[i * n + j], &bv.data[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                    }
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for i in 0..m {
                    for j in 0..n {
                        axpy(g[i * n + j], &av.data[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                    }
                }
            });
        }
        &Op::MatVec(w, x) => {
            let (wv, xv) = (val(w), val(x));
            let (m, n) = (wv.shape[0], wv.shape[1]);
            accumulate(nodes, grads, w, |gw| {
                for i in 0..m {
                    axpy(g[i], &xv.data, &mut gw[i * n..(i + 1) * n]);
                }
            });
            accumulate(nodes, grads, x, |gx| {
                for i in 0..m {
                    axpy(g[i], &wv.data[i * n..(i + 1) * n], gx);
                }
            });
        }
        &Op::Add(a, b, mode) | &Op::Sub(a, b, mode) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let last = *val(a).shape.last().unwrap_or(&1);
            accumulate(nodes, grads, a, |ga| reduce_broadcast(g, Broadcast::Same, last, 1.0, ga));
            accumulate(nodes, grads, b, |gb| reduce_broadcast(g, mode, last, sign, gb));
        }
        &Op::Mul(a, b, mode) => {
            let (av, bv) = (val(a), val(b));
            let last = *av.shape.last().unwrap_or(&1);
            let b_at = |i: usize| match mode {
                Broadcast::Same => bv.data[i],
                Broadcast::LastAxis => bv.data[i / last],
            };
            accumulate(nodes, grads, a, |ga| {
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i] * b_at(i);
                }
            });
            let prod: Vec<f64> = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
            accumulate(nodes, grads, b, |gb| reduce_broadcast(&prod, mode, last, 1.0, gb));
        }
        &Op::AddBias(a, b) => {
            let d = val(b).shape[0];
            accumulate(nodes, grads, a, |ga| reduce_broadcast(g, Broadcast::Same, d, 1.0, ga));
            accumulate(nodes, grads, b, |gb| {
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
            });
        }
        &Op::Scale(a, c) => {
            accumulate(nodes, grads, a, |ga| {
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += c * v;
                }
            });
        }
        &Op::Tanh(a) => {
            let y = &node.value.data;
            accumulate(nodes, grads, a, |ga| {
                for ((o, v), y) in ga.iter_mut().zip(g).zip(y) {
                    *o += v * (1.0 - y * y);
                }
            });
        }
        &Op::Sigmoid(a) => {
            let y = &node.value.data;
            accumulate(nodes, grads, a, |ga| {
                for ((o, v), y) in ga.iter_mut().zip(g).zip(y) {
                    *o += v * y * (1.0 - y);
                }
            });
        }
        &Op::Elu(a) => {
            let (x, y) = (&val(a).data, &node.value.data);
            accumulate(nodes, grads, a, |ga| {
                for i in 0..ga.len() {
                    let d = if x[i] > 0.0 { 1.0 } else { y[i] + 1.0 };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Concat(ids) => {
            let total = *node.value.shape.last().unwrap();
            let rows = node.value.len() / total;
            let mut offset = 0;
            for &p in ids {
                let w = *val(p).shape.last().unwrap();
                accumulate(nodes, grads, p, |gp| {
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Stack(ids) => {
            let d = node.value.shape[1];
            for (r, &p) in ids.iter().enumerate() {
                accumulate(nodes, grads, p, |gp| {
                    for (o, v) in gp.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                });
            }
        }
        &Op::Row(a, index) => {
            let d = node.value.shape[0];
            accumulate(nodes, grads, a, |ga| {
                for (o, v) in ga[index * d..(index + 1) * d].iter_mut().zip(g) {
                    *o += v;
                }
            });
        }
        &Op::Sum(a) => {
            accumulate(nodes, grads, a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            });
        }
        &Op::SumRows(a) => {
            let d = node.value.shape[0];
            accumulate(nodes, grads, a, |ga| {
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i % d];
                }
            });
        }
        &Op::PairwiseAdd(a, b) => {
            let (t, s, d) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
            accumulate(nodes, grads, a, |ga| {
                for i in 0..t {
                    for j in 0..s {
                        for k in 0..d {
                            ga[i * d + k] += g[(i * s + j) * d + k];
                        }
                    }
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for i in 0..t {
                    for j in 0..s {
                        for k in 0..d {
                            gb[j * d + k] += g[(i * s + j) * d + k];
                        }
                    }
                }
            });
        }
        &Op::Attend(p, v) => {
            let (pv, vv) = (val(p), val(v));
            let (t, s, d) = (pv.shape[0], pv.shape[1], pv.shape[2]);
            accumulate(nodes, grads, p, |gp| {
                for i in 0..t {
                    for j in 0..s {
                        for k in 0..d {
                            gp[(i * s + j) * d + k] += g[i * d + k] * vv.data[j * d + k];
                        }
                    }
                }
            });
            accumulate(nodes, grads, v, |gv| {
                for i in 0..t {
                    for j in 0..s {
                        for k in 0..d {
                            gv[j * d + k] += g[i * d + k] * pv.data[(i * s + j) * d + k];
                        }
                    }
                }
            });
        }
        Op::MaskedSoftmax { input, axis, mask } => {
            let y = &node.value.data;
            let (outer, len, inner) = split_axis(&node.value.shape, *axis);
            accumulate(nodes, grads, *input, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dotp: f64 = (0..len)
                            .map(|t| base + t * inner)
                            .filter(|&idx| mask[idx])
                            .map(|idx| y[idx] * g[idx])
                            .sum();
                        for t in 0..len {
                            let idx = base + t * inner;
                            if mask[idx] {
                                gx[idx] += y[idx] * (g[idx] - dotp);
                            }
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let classes = val(*logits).shape[1];
            let scale = g[0] / labels.len() as f64;
            accumulate(nodes, grads, *logits, |gz| {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gz[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let a = random_tensor(&mut rng, &[3, 3], 2.0);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let av = tape.constant(a.clone());
        let out = av.matmul(tape.constant(eye)).unwrap().value();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, &[3, 4], 2.0);
        let b = random_tensor(&mut rng, &[4, 2], 2.0);
        let tape = Tape::new();
        let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!(close(out.at(&[i, j]), acc, 1e-12));
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b).unwrap_err() {
            TensorError::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let y = x.softmax(0).unwrap().value();
        for v in y.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }

        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 5.0]).unwrap());
        let mask = Mask::new(vec![3], vec![true, true, false]).unwrap();
        let y = x.masked_softmax(0, &mask).unwrap().value();
        assert!(close(y.data()[0], 0.26894, 1e-5));
        assert!(close(y.data()[1], 0.73106, 1e-5));
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn softmax_single_unmasked_entry_gets_all_weight() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-3.0, 40.0, 7.0]).unwrap());
        let mask = Mask::new(vec![3], vec![false, false, true]).unwrap();
        let y = x.masked_softmax(0, &mask).unwrap().value();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fully_masked_slice_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = Mask::new(vec![2, 1], vec![true, false]).unwrap();
        // softmax over axis 1: row 1 is fully masked
        let err = x.masked_softmax(1, &mask).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateSlice { slice: 1, .. }));
    }

    #[test]
    fn pointwise_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![3.0]).unwrap());
        assert_eq!(concat(&[a, b]).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.tanh().unwrap().value().item().unwrap(), 0.0);
        assert_eq!(z.sigmoid().unwrap().value().item().unwrap(), 0.5);
        let m = tape.constant(Tensor::scalar(-1.0));
        assert!(close(m.elu().unwrap().value().item().unwrap(), -0.63212, 1e-5));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(b), Err(TensorError::Shape { .. })));
        let c = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(a.mul(c).is_ok());
        let d = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(concat(&[a, d]), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = cross_entropy(z, &[0]).unwrap().value().item().unwrap();
        assert!(close(l, std::f64::consts::LN_2, 1e-12));

        let z = tape.constant(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
        let l = cross_entropy(z, &[0]).unwrap().value().item().unwrap();
        assert!(l.abs() < 1e-12);

        let z = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let l = cross_entropy(z, &[2]).unwrap().value().item().unwrap();
        assert!(close(l, 0.40761, 1e-5));

        assert!(matches!(
            cross_entropy(z, &[3]),
            Err(TensorError::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_square_and_accumulation() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.add(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = x.scale(2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(Tensor::vector(vec![f64::NAN]).is_err());
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e300));
        assert!(matches!(
            x.mul(x),
            Err(TensorError::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = x.mul(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().item().unwrap(), 5.0);
        assert!(c.grad().is_none());
    }

    // Finite-difference checks, one per registered op.

    fn check(shapes: &[&[usize]], seed: u64, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Copy) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 2.0)).collect();
        let report = check_gradients(&inputs, |tape, vars| {
            let out = f(tape, vars)?;
            weighted_sum(tape, out)
        })
        .unwrap();
        assert!(report.passed(1e-4, 1e-7), "{report:?}");
    }

    // Fixed non-uniform weights so the check sees every output element.
    fn weighted_sum<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>> {
        let shape = out.shape();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect();
        let w = tape.constant(Tensor::new(shape, w)?);
        out.mul(w)?.sum()
    }

    #[test]
    fn gradcheck_matmul_family() {
        check(&[&[3, 4], &[4, 2]], 10, |_, v| v[0].matmul(v[1]));
        check(&[&[3, 4], &[2, 4]], 11, |_, v| v[0].matmul_nt(v[1]));
        check(&[&[3, 4], &[4]], 12, |_, v| v[0].matvec(v[1]));
    }

    #[test]
    fn gradcheck_elementwise() {
        check(&[&[2, 3], &[2, 3]], 20, |_, v| v[0].add(v[1]));
        check(&[&[2, 3], &[2, 1]], 21, |_, v| v[0].sub(v[1]));
        check(&[&[2, 3], &[2, 3]], 22, |_, v| v[0].mul(v[1]));
        check(&[&[2, 3], &[2, 1]], 23, |_, v| v[0].mul(v[1]));
        check(&[&[2, 3], &[3]], 24, |_, v| v[0].add_bias(v[1]));
        check(&[&[2, 3]], 25, |_, v| v[0].scale(-1.7));
        check(&[&[2, 3]], 26, |_, v| v[0].tanh());
        check(&[&[2, 3]], 27, |_, v| v[0].sigmoid());
        check(&[&[2, 3]], 28, |_, v| v[0].elu());
    }

    #[test]
    fn gradcheck_structural() {
        check(&[&[2, 3], &[2, 2]], 30, |_, v| concat(&[v[0], v[1]]));
        check(&[&[3], &[3], &[3]], 31, |_, v| stack(&[v[0], v[1], v[2]]));
        check(&[&[3, 2]], 32, |_, v| v[0].row(1));
        check(&[&[3, 2]], 33, |_, v| v[0].sum());
        check(&[&[3, 2]], 34, |_, v| v[0].sum_rows());
        check(&[&[3, 2], &[4, 2]], 35, |_, v| pairwise_add(v[0], v[1]));
        check(&[&[2, 3, 2], &[3, 2]], 36, |_, v| attend(v[0], v[1]));
    }

    #[test]
    fn gradcheck_softmax_and_loss() {
        check(&[&[3, 4]], 40, |_, v| v[0].softmax(0));
        check(&[&[3, 4]], 41, |_, v| {
            let mask = Mask::new(vec![3, 1], vec![true, false, true])?;
            v[0].masked_softmax(0, &mask)
        });
        check(&[&[2, 3, 2]], 42, |_, v| {
            let mask = Mask::new(vec![2, 3, 1], vec![true, false, true, true, true, false])?;
            v[0].masked_softmax(1, &mask)
        });
        check(&[&[3, 4]], 43, |_, v| cross_entropy(v[0], &[1, 3, 0]));
    }

    #[test]
    fn concat_routes_gradient_slices() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = concat(&[a, b]).unwrap();
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loss = c.mul(w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 4.0]);
        assert_eq!(b.grad().unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_is_bit_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = Tape::new();
            let x = tape.leaf(random_tensor(&mut rng, &[4, 3], 2.0));
            let w = tape.leaf(random_tensor(&mut rng, &[3, 3], 2.0));
            let h = x.matmul(w).unwrap().tanh().unwrap();
            let h2 = h.mul(x).unwrap().softmax(0).unwrap();
            let loss = h2.mul(h).unwrap().sum().unwrap();
            tape.backward(loss).unwrap();
            (x.grad().unwrap(), w.grad().unwrap())
        };
        let (a, b) = run();
        let (c, d) = run();
        assert!(a.data().iter().zip(c.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b.data().iter().zip(d.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn masked_softmax_normalizes(
                values in prop::collection::vec(-30.0f64..30.0, 12),
                mask_bits in prop::collection::vec(any::<bool>(), 4),
            ) {
                let mut mask_bits = mask_bits;
                mask_bits[0] = true;
                let tape = Tape::new();
                let x = tape.constant(Tensor::matrix(4, 3, values).unwrap());
                let mask = Mask::new(vec![4, 1], mask_bits.clone()).unwrap();
                let y = x.masked_softmax(0, &mask).unwrap().value();
                for k in 0..3 {
                    let mut total = 0.0;
                    for t in 0..4 {
                        let w = y.at(&[t, k]);
                        if mask_bits[t] { total += w; } else { prop_assert_eq!(w, 0.0); }
                    }
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
