//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! Values live in [`Tensor`]. Computations are recorded on a [`Tape`] as
//! nodes addressed by [`Var`] handles; nodes are appended in evaluation
//! order, so the node vector is already a topological order and
//! [`Tape::backward`] replays it in reverse exactly once per call.
//!
//! Shapes are never broadcast. Every binary op requires equal shapes and
//! reports a [`Error::Dimension`] naming both operands otherwise.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "shape {shape:?} must be a nonempty list of positive sizes"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    StackRows(Vec<Var>),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Row(Var, usize),
    Slice { input: Var, start: usize },
    Reshape(Var),
    ScaleBy(Var, Var),
    Blend { prev: Var, cand: Var, gate: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape optionally borrows a [`ParamStore`]; each parameter is copied onto
/// the tape at most once, on first use, so all uses share one leaf.
///
/// Calling [`Tape::backward`] more than once accumulates gradients
/// additively; nothing is reset between calls.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_leaves: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; inputs are added with [`Tape::leaf`].
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_leaves: vec![None; params.len()],
            grads: Vec::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if `v` participated in a backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf on this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.param_leaves
            .iter()
            .enumerate()
            .filter_map(move |(id, leaf)| {
                let v = (*leaf)?;
                self.grad(v).map(|g| (ParamId(id), g))
            })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(id.0).copied().flatten() {
            return v;
        }
        let store = self
            .params
            .expect("tape has no parameter store attached");
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_leaves[id.0] = Some(v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn expect_scalar(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).numel() != 1 {
            return Err(Error::dim(format!(
                "{what}: expected a one-element tensor, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == Unary::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let f: fn(f64) -> f64 = match op {
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
        };
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary(op, a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, &format!("{op:?}"))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match op {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Hadamard => p * q,
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Hadamard, a, b)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// Addition of a constant to every entry.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddScalar(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {:?} by {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &x.data()[i * k..(i + 1) * k];
            let or = &mut out[i * n..(i + 1) * n];
            for (p, &xv) in xr.iter().enumerate() {
                let yr = &y.data()[p * n..(p + 1) * n];
                for (o, &yv) in or.iter_mut().zip(yr) {
                    *o += xv * yv;
                }
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Matrix `[m×k]` times vector `[k]`, giving `[m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (w, v) = (self.value(a), self.value(x));
        if w.rank() != 2 || v.rank() != 1 || w.shape()[1] != v.shape()[0] {
            return Err(Error::dim(format!(
                "matvec: cannot multiply {:?} by {:?}",
                w.shape(),
                v.shape()
            )));
        }
        let out: Vec<f64> = (0..w.shape()[0]).map(|i| dot(w.row(i), v.data())).collect();
        let out = Tensor::vector(out)?;
        let rg = self.rg(&[a, x]);
        Ok(self.push(out, Op::MatVec(a, x), rg))
    }

    /// Max-subtracted softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let out = match (x.rank(), axis) {
            (1, 0) => Tensor::vector(softmax_slice(x.data()))?,
            (2, 1) => {
                let mut data = Vec::with_capacity(x.numel());
                for i in 0..x.rows() {
                    data.extend(softmax_slice(x.row(i)));
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            (2, 0) => {
                let (r, c) = (x.rows(), x.cols());
                let mut data = vec![0.0; r * c];
                let mut col = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = x.data()[i * c + j];
                    }
                    for (i, s) in softmax_slice(&col).into_iter().enumerate() {
                        data[i * c + j] = s;
                    }
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            _ => {
                return Err(Error::dim(format!(
                    "softmax: axis {axis} invalid for shape {:?}",
                    x.shape()
                )))
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { input: a, axis }, rg))
    }

    /// Log-softmax of a vector.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return Err(Error::dim(format!(
                "log_softmax expects a vector, got {:?}",
                x.shape()
            )));
        }
        let out = Tensor::vector(log_softmax_slice(x.data()))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Concatenate vectors (axis 0) or matrices along either axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero parts"))?;
        let rank = self.value(*first).rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat: axis {axis} out of range for rank {rank}")));
        }
        for &p in parts {
            let s = self.shape(p);
            let s0 = self.shape(*first);
            let ok = s.len() == rank
                && s.iter()
                    .zip(s0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: shapes {s0:?} and {s:?} are incompatible"
                )));
            }
        }
        let out = if rank == 1 || axis == 0 {
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            let mut shape = self.shape(*first).to_vec();
            shape[0] = parts.iter().map(|&p| self.shape(p)[0]).sum();
            Tensor::new(shape, data)?
        } else {
            let rows = self.value(*first).rows();
            let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stack equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::dim("stack of zero rows"))?;
        let d = self.shape(*first).to_vec();
        if d.len() != 1 {
            return Err(Error::dim(format!("stack_rows expects vectors, got {d:?}")));
        }
        for &r in rows {
            if self.shape(r) != d.as_slice() {
                return Err(Error::dim(format!(
                    "stack_rows: shapes {d:?} and {:?} differ",
                    self.shape(r)
                )));
            }
        }
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&r| self.value(r).data().iter().copied())
            .collect();
        let out = Tensor::matrix(rows.len(), d[0], data)?;
        let rg = self.rg(rows);
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Sum of a matrix along `axis`, giving a vector.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || axis > 1 {
            return Err(Error::dim(format!(
                "sum_axis: axis {axis} invalid for shape {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.rows(), x.cols());
        let out = if axis == 0 {
            let mut s = vec![0.0; c];
            for i in 0..r {
                for (acc, v) in s.iter_mut().zip(x.row(i)) {
                    *acc += v;
                }
            }
            s
        } else {
            (0..r).map(|i| x.row(i).iter().sum()).collect()
        };
        let out = Tensor::vector(out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumAxis { input: a, axis }, rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || i >= x.rows() {
            return Err(Error::dim(format!("row {i} out of range for {:?}", x.shape())));
        }
        let out = Tensor::vector(x.row(i).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Row(a, i), rg))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 || len == 0 || start + len > x.numel() {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let out = Tensor::vector(x.data()[start..start + len].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { input: a, start }, rg))
    }

    /// Entry `i` of a vector as a one-element tensor.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, i, 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Every entry of `a` times the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "scale_by")?;
        let c = self.value(s).item();
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// `(1 - g) * prev + g * cand` with a one-element gate `g`.
    pub fn blend(&mut self, prev: Var, cand: Var, gate: Var) -> Result<Var> {
        self.same_shape(prev, cand, "blend")?;
        self.expect_scalar(gate, "blend gate")?;
        let g = self.value(gate).item();
        let data = self
            .value(prev)
            .data()
            .iter()
            .zip(self.value(cand).data())
            .map(|(&p, &c)| (1.0 - g) * p + g * c)
            .collect();
        let out = Tensor::new(self.shape(prev).to_vec(), data)?;
        let rg = self.rg(&[prev, cand, gate]);
        Ok(self.push(out, Op::Blend { prev, cand, gate }, rg))
    }

    /// Reverse pass from a one-element root.
    ///
    /// Gradients are added to whatever earlier calls accumulated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &gout, &mut g);
            }
            g[i] = Some(gout);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for (i, gi) in g.into_iter().enumerate() {
            let Some(gi) = gi else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = match op {
                    Unary::Tanh => zip_map(gout, y, |go, yv| go * (1.0 - yv * yv)),
                    Unary::Relu => zip_map(gout, x, |go, xv| if xv > 0.0 { go } else { 0.0 }),
                    Unary::Sigmoid => zip_map(gout, y, |go, yv| go * yv * (1.0 - yv)),
                    Unary::Exp => zip_map(gout, y, |go, yv| go * yv),
                    Unary::Log => zip_map(gout, x, |go, xv| go / xv),
                };
                self.accumulate(g, *a, &d);
            }
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    self.accumulate(g, *a, gout);
                    self.accumulate(g, *b, gout);
                }
                Binary::Sub => {
                    self.accumulate(g, *a, gout);
                    let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                    self.accumulate(g, *b, &neg);
                }
                Binary::Hadamard => {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires_grad(*a) {
                        self.accumulate(g, *a, &zip_map(gout, xb, |go, v| go * v));
                    }
                    if self.requires_grad(*b) {
                        self.accumulate(g, *b, &zip_map(gout, xa, |go, v| go * v));
                    }
                }
            },
            Op::Scale(a, c) => {
                let d: Vec<f64> = gout.iter().map(|v| v * c).collect();
                self.accumulate(g, *a, &d);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(g, *a, gout),
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let gr = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] = dot(gr, &w.data()[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(g, *a, &da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ G
                    let db = self.slot(g, *b);
                    for r in 0..m {
                        let gr = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            let xv = x.data()[r * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
            Op::MatVec(a, xv) => {
                let (w, x) = (self.value(*a), self.value(*xv));
                let k = x.numel();
                if self.requires_grad(*a) {
                    let da = self.slot(g, *a);
                    for (r, &go) in gout.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        for (d, v) in da[r * k..(r + 1) * k].iter_mut().zip(x.data()) {
                            *d += go * v;
                        }
                    }
                }
                if self.requires_grad(*xv) {
                    let mut dx = vec![0.0; k];
                    for (r, &go) in gout.iter().enumerate() {
                        for (d, wv) in dx.iter_mut().zip(w.row(r)) {
                            *d += go * wv;
                        }
                    }
                    self.accumulate(g, *xv, &dx);
                }
            }
            Op::Softmax { input, axis } => {
                let t = &node.value;
                let mut dx = vec![0.0; t.numel()];
                let lanes: Vec<Vec<usize>> = match (t.rank(), axis) {
                    (1, _) => vec![(0..t.numel()).collect()],
                    (_, 1) => (0..t.rows())
                        .map(|r| (r * t.cols()..(r + 1) * t.cols()).collect())
                        .collect(),
                    _ => (0..t.cols())
                        .map(|c| (0..t.rows()).map(|r| r * t.cols() + c).collect())
                        .collect(),
                };
                for lane in lanes {
                    let s: f64 = lane.iter().map(|&j| gout[j] * y[j]).sum();
                    for &j in &lane {
                        dx[j] = y[j] * (gout[j] - s);
                    }
                }
                self.accumulate(g, *input, &dx);
            }
            Op::LogSoftmax(a) => {
                let total: f64 = gout.iter().sum();
                let dx = zip_map(gout, y, |go, yv| go - yv.exp() * total);
                self.accumulate(g, *a, &dx);
            }
            Op::Concat { parts, axis } => {
                let rank = node.value.rank();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.accumulate(g, p, &gout[off..off + n]);
                        off += n;
                    }
                } else {
                    let (rows, cols) = (node.value.rows(), node.value.cols());
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&gout[r * cols + off..r * cols + off + pc]);
                        }
                        self.accumulate(g, p, &d);
                        off += pc;
                    }
                }
            }
            Op::StackRows(rows) => {
                let c = node.value.cols();
                for (r, &v) in rows.iter().enumerate() {
                    self.accumulate(g, v, &gout[r * c..(r + 1) * c]);
                }
            }
            Op::Sum(a) => {
                let d = vec![gout[0]; self.value(*a).numel()];
                self.accumulate(g, *a, &d);
            }
            Op::SumAxis { input, axis } => {
                let x = self.value(*input);
                let (r, c) = (x.rows(), x.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if *axis == 0 { gout[j] } else { gout[i] };
                    }
                }
                self.accumulate(g, *input, &d);
            }
            Op::Row(a, r) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut d = vec![0.0; x.numel()];
                    d[r * c..(r + 1) * c].copy_from_slice(gout);
                    self.accumulate(g, *a, &d);
                }
            }
            Op::Slice { input, start } => {
                if self.requires_grad(*input) {
                    let mut d = vec![0.0; self.value(*input).numel()];
                    d[*start..*start + gout.len()].copy_from_slice(gout);
                    self.accumulate(g, *input, &d);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if self.requires_grad(*a) {
                    let d: Vec<f64> = gout.iter().map(|v| v * c).collect();
                    self.accumulate(g, *a, &d);
                }
                if self.requires_grad(*s) {
                    let d = dot(gout, self.value(*a).data());
                    self.accumulate(g, *s, &[d]);
                }
            }
            Op::Blend { prev, cand, gate } => {
                let gv = self.value(*gate).item();
                if self.requires_grad(*prev) {
                    let d: Vec<f64> = gout.iter().map(|v| (1.0 - gv) * v).collect();
                    self.accumulate(g, *prev, &d);
                }
                if self.requires_grad(*cand) {
                    let d: Vec<f64> = gout.iter().map(|v| gv * v).collect();
                    self.accumulate(g, *cand, &d);
                }
                if self.requires_grad(*gate) {
                    let (p, c) = (self.value(*prev).data(), self.value(*cand).data());
                    let d: f64 = gout
                        .iter()
                        .zip(p.iter().zip(c))
                        .map(|(go, (pv, cv))| go * (cv - pv))
                        .sum();
                    self.accumulate(g, *gate, &[d]);
                }
            }
        }
    }

    /// Zero-initialised gradient buffer for `target`, created on first use.
    fn slot<'g>(&self, g: &'g mut [Option<Vec<f64>>], target: Var) -> &'g mut [f64] {
        let n = self.nodes[target.0].value.numel();
        g[target.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, g: &mut [Option<Vec<f64>>], target: Var, d: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut g[target.0] {
            Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Max-subtracted softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(t: &mut Tape, v: &[f64]) -> Var {
        t.leaf(Tensor::vector(v.to_vec()).unwrap(), true)
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut t = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 7.0]).unwrap();
        let i = t.constant(Tensor::identity(2));
        let av = t.constant(a.clone());
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn matmul_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        assert_eq!(t.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0, 0.0, 2.0]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let a = vec_leaf(&mut t, &[1.0, 2.0, 3.0]);
        let b = vec_leaf(&mut t, &[4.0, 5.0, 6.0]);
        let h = t.mul(a, b).unwrap();
        assert_eq!(t.value(h).data(), &[4.0, 10.0, 18.0]);

        let z = vec_leaf(&mut t, &[0.0]);
        let th = t.tanh(z).unwrap();
        t.backward(th).unwrap();
        assert_eq!(t.grad(z).unwrap(), &[1.0]);
    }

    #[test]
    fn binary_shape_mismatch_and_log_domain() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let b = vec_leaf(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
        let z = vec_leaf(&mut t, &[1.0, 0.0]);
        assert!(matches!(t.log(z), Err(Error::Domain(_))));
        let n = vec_leaf(&mut t, &[-3.0]);
        assert!(matches!(t.log(n), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[0.0, 0.0, 0.0]);
        let s = t.softmax(x, 0).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = vec_leaf(&mut t, &[1000.0, 0.0]);
        let s = t.softmax(y, 0).unwrap();
        let d = t.value(s).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_axis_zero_sums_columns() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![0.0, 0.0]]).unwrap());
        let s = t.softmax(x, 0).unwrap();
        let v = t.value(s);
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| v.get(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let c = t.concat(&[a], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);

        let p = vec_leaf(&mut t, &[1.0]);
        let q = vec_leaf(&mut t, &[2.0]);
        let c = t.concat(&[p, q], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[1.0]);
        assert_eq!(t.grad(q).unwrap(), &[1.0]);

        let m1 = t.constant(Tensor::zeros(&[2, 3]));
        let m2 = t.constant(Tensor::zeros(&[3, 3]));
        assert!(t.concat(&[m1, m2], 1).is_err());
        assert!(t.concat(&[m1, m2], 0).is_ok());
    }

    #[test]
    fn backward_scalar_examples() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[2.0]);
        let y = t.scale(x, 3.0).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);

        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[4.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[4.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[16.0]);
    }

    #[test]
    fn blend_matches_formula() {
        let mut t = Tape::new();
        let p = vec_leaf(&mut t, &[1.0, -2.0]);
        let c = vec_leaf(&mut t, &[3.0, 5.0]);
        let g = vec_leaf(&mut t, &[0.25]);
        let b = t.blend(p, c, g).unwrap();
        assert_eq!(t.value(b).data(), &[0.75 * 1.0 + 0.25 * 3.0, 0.75 * -2.0 + 0.25 * 5.0]);
        let s = t.sum(b).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(g).unwrap(), &[(3.0 - 1.0) + (5.0 + 2.0)]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let x = vec_leaf(&mut t, &[3.0, 4.0]);
        let m = t.mul(c, x).unwrap();
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
