//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, stores its output on the tape and
//! remembers its inputs. `backward` replays the tape in reverse execution
//! order, so gradients are reproducible bit-for-bit for a given sequence of
//! operations.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Sin,
    Cos,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Clamp01,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SumRows(Var),
    SumGroups(Var, usize),
    Unary(Var, Unary),
    Softmax(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    CumsumExclusive(Var),
    NormRows(Var),
    TopkSt(Var, Tensor),
    Reshape(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The computation record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if anything flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; zeros when `v` did not contribute.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, leaving zeros behind on a later `wrt`.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Indices of the `k` largest entries, ties resolved toward the lowest index.
pub(crate) fn topk_indices(p: &[f64], k: usize) -> Vec<usize> {
    if k == 1 {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate().skip(1) {
            if v > p[best] {
                best = i;
            }
        }
        return vec![best];
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `C = A * B` for row-major `A: [n, k]`, `B: [k, m]`.
fn gemm(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: slice lengths are checked by the callers against n, k and m.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            m as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `C = G * B^T` for `G: [n, m]`, `B: [k, m]`, giving `[n, k]`.
fn gemm_bt(n: usize, m: usize, k: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: see `gemm`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.as_ptr(),
            m as isize,
            1,
            b.as_ptr(),
            1,
            m as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `C = A^T * G` for `A: [n, k]`, `G: [n, m]`, giving `[k, m]`.
fn gemm_at(n: usize, k: usize, m: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    // SAFETY: see `gemm`.
    unsafe {
        matrixmultiply::dgemm(
            k,
            n,
            m,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            m as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `b` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.last_dim();
        if tb.len() != m {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &x) in row.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies every row of `a` elementwise by the vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.last_dim();
        if tb.len() != m {
            return Err(Error::shape("mul_row", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &x) in row.iter_mut().zip(tb.data()) {
                *o *= x;
            }
        }
        Ok(self.push(out, Op::MulRow(a, b), &[a, b]))
    }

    /// Scales row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        let m = ta.last_dim();
        if tc.len() != ta.outer_len() {
            return Err(Error::shape("mul_col", ta.shape(), tc.shape()));
        }
        let mut out = ta.clone();
        for (row, &s) in out.data_mut().chunks_mut(m).zip(tc.data()) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, c), &[a, c]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        Ok(self.push(out, Op::AddScalar(a), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), tb.data(), &mut out);
        let out = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(out, Op::Mean(a), &[a]))
    }

    /// Sums over the last axis: `[n, m] -> [n]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.last_dim();
        let data: Vec<f64> = t.data().chunks(m).map(|r| r.iter().sum()).collect();
        let n = data.len();
        let out = Tensor::from_parts(vec![n], data);
        Ok(self.push(out, Op::SumLast(a), &[a]))
    }

    /// Sums over rows: `[n, m] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.last_dim();
        let mut data = vec![0.0; m];
        for row in t.data().chunks(m) {
            for (d, &x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        let out = Tensor::from_parts(vec![m], data);
        Ok(self.push(out, Op::SumRows(a), &[a]))
    }

    /// Sums consecutive blocks of `group` rows: `[n * group, m] -> [n, m]`.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let m = t.last_dim();
        let rows = t.outer_len();
        if group == 0 || !rows.is_multiple_of(group) {
            return Err(Error::shape("sum_groups", t.shape(), &[group]));
        }
        let n = rows / group;
        let mut data = vec![0.0; n * m];
        for (i, block) in t.data().chunks(group * m).enumerate() {
            let dst = &mut data[i * m..(i + 1) * m];
            for row in block.chunks(m) {
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, m], data);
        Ok(self.push(out, Op::SumGroups(a, group), &[a]))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Ln => {
                if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::domain("ln", format!("non-positive input {bad}")));
                }
                f64::ln
            }
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Relu => |x| x.max(0.0),
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Clamp01 => |x| x.clamp(0.0, 1.0),
        };
        let out = t.map(f);
        Ok(self.push(out, Op::Unary(a, kind), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    /// Clamps to `[0, 1]`; the gradient is zero where clamping is active.
    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Clamp01)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.last_dim();
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (src, dst) in t.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
            softmax_row(src, dst);
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Concatenates along the last axis; all inputs must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rows = self.value(first).outer_len();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.outer_len() != rows {
                return Err(Error::shape("concat", self.shape(first), t.shape()));
            }
            width += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Selects rows of `a` (viewed as `[n, m]`) by index.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let n = t.outer_len();
        let m = t.last_dim();
        if index.is_empty() {
            return Err(Error::invalid("gather_rows with an empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * m);
        for &i in index.iter() {
            if i >= n {
                return Err(Error::invalid(format!("gather index {i} out of range for {n} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![index.len(), m], data);
        Ok(self.push(out, Op::GatherRows(a, index), &[a]))
    }

    /// Adds row `i` of `src` into row `index[i]` of an `[rows, m]` zero tensor.
    pub fn scatter_rows(&mut self, src: Var, index: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let t = self.value(src);
        let m = t.last_dim();
        if index.len() != t.outer_len() {
            return Err(Error::shape("scatter_rows", t.shape(), &[index.len()]));
        }
        let mut out = Tensor::zeros([rows, m]);
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(Error::invalid(format!("scatter index {i} out of range for {rows} rows")));
            }
            for (o, &x) in out.row_mut(i).iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::ScatterRows(src, index), &[src]))
    }

    /// Exclusive prefix sum over the last axis: `out[j] = sum_{l < j} a[l]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.last_dim();
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (src, dst) in t.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
            let mut acc = 0.0;
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = acc;
                acc += x;
            }
        }
        Ok(self.push(out, Op::CumsumExclusive(a), &[a]))
    }

    /// Euclidean norm of every row: `[n, m] -> [n]`. The gradient at a zero
    /// row is taken as zero.
    pub fn norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.last_dim();
        let data: Vec<f64> = t
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let n = data.len();
        let out = Tensor::from_parts(vec![n], data);
        Ok(self.push(out, Op::NormRows(a), &[a]))
    }

    /// Straight-through top-k over the last axis of `logits`.
    ///
    /// Forward: the `k` most probable entries of `softmax(logits)` are kept
    /// and renormalised to sum to one; all others are zero. Backward: the
    /// gradient is the softmax vector-Jacobian product, as if the soft
    /// distribution had been used.
    pub fn topk_st(&mut self, logits: Var, k: usize) -> Result<Var> {
        let t = self.value(logits);
        let n = t.last_dim();
        if k == 0 || k > n {
            return Err(Error::invalid(format!("top-k needs 1 <= k <= {n}, got k = {k}")));
        }
        let mut soft = Tensor::zeros(t.shape().to_vec());
        let mut hard = Tensor::zeros(t.shape().to_vec());
        for ((src, s), h) in t
            .data()
            .chunks(n)
            .zip(soft.data_mut().chunks_mut(n))
            .zip(hard.data_mut().chunks_mut(n))
        {
            softmax_row(src, s);
            let idx = topk_indices(s, k);
            let total: f64 = idx.iter().map(|&i| s[i]).sum();
            for &i in &idx {
                h[i] = s[i] / total;
            }
        }
        Ok(self.push(hard, Op::TopkSt(logits, soft), &[logits]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(*b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let m = tb.len();
                    let mut d = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (s, &x) in d.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(*b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let m = tb.len();
                if self.wants(*a) {
                    let mut d = g.clone();
                    for row in d.data_mut().chunks_mut(m) {
                        for (x, &s) in row.iter_mut().zip(tb.data()) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; m];
                    for (gr, ar) in g.data().chunks(m).zip(ta.data().chunks(m)) {
                        for ((s, &x), &y) in d.iter_mut().zip(gr).zip(ar) {
                            *s += x * y;
                        }
                    }
                    acc(*b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                let m = ta.last_dim();
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (row, &s) in d.data_mut().chunks_mut(m).zip(tc.data()) {
                        for x in row.iter_mut() {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.wants(*c) {
                    let d = g
                        .data()
                        .chunks(m)
                        .zip(ta.data().chunks(m))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*c, Tensor::from_parts(tc.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut d = vec![0.0; n * k];
                    gemm_bt(n, m, k, g.data(), tb.data(), &mut d);
                    acc(*a, Tensor::from_parts(vec![n, k], d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * m];
                    gemm_at(n, k, m, ta.data(), g.data(), &mut d);
                    acc(*b, Tensor::from_parts(vec![k, m], d));
                }
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.shape().to_vec(), g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.shape().to_vec(), g.item() / ta.len() as f64));
            }
            Op::SumLast(a) => {
                let ta = self.value(*a);
                let m = ta.last_dim();
                let mut d = Vec::with_capacity(ta.len());
                for &x in g.data() {
                    d.extend(std::iter::repeat_n(x, m));
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let mut d = Vec::with_capacity(ta.len());
                for _ in 0..ta.outer_len() {
                    d.extend_from_slice(g.data());
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::SumGroups(a, group) => {
                let ta = self.value(*a);
                let mut d = Vec::with_capacity(ta.len());
                for row in g.data().chunks(ta.last_dim()) {
                    for _ in 0..*group {
                        d.extend_from_slice(row);
                    }
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = out.data();
                let gd = g.data();
                let d: Vec<f64> = match kind {
                    Unary::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Ln => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Sin => gd.iter().zip(x).map(|(g, x)| g * x.cos()).collect(),
                    Unary::Cos => gd.iter().zip(x).map(|(g, x)| -g * x.sin()).collect(),
                    Unary::Relu => gd
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Softplus => gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect(),
                    Unary::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Clamp01 => gd
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if (0.0..=1.0).contains(&x) { *g } else { 0.0 })
                        .collect(),
                };
                acc(*a, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Softmax(a) => acc(*a, softmax_vjp(out, g)),
            Op::TopkSt(a, soft) => acc(*a, softmax_vjp(soft, g)),
            Op::Concat(parts) => {
                let width = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.last_dim();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(tp.len());
                        for row in g.data().chunks(width) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        acc(p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.shape().to_vec());
                let m = ta.last_dim();
                for (r, &i) in index.iter().enumerate() {
                    let src = &g.data()[r * m..(r + 1) * m];
                    for (o, &x) in d.row_mut(i).iter_mut().zip(src) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::ScatterRows(a, index) => {
                let ta = self.value(*a);
                let m = ta.last_dim();
                let mut d = Vec::with_capacity(ta.len());
                for &i in index.iter() {
                    d.extend_from_slice(&g.data()[i * m..(i + 1) * m]);
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::CumsumExclusive(a) => {
                let m = out.last_dim();
                let mut d = Tensor::zeros(out.shape().to_vec());
                for (src, dst) in g.data().chunks(m).zip(d.data_mut().chunks_mut(m)) {
                    // d[l] = sum_{j > l} g[j]
                    let mut acc_r = 0.0;
                    for j in (0..m).rev() {
                        dst[j] = acc_r;
                        acc_r += src[j];
                    }
                }
                acc(*a, d);
            }
            Op::NormRows(a) => {
                let ta = self.value(*a);
                let m = ta.last_dim();
                let mut d = Tensor::zeros(ta.shape().to_vec());
                for (r, (row, dst)) in ta.data().chunks(m).zip(d.data_mut().chunks_mut(m)).enumerate() {
                    let norm = out.data()[r];
                    if norm > 0.0 {
                        let s = g.data()[r] / norm;
                        for (o, &x) in dst.iter_mut().zip(row) {
                            *o = s * x;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), g.data().to_vec()));
            }
        }
    }
}

/// `dx = s * (g - <s, g>)` row-wise, for softmax output `s`.
fn softmax_vjp(s: &Tensor, g: &Tensor) -> Tensor {
    let m = s.last_dim();
    let mut d = Tensor::zeros(s.shape().to_vec());
    for ((sr, gr), dr) in s
        .data()
        .chunks(m)
        .zip(g.data().chunks(m))
        .zip(d.data_mut().chunks_mut(m))
    {
        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &p), &gv) in dr.iter_mut().zip(sr).zip(gr) {
            *o = p * (gv - dot);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = t.matmul(i, m).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.softplus(x).unwrap();
        assert!(close(t.value(y).item(), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn softplus_does_not_overflow() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![800.0, -800.0]));
        let y = t.softplus(x).unwrap();
        assert_eq!(t.value(y).data()[0], 800.0);
        assert!(t.value(y).data()[1] >= 0.0 && t.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let y = t.softmax(x).unwrap();
        for &v in t.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn gather_selects_row() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let r = t.gather_rows(a, Arc::new(vec![1])).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 4.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.ln(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn sin_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0), true);
        let y = t.sin(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 1.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]), true);
        let s = t.softmax(v).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        for &d in g.wrt(v).data() {
            assert!(d.abs() < 1e-15, "{d}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let s = t.exp(v).unwrap();
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let used = t.leaf(Tensor::scalar(2.0), true);
        let unused = t.leaf(Tensor::vector(vec![1.0, 1.0]), true);
        let l = t.mul(used, used).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn topk_tie_breaks_to_lowest_index() {
        assert_eq!(topk_indices(&[0.5, 0.5], 1), vec![0]);
        assert_eq!(topk_indices(&[0.2, 0.4, 0.4], 2), vec![1, 2]);
    }

    #[test]
    fn constant_only_graph_is_not_recorded() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1.0));
        let b = t.exp(a).unwrap();
        assert!(!t.requires_grad(b));
    }
}
