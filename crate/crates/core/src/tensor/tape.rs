use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    /// matrix + broadcast bias row
    AddRow(usize, usize),
    ConcatCols(usize, usize),
    SliceCols {
        src: usize,
        start: usize,
        end: usize,
    },
    Sum(usize),
    Scale(usize, T),
}

impl<T> Op<T> {
    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => [Some(a), Some(b)],
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Scale(a, _) => [Some(a), None],
            Op::SliceCols { src, .. } => [Some(src), None],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Each tape supports exactly one
/// backward pass; build a fresh tape for the next forward.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn needs(&self, a: usize) -> bool {
        self.nodes[a].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), needs))
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: T, y: T| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            _ => x * y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            let data = va.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.numel() == 1 {
            let x = va.data()[0];
            let data = vb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else {
            return Err(Error::dim(
                match kind {
                    Elementwise::Add => "add",
                    Elementwise::Sub => "sub",
                    _ => "mul",
                },
                va.shape(),
                vb.shape(),
            ));
        };
        let op = match kind {
            Elementwise::Add => Op::Add(a.0, b.0),
            Elementwise::Sub => Op::Sub(a.0, b.0),
            _ => Op::Mul(a.0, b.0),
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, op, needs))
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let f: fn(T) -> T = match kind {
            Elementwise::Sigmoid => sigmoid,
            Elementwise::Tanh => T::tanh,
            Elementwise::Relu => |x: T| x.max(T::zero()),
            _ => softplus,
        };
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let op = match kind {
            Elementwise::Sigmoid => Op::Sigmoid(a.0),
            Elementwise::Tanh => Op::Tanh(a.0),
            Elementwise::Relu => Op::Relu(a.0),
            _ => Op::Softplus(a.0),
        };
        let needs = self.needs(a.0);
        self.push(out, op, needs)
    }

    /// Applies an elementwise primitive. Binary forms accept equal shapes or
    /// a one-element operand broadcast against the other.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        if args.len() != kind.arity() {
            return Err(Error::Invalid(format!(
                "{kind:?} takes {} operand(s), got {}",
                kind.arity(),
                args.len()
            )));
        }
        match kind.arity() {
            2 => self.binary(kind, args[0], args[1]),
            _ => Ok(self.unary(kind, args[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Softplus, a)
    }

    /// `a[m×n] + bias[1×n]` with the bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if !va.is_matrix() || vb.numel() != va.cols() || vb.rows() != 1 {
            return Err(Error::dim("add_row", va.shape(), vb.shape()));
        }
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a.0) || self.needs(bias.0);
        Ok(self.push(out, Op::AddRow(a.0, bias.0), needs))
    }

    /// Row-wise concatenation `[a ‖ b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rows() != vb.rows() || va.shape().len() != vb.shape().len() {
            return Err(Error::dim("concat_cols", va.shape(), vb.shape()));
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let shape = if va.is_matrix() {
            vec![r, ca + cb]
        } else {
            vec![ca + cb]
        };
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), needs))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if start >= end || end > va.cols() {
            return Err(Error::dim("slice_cols", va.shape(), &[start, end]));
        }
        let r = va.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&va.row(i)[start..end]);
        }
        let shape = if va.is_matrix() {
            vec![r, end - start]
        } else {
            vec![end - start]
        };
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(a.0);
        Ok(self.push(
            out,
            Op::SliceCols {
                src: a.0,
                start,
                end,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let needs = self.needs(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), needs)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * k).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a.0);
        self.push(out, Op::Scale(a.0, k), needs)
    }

    /// Reverse pass from a scalar `loss`, visiting nodes in reverse recording
    /// order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_loss(loss)?;
        let order: Vec<usize> = (0..=loss.0).rev().collect();
        self.run_backward(loss, &order)
    }

    /// Same as [`Tape::backward`] but visits nodes in the reverse post-order of
    /// a depth-first walk from `loss`. Any topological order yields the same
    /// gradients up to floating-point association.
    pub fn backward_depth_first(&mut self, loss: Var) -> Result<()> {
        self.check_loss(loss)?;
        let mut visited = vec![false; loss.0 + 1];
        let mut post = Vec::new();
        let mut stack = vec![(loss.0, false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                post.push(n);
                continue;
            }
            if visited[n] {
                continue;
            }
            visited[n] = true;
            stack.push((n, true));
            for inp in self.nodes[n].op.inputs().into_iter().flatten() {
                if !visited[inp] {
                    stack.push((inp, false));
                }
            }
        }
        post.reverse();
        self.run_backward(loss, &post)
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Invalid("loss is not recorded on this tape".into()))?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        Ok(())
    }

    fn run_backward(&mut self, loss: Var, order: &[usize]) -> Result<()> {
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for &i in order {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn slot(&mut self, idx: usize) -> Option<&mut Vec<T>> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        let len = self.nodes[idx].value.numel();
        Some(self.grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                if self.needs(a) {
                    let bv = self.nodes[b].value.data().to_vec();
                    let acc = self.slot(a).expect("needs grad");
                    kernels::accumulate_grad_lhs(g, &bv, m, k, n, acc);
                }
                if self.needs(b) {
                    let av = self.nodes[a].value.data().to_vec();
                    let acc = self.slot(b).expect("needs grad");
                    kernels::accumulate_grad_rhs(&av, g, m, k, n, acc);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate_broadcast(a, g, T::one());
                self.accumulate_broadcast(b, g, sign);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                if self.needs(a) {
                    let ga = mul_grad(g, &bv);
                    self.accumulate_broadcast(a, &ga, T::one());
                }
                if self.needs(b) {
                    let gb = mul_grad(g, &av);
                    self.accumulate_broadcast(b, &gb, T::one());
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(acc) = self.slot(a) {
                    for ((o, &gv), &yv) in acc.iter_mut().zip(g).zip(&y) {
                        *o += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(acc) = self.slot(a) {
                    for ((o, &gv), &yv) in acc.iter_mut().zip(g).zip(&y) {
                        *o += gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[a].value.data().to_vec();
                if let Some(acc) = self.slot(a) {
                    for ((o, &gv), &xv) in acc.iter_mut().zip(g).zip(&x) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let x = self.nodes[a].value.data().to_vec();
                if let Some(acc) = self.slot(a) {
                    for ((o, &gv), &xv) in acc.iter_mut().zip(g).zip(&x) {
                        *o += gv * sigmoid(xv);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let n = self.nodes[a].value.cols();
                if let Some(acc) = self.slot(a) {
                    for (o, &gv) in acc.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if let Some(acc) = self.slot(bias) {
                    for row in g.chunks(n) {
                        for (o, &gv) in acc.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a].value.cols();
                let cb = self.nodes[b].value.cols();
                let w = ca + cb;
                if let Some(acc) = self.slot(a) {
                    for (dst, src) in acc.chunks_mut(ca).zip(g.chunks(w)) {
                        for (o, &gv) in dst.iter_mut().zip(&src[..ca]) {
                            *o += gv;
                        }
                    }
                }
                if let Some(acc) = self.slot(b) {
                    for (dst, src) in acc.chunks_mut(cb).zip(g.chunks(w)) {
                        for (o, &gv) in dst.iter_mut().zip(&src[ca..]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceCols { src, start, end } => {
                let c = self.nodes[src].value.cols();
                let w = end - start;
                if let Some(acc) = self.slot(src) {
                    for (dst, gr) in acc.chunks_mut(c).zip(g.chunks(w)) {
                        for (o, &gv) in dst[start..end].iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                if let Some(acc) = self.slot(a) {
                    acc.iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Scale(a, k) => {
                if let Some(acc) = self.slot(a) {
                    for (o, &gv) in acc.iter_mut().zip(g) {
                        *o += gv * k;
                    }
                }
            }
        }
    }

    /// Adds `sign * g` into the gradient of `idx`, reducing to a single value
    /// when `idx` was the broadcast scalar operand.
    fn accumulate_broadcast(&mut self, idx: usize, g: &[T], sign: T) {
        let Some(acc) = self.slot(idx) else {
            return;
        };
        if acc.len() == g.len() {
            for (o, &gv) in acc.iter_mut().zip(g) {
                *o += sign * gv;
            }
        } else {
            let s: T = g.iter().copied().sum();
            acc[0] += sign * s;
        }
    }
}

/// Elementwise product where `other` may be a broadcast scalar.
fn mul_grad<T: Scalar>(g: &[T], other: &[T]) -> Vec<T> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(&a, &b)| a * b).collect()
    } else {
        g.iter().map(|&a| a * other[0]).collect()
    }
}
