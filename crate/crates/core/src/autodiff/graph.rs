//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.

use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-sparse constant matrix applied as `out[m, f] = sum_k w * x[f, k]`.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

type Derivative = Rc<dyn Fn(f64) -> f64>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var, Option<usize>),
    Softmax(Var, usize),
    SmoothL1(Var, Var, f64),
    Cosine(Var, Var),
    Atan2(Var, Var),
    Reshape(Var),
    Conv2d(Var, Var),
    SparsePool(Var, Rc<SparseRows>),
    Map(Var, Derivative),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Pow(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Cosine(..) => "cosine_similarity",
            Op::Atan2(..) => "atan2",
            Op::Reshape(..) => "reshape",
            Op::Conv2d(..) => "conv2d",
            Op::SparsePool(..) => "sparse_pool",
            Op::Map(..) => "map",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss or was created as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::SmoothL1(a, b, _)
            | Op::Cosine(a, b)
            | Op::Atan2(a, b)
            | Op::Conv2d(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Pow(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a, _)
            | Op::Softmax(a, _)
            | Op::Reshape(a)
            | Op::SparsePool(a, _)
            | Op::Map(a, _) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn axis_of(&self, op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
        if t.shape().len() != 2 || axis > 1 {
            return Err(AutodiffError::BadAxis {
                op,
                axis,
                shape: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a length-`M` vector to every row of an `N x M` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.shape().len() != 2 || tr.shape() != [tx.shape()[1]] {
            return Err(mismatch("add_row", tx, tr));
        }
        let m = tx.shape()[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tr.data()[i % m])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let v = Tensor::matrix(n, m, matmul_raw(ta.data(), tb.data(), n, k, m));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Elementwise `x^p`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Pow(a, p))
    }

    /// Elementwise clamp; the gradient is zero where the input is clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Sum over all elements (`axis = None`) or along one axis of a matrix.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let v = match axis {
            None => Tensor::scalar(t.sum()),
            Some(ax) => {
                self.axis_of("sum", t, ax)?;
                let (n, m) = (t.shape()[0], t.shape()[1]);
                if ax == 0 {
                    let mut out = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            out[j] += t.data()[i * m + j];
                        }
                    }
                    Tensor::vector(out)
                } else {
                    Tensor::vector((0..n).map(|i| t.row(i).iter().sum()).collect())
                }
            }
        };
        self.push(v, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a, None)?;
        self.scale(s, 1.0 / n)
    }

    /// Softmax of a matrix along `axis` (0: each column sums to one,
    /// 1: each row sums to one).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        self.axis_of("softmax", t, axis)?;
        let v = softmax_raw(t, axis);
        self.push(v, Op::Softmax(a, axis))
    }

    /// Elementwise smooth-L1 between `a` and `target`:
    /// `0.5 d^2 / beta` for `|d| < beta`, `|d| - 0.5 beta` otherwise.
    pub fn smooth_l1(&mut self, a: Var, target: Var, beta: f64) -> Result<Var> {
        self.same_shape("smooth_l1", a, target)?;
        let v = self.zip(a, target, |x, y| smooth_l1(x - y, beta));
        self.push(v, Op::SmoothL1(a, target, beta))
    }

    /// Row-wise cosine similarity of two `G x K` matrices, giving a length-`G`
    /// vector. A row with zero norm on either side has similarity 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 {
            return Err(AutodiffError::BadAxis {
                op: "cosine_similarity",
                axis: 1,
                shape: ta.shape().to_vec(),
            });
        }
        let out = (0..ta.rows())
            .map(|i| cosine_row(ta.row(i), tb.row(i)).0)
            .collect();
        self.push(Tensor::vector(out), Op::Cosine(a, b))
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.same_shape("atan2", y, x)?;
        let v = self.zip(y, x, f64::atan2);
        self.push(v, Op::Atan2(y, x))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let v = t.reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// 3x3 convolution with zero padding: input `[Cin, H, W]`, kernel
    /// `[Cout, Cin, 3, 3]`, output `[Cout, H, W]`.
    pub fn conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let ok = tx.shape().len() == 3
            && tk.shape().len() == 4
            && tk.shape()[1] == tx.shape()[0]
            && tk.shape()[2] == 3
            && tk.shape()[3] == 3;
        if !ok {
            return Err(mismatch("conv2d", tx, tk));
        }
        let (cin, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let cout = tk.shape()[0];
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for c in 0..cin {
                let plane = &tx.data()[c * h * w..(c + 1) * h * w];
                let kern = &tk.data()[(o * cin + c) * 9..(o * cin + c + 1) * 9];
                let dst = &mut out[o * h * w..(o + 1) * h * w];
                conv_plane_acc(plane, kern, dst, h, w);
            }
        }
        self.push(Tensor::new(vec![cout, h, w], out), Op::Conv2d(x, kernel))
    }

    /// Applies a constant row-sparse matrix to every channel of `x`
    /// (shape `[F, ...]`, flattened to `[F, L]`): `out[f, m] = sum w * x[f, k]`.
    pub fn sparse_pool(&mut self, x: Var, rows: Rc<SparseRows>) -> Result<Var> {
        let t = self.value(x);
        let f = t.rows();
        let l = t.cols();
        if t.shape().is_empty() {
            return Err(AutodiffError::BadAxis {
                op: "sparse_pool",
                axis: 0,
                shape: vec![],
            });
        }
        let n = rows.len();
        let mut out = vec![0.0; n * f];
        for (m, row) in rows.iter().enumerate() {
            for &(k, wgt) in row {
                if k >= l {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "sparse_pool",
                        index: k,
                        len: l,
                    });
                }
                for c in 0..f {
                    out[c * n + m] += wgt * t.data()[c * l + k];
                }
            }
        }
        self.push(Tensor::matrix(f, n, out), Op::SparsePool(x, rows))
    }

    /// Elementwise user function with a caller-supplied derivative.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push(v, Op::Map(a, Rc::new(df)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only trainable leaves and intermediate nodes keep gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad && matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let like =
            |v: Var, data: Vec<f64>| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data);
        let gd = g.data();
        match &node.op {
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
                let (ta, tb) = (val(*a), val(*b));
                acc(
                    *a,
                    like(*a, gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect()),
                );
                acc(
                    *b,
                    like(*b, gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect()),
                );
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let m = val(*row).len();
                let mut gr = vec![0.0; m];
                for (i, v) in gd.iter().enumerate() {
                    gr[i % m] += v;
                }
                acc(*row, like(*row, gr));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..m {
                        let gij = gd[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            da[i * k + t] += gij * tb.data()[t * m + j];
                        }
                    }
                }
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    for t in 0..k {
                        let a_it = ta.data()[i * k + t];
                        if a_it == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            db[t * m + j] += a_it * gd[i * m + j];
                        }
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(
                *a,
                like(*a, gd.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            ),
            Op::Log(a) => acc(
                *a,
                like(
                    *a,
                    gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect(),
                ),
            ),
            Op::Tanh(a) => acc(
                *a,
                like(
                    *a,
                    gd.iter()
                        .zip(out.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                ),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                like(
                    *a,
                    gd.iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                ),
            ),
            Op::Pow(a, p) => acc(
                *a,
                like(
                    *a,
                    gd.iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect(),
                ),
            ),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                like(
                    *a,
                    gd.iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| if x > lo && x < hi { *g } else { 0.0 })
                        .collect(),
                ),
            ),
            Op::Sum(a, axis) => {
                let ta = val(*a);
                let data = match axis {
                    None => vec![gd[0]; ta.len()],
                    Some(0) => {
                        let m = ta.shape()[1];
                        (0..ta.len()).map(|i| gd[i % m]).collect()
                    }
                    Some(_) => {
                        let m = ta.shape()[1];
                        (0..ta.len()).map(|i| gd[i / m]).collect()
                    }
                };
                acc(*a, like(*a, data));
            }
            Op::Softmax(a, axis) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut dx = vec![0.0; n * m];
                if *axis == 1 {
                    for i in 0..n {
                        let dot: f64 = (0..m).map(|j| gd[i * m + j] * y[i * m + j]).sum();
                        for j in 0..m {
                            dx[i * m + j] = y[i * m + j] * (gd[i * m + j] - dot);
                        }
                    }
                } else {
                    for j in 0..m {
                        let dot: f64 = (0..n).map(|i| gd[i * m + j] * y[i * m + j]).sum();
                        for i in 0..n {
                            dx[i * m + j] = y[i * m + j] * (gd[i * m + j] - dot);
                        }
                    }
                }
                acc(*a, like(*a, dx));
            }
            Op::SmoothL1(a, t, beta) => {
                let d: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*t).data())
                    .zip(gd)
                    .map(|((x, y), g)| g * smooth_l1_grad(x - y, *beta))
                    .collect();
                acc(*t, like(*t, d.iter().map(|v| -v).collect()));
                acc(*a, like(*a, d));
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for i in 0..ta.rows() {
                    let (u, v) = (ta.row(i), tb.row(i));
                    let (cos, nu, nv) = cosine_row(u, v);
                    if nu == 0.0 || nv == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        da[i * k + j] = gd[i] * (v[j] / (nu * nv) - cos * u[j] / (nu * nu));
                        db[i * k + j] = gd[i] * (u[j] / (nu * nv) - cos * v[j] / (nv * nv));
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Atan2(y, x) => {
                let (ty, tx) = (val(*y), val(*x));
                let mut dy = vec![0.0; ty.len()];
                let mut dx = vec![0.0; tx.len()];
                for i in 0..ty.len() {
                    let (yy, xx) = (ty.data()[i], tx.data()[i]);
                    let r2 = xx * xx + yy * yy;
                    if r2 > 0.0 {
                        dy[i] = gd[i] * xx / r2;
                        dx[i] = -gd[i] * yy / r2;
                    }
                }
                acc(*y, like(*y, dy));
                acc(*x, like(*x, dx));
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Conv2d(x, kernel) => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (cin, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cout = tk.shape()[0];
                let x_needs = self.nodes[x.0].requires_grad;
                let mut dx = vec![0.0; if x_needs { tx.len() } else { 0 }];
                let mut dk = vec![0.0; tk.len()];
                for o in 0..cout {
                    let go = &gd[o * h * w..(o + 1) * h * w];
                    for c in 0..cin {
                        let plane = &tx.data()[c * h * w..(c + 1) * h * w];
                        let kbase = (o * cin + c) * 9;
                        conv_plane_kernel_grad(plane, go, &mut dk[kbase..kbase + 9], h, w);
                        if x_needs {
                            let kern = &tk.data()[kbase..kbase + 9];
                            conv_plane_input_grad(
                                go,
                                kern,
                                &mut dx[c * h * w..(c + 1) * h * w],
                                h,
                                w,
                            );
                        }
                    }
                }
                if x_needs {
                    acc(*x, like(*x, dx));
                }
                acc(*kernel, like(*kernel, dk));
            }
            Op::SparsePool(x, rows) => {
                let tx = val(*x);
                let (f, l, n) = (tx.rows(), tx.cols(), rows.len());
                let mut dx = vec![0.0; tx.len()];
                for (m, row) in rows.iter().enumerate() {
                    for &(k, wgt) in row {
                        for c in 0..f {
                            dx[c * l + k] += wgt * gd[c * n + m];
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Map(a, df) => acc(
                *a,
                like(
                    *a,
                    gd.iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| g * df(*x))
                        .collect(),
                ),
            ),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Returns `(cos, |u|, |v|)`; `cos` is 0 when either norm is 0.
pub(crate) fn cosine_row(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        (0.0, nu, nv)
    } else {
        (dot / (nu * nv), nu, nv)
    }
}

pub(crate) fn softmax_raw(t: &Tensor, axis: usize) -> Tensor {
    let (n, m) = (t.shape()[0], t.shape()[1]);
    let x = t.data();
    let mut y = vec![0.0; n * m];
    let (outer, inner, idx): (usize, usize, fn(usize, usize, usize) -> usize) = if axis == 1 {
        (n, m, |o, i, m| o * m + i)
    } else {
        (m, n, |o, i, m| i * m + o)
    };
    for o in 0..outer {
        let mx = (0..inner)
            .map(|i| x[idx(o, i, m)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..inner {
            let e = (x[idx(o, i, m)] - mx).exp();
            y[idx(o, i, m)] = e;
            s += e;
        }
        for i in 0..inner {
            y[idx(o, i, m)] /= s;
        }
    }
    Tensor::matrix(n, m, y)
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += a_it * bv;
            }
        }
    }
    out
}

// Cross-correlation with zero padding: out[y,x] += sum k[dy+1,dx+1] * in[y+dy, x+dx].
fn conv_plane_acc(src: &[f64], k: &[f64], dst: &mut [f64], h: usize, w: usize) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let kv = k[((dy + 1) * 3 + dx + 1) as usize];
            if kv == 0.0 {
                continue;
            }
            let (y0, y1) = (((-dy).max(0)) as usize, (h as i64 - dy.max(0)) as usize);
            let (x0, x1) = (((-dx).max(0)) as usize, (w as i64 - dx.max(0)) as usize);
            for y in y0..y1 {
                let sy = (y as i64 + dy) as usize;
                let srow = &src[sy * w..(sy + 1) * w];
                let drow = &mut dst[y * w..(y + 1) * w];
                for x in x0..x1 {
                    drow[x] += kv * srow[(x as i64 + dx) as usize];
                }
            }
        }
    }
}

fn conv_plane_kernel_grad(src: &[f64], g: &[f64], dk: &mut [f64], h: usize, w: usize) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (y0, y1) = (((-dy).max(0)) as usize, (h as i64 - dy.max(0)) as usize);
            let (x0, x1) = (((-dx).max(0)) as usize, (w as i64 - dx.max(0)) as usize);
            let mut s = 0.0;
            for y in y0..y1 {
                let sy = (y as i64 + dy) as usize;
                let srow = &src[sy * w..(sy + 1) * w];
                let grow = &g[y * w..(y + 1) * w];
                for x in x0..x1 {
                    s += grow[x] * srow[(x as i64 + dx) as usize];
                }
            }
            dk[((dy + 1) * 3 + dx + 1) as usize] += s;
        }
    }
}

fn conv_plane_input_grad(g: &[f64], k: &[f64], dsrc: &mut [f64], h: usize, w: usize) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let kv = k[((dy + 1) * 3 + dx + 1) as usize];
            if kv == 0.0 {
                continue;
            }
            let (y0, y1) = (((-dy).max(0)) as usize, (h as i64 - dy.max(0)) as usize);
            let (x0, x1) = (((-dx).max(0)) as usize, (w as i64 - dx.max(0)) as usize);
            for y in y0..y1 {
                let sy = (y as i64 + dy) as usize;
                for x in x0..x1 {
                    dsrc[sy * w + (x as i64 + dx) as usize] += kv * g[y * w + x];
                }
            }
        }
    }
}
