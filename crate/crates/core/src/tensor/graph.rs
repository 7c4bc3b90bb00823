use std::cell::{Ref, RefCell};

use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    SumAll(Var),
    SumAxis { input: Var, axis: usize },
    MaxAll { input: Var, argmax: usize },
    Softmax(Var),
    LogSoftmax(Var),
    MatMul(Var, Var),
    Conv1d { signal: Var, kernels: Var, bias: Var },
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    Gather { table: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations, rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed over the dimensions of `out`, with zero
/// stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { stride };
        stride *= shape[i];
    }
    strides
}

/// Walks the broadcast output one innermost row at a time, calling
/// `f(out_start, a_start, b_start, a_step, b_step, row_len)`; steps are 0 on
/// a broadcast innermost axis and 1 otherwise.
fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0, 0, 0, 1);
        return;
    }
    let len = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let rows: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    for r in 0..rows {
        f(r * len, ia, ib, la, lb, len);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(ta.shape(), tb.shape(), &out, |o, i, j, si, sj, n| {
            for t in 0..n {
                data[o + t] = f(da[i + t * si], db[j + t * sj]);
            }
        });
        Ok(Tensor::from_parts(out, data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), self.needs_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), self.needs_grad(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), self.needs_grad(&[a, b])))
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = {
            let v = self.value(a);
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        let rg = self.needs_grad(&[a]);
        self.push(t, op, rg)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                reason: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Empty("concat"))?;
        let t = {
            let nodes = self.nodes.borrow();
            let base = nodes[first.0].value.shape();
            if axis >= base.len() {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    shape: base.to_vec(),
                    reason: format!("axis {axis} out of range"),
                });
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let conforms = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !conforms {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.to_vec();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let rg = self.needs_grad(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let shape = v.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(TensorError::InvalidShape {
                    op: "slice",
                    shape: shape.to_vec(),
                    reason: format!("cannot take [{start}, {}) along axis {axis}", start + len),
                });
            }
            let (outer, n, inner) = split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut out = shape.to_vec();
            out[axis] = len;
            Tensor::from_parts(out, data)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(t, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            Tensor::new(shape, v.data().to_vec()).map_err(|_| TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            })?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let shape = v.shape();
            if axis >= shape.len() {
                return Err(TensorError::InvalidShape {
                    op: "sum_axis",
                    shape: shape.to_vec(),
                    reason: format!("axis {axis} out of range"),
                });
            }
            let (outer, n, inner) = split_axis(shape, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &v.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut out = shape.to_vec();
            out.remove(axis);
            Tensor::from_parts(out, data)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(t, Op::SumAxis { input: a, axis }, rg))
    }

    /// Maximum over all elements; the gradient goes to the first maximal element.
    pub fn reduce_max(&self, a: Var) -> Result<Var> {
        let (m, argmax) = {
            let v = self.value(a);
            let mut best = 0;
            for (i, &x) in v.data().iter().enumerate() {
                if x > v.data()[best] {
                    best = i;
                }
            }
            (v.data()[best], best)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::MaxAll { input: a, argmax }, rg))
    }

    fn rows_op(&self, a: Var, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        let v = self.value(a);
        let last = *v.shape().last().ok_or(TensorError::InvalidShape {
            op: "softmax",
            shape: Vec::new(),
            reason: "needs at least one axis".into(),
        })?;
        let mut data = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(last).zip(data.chunks_mut(last)) {
            f(src, dst);
        }
        Ok(Tensor::from_parts(v.shape().to_vec(), data))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let t = self.rows_op(a, |src, dst| {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        })?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let t = self.rows_op(a, |src, dst| {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        })?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., m, k] · b[k, n]`; leading axes of `a` are treated as extra rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            };
            if ta.rank() < 2 || tb.rank() != 2 {
                return Err(mismatch());
            }
            let k = *ta.shape().last().unwrap();
            if tb.shape()[0] != k {
                return Err(mismatch());
            }
            let n = tb.shape()[1];
            let m = ta.len() / k;
            let mut out = vec![0.0; m * n];
            let (da, db) = (ta.data(), tb.data());
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = da[i * k + p];
                    for (o, &w) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                        *o += x * w;
                    }
                }
            }
            let mut shape = ta.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, out)
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Valid (unpadded, stride 1) 1-D convolution.
    ///
    /// `signal` is `[..., l, c_in]`, `kernels` is `[k, c_in, c_out]` and
    /// `bias` is `[c_out]`; the result is `[..., l - k + 1, c_out]`.
    pub fn conv1d_valid(&self, signal: Var, kernels: Var, bias: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (ts, tk, tb) = (&nodes[signal.0].value, &nodes[kernels.0].value, &nodes[bias.0].value);
            if ts.rank() < 2 || tk.rank() != 3 || tb.shape() != [tk.shape()[2]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d_valid",
                    lhs: ts.shape().to_vec(),
                    rhs: tk.shape().to_vec(),
                });
            }
            let (k, cin, cout) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
            let r = ts.rank();
            let (l, c) = (ts.shape()[r - 2], ts.shape()[r - 1]);
            if c != cin {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d_valid",
                    lhs: ts.shape().to_vec(),
                    rhs: tk.shape().to_vec(),
                });
            }
            if k > l {
                return Err(TensorError::InvalidShape {
                    op: "conv1d_valid",
                    shape: ts.shape().to_vec(),
                    reason: format!("kernel size {k} exceeds signal length {l}"),
                });
            }
            let batch = ts.len() / (l * cin);
            let lo = l - k + 1;
            let mut out = Vec::with_capacity(batch * lo * cout);
            for b in 0..batch {
                let sig = &ts.data()[b * l * cin..(b + 1) * l * cin];
                for t in 0..lo {
                    let start = out.len();
                    out.extend_from_slice(tb.data());
                    let row = &mut out[start..start + cout];
                    for dk in 0..k {
                        for ci in 0..cin {
                            let s = sig[(t + dk) * cin + ci];
                            let w = &tk.data()[(dk * cin + ci) * cout..(dk * cin + ci + 1) * cout];
                            for (o, &wv) in row.iter_mut().zip(w) {
                                *o += s * wv;
                            }
                        }
                    }
                }
            }
            let mut shape = ts.shape().to_vec();
            shape[r - 2] = lo;
            shape[r - 1] = cout;
            Tensor::from_parts(shape, out)
        };
        let rg = self.needs_grad(&[signal, kernels, bias]);
        Ok(self.push(
            t,
            Op::Conv1d {
                signal,
                kernels,
                bias,
            },
            rg,
        ))
    }

    /// Per-channel maximum over the length axis of `[..., l, c]`.
    pub fn global_max_pool(&self, a: Var) -> Result<Var> {
        let (t, argmax) = {
            let v = self.value(a);
            let r = v.rank();
            if r < 2 {
                return Err(TensorError::InvalidShape {
                    op: "global_max_pool",
                    shape: v.shape().to_vec(),
                    reason: "expected [..., length, channels]".into(),
                });
            }
            let (l, c) = (v.shape()[r - 2], v.shape()[r - 1]);
            let batch = v.len() / (l * c);
            let mut out = Vec::with_capacity(batch * c);
            let mut argmax = Vec::with_capacity(batch * c);
            for b in 0..batch {
                for ch in 0..c {
                    let mut best = b * l * c + ch;
                    for t in 1..l {
                        let i = (b * l + t) * c + ch;
                        if v.data()[i] > v.data()[best] {
                            best = i;
                        }
                    }
                    out.push(v.data()[best]);
                    argmax.push(best);
                }
            }
            let mut shape = v.shape()[..r - 2].to_vec();
            shape.push(c);
            (Tensor::from_parts(shape, out), argmax)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(t, Op::GlobalMaxPool { input: a, argmax }, rg))
    }

    /// Selects rows of `table` (`[rows, ...]`) in the given order.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(table);
            if v.rank() == 0 {
                return Err(TensorError::InvalidShape {
                    op: "gather_rows",
                    shape: Vec::new(),
                    reason: "table must have at least one axis".into(),
                });
            }
            let rows = v.shape()[0];
            let width = v.len() / rows;
            if indices.is_empty() {
                return Err(TensorError::Empty("gather_rows"));
            }
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        size: rows,
                    });
                }
                data.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
            }
            let mut shape = v.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_parts(shape, data)
        };
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Row `index` of an embedding table `[vocab, dim]`, as a `[dim]` vector.
    pub fn embedding_lookup(&self, table: Var, index: usize) -> Result<Var> {
        let dim = self.shape(table)[1..].to_vec();
        let row = self.gather_rows(table, &[index])?;
        self.reshape(row, &dim)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            let acc = |v: Var, grads: &mut Vec<Option<Vec<f64>>>| -> Option<usize> {
                if !nodes[v.0].requires_grad {
                    return None;
                }
                if grads[v.0].is_none() {
                    grads[v.0] = Some(vec![0.0; lens[v.0]]);
                }
                Some(v.0)
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        if sa == out.shape() {
                            gi.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        } else {
                            for_each_broadcast(sa, sb, out.shape(), |o, ia, _, si, _, n| {
                                for t in 0..n {
                                    gi[ia + t * si] += g[o + t];
                                }
                            });
                        }
                    }
                    if let Some(i) = acc(*b, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        if sb == out.shape() {
                            gi.iter_mut().zip(&g).for_each(|(x, y)| *x += sign_b * y);
                        } else {
                            for_each_broadcast(sa, sb, out.shape(), |o, _, ib, _, sj, n| {
                                for t in 0..n {
                                    gi[ib + t * sj] += sign_b * g[o + t];
                                }
                            });
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let same = ta.shape() == tb.shape();
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        if same {
                            for ((x, gv), bv) in gi.iter_mut().zip(&g).zip(tb.data()) {
                                *x += gv * bv;
                            }
                        } else {
                            let db = tb.data();
                            for_each_broadcast(ta.shape(), tb.shape(), out.shape(), |o, ia, ib, si, sj, n| {
                                for t in 0..n {
                                    gi[ia + t * si] += g[o + t] * db[ib + t * sj];
                                }
                            });
                        }
                    }
                    if let Some(i) = acc(*b, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        if same {
                            for ((x, gv), av) in gi.iter_mut().zip(&g).zip(ta.data()) {
                                *x += gv * av;
                            }
                        } else {
                            let da = ta.data();
                            for_each_broadcast(ta.shape(), tb.shape(), out.shape(), |o, ia, ib, si, sj, n| {
                                for t in 0..n {
                                    gi[ib + t * sj] += g[o + t] * da[ia + t * si];
                                }
                            });
                        }
                    }
                }
                Op::Neg(a) | Op::Scale(a, _) | Op::AddScalar(a) | Op::Reshape(a) => {
                    let f = match node.op {
                        Op::Neg(_) => -1.0,
                        Op::Scale(_, s) => s,
                        _ => 1.0,
                    };
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        gi.iter_mut().zip(&g).for_each(|(x, y)| *x += f * y);
                    }
                }
                Op::Tanh(a) | Op::Sigmoid(a) | Op::Exp(a) => {
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        let d: fn(f64) -> f64 = match node.op {
                            Op::Tanh(_) => |y| 1.0 - y * y,
                            Op::Sigmoid(_) => |y| y * (1.0 - y),
                            _ => |y| y,
                        };
                        for ((x, gv), &y) in gi.iter_mut().zip(&g).zip(out.data()) {
                            *x += gv * d(y);
                        }
                    }
                }
                Op::Log(a) | Op::Square(a) => {
                    let inp = &nodes[a.0].value;
                    let is_log = matches!(node.op, Op::Log(_));
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for ((x, gv), &u) in gi.iter_mut().zip(&g).zip(inp.data()) {
                            *x += if is_log { gv / u } else { 2.0 * u * gv };
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let inp = &nodes[a.0].value;
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for ((x, gv), &u) in gi.iter_mut().zip(&g).zip(inp.data()) {
                            if u >= *lo && u <= *hi {
                                *x += gv;
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for o in 0..outer {
                        for v in inputs {
                            let block = nodes[v.0].value.shape()[*axis] * inner;
                            if let Some(i) = acc(*v, &mut grads) {
                                let gi = grads[i].as_mut().unwrap();
                                for (x, y) in gi[o * block..(o + 1) * block].iter_mut().zip(&g[offset..offset + block]) {
                                    *x += y;
                                }
                            }
                            offset += block;
                        }
                    }
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = nodes[input.0].value.shape();
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    let len = out.shape()[*axis];
                    if let Some(i) = acc(*input, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for o in 0..outer {
                            let base = o * n * inner + start * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            for (x, y) in gi[base..base + len * inner].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    if let Some(i) = acc(*a, &mut grads) {
                        grads[i].as_mut().unwrap().iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::SumAxis { input, axis } => {
                    let in_shape = nodes[input.0].value.shape();
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    if let Some(i) = acc(*input, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for o in 0..outer {
                            for k in 0..n {
                                let dst = &mut gi[(o * n + k) * inner..(o * n + k + 1) * inner];
                                for (x, y) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                Op::MaxAll { input, argmax } => {
                    if let Some(i) = acc(*input, &mut grads) {
                        grads[i].as_mut().unwrap()[*argmax] += g[0];
                    }
                }
                Op::GlobalMaxPool { input, argmax } => {
                    if let Some(i) = acc(*input, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for (&src, gv) in argmax.iter().zip(&g) {
                            gi[src] += gv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let last = *out.shape().last().unwrap();
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for ((y, gr), x) in out.data().chunks(last).zip(g.chunks(last)).zip(gi.chunks_mut(last)) {
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((xv, &yv), &gv) in x.iter_mut().zip(y).zip(gr) {
                                *xv += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let last = *out.shape().last().unwrap();
                    if let Some(i) = acc(*a, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for ((y, gr), x) in out.data().chunks(last).zip(g.chunks(last)).zip(gi.chunks_mut(last)) {
                            let total: f64 = gr.iter().sum();
                            for ((xv, &yv), &gv) in x.iter_mut().zip(y).zip(gr) {
                                *xv += gv - yv.exp() * total;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let k = *ta.shape().last().unwrap();
                    let n = tb.shape()[1];
                    let m = ta.len() / k;
                    if let Some(i) = acc(*a, &mut grads) {
                        // dA = G · Bᵀ
                        let gi = grads[i].as_mut().unwrap();
                        let db = tb.data();
                        let mut bt = vec![0.0; n * k];
                        for p in 0..k {
                            for j in 0..n {
                                bt[j * k + p] = db[p * n + j];
                            }
                        }
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let out_row = &mut gi[r * k..(r + 1) * k];
                            for (j, &x) in grow.iter().enumerate() {
                                for (o, &w) in out_row.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                    *o += x * w;
                                }
                            }
                        }
                    }
                    if let Some(i) = acc(*b, &mut grads) {
                        // dB = Aᵀ · G
                        let gi = grads[i].as_mut().unwrap();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = ta.data()[r * k + p];
                                for (o, &gv) in gi[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * gv;
                                }
                            }
                        }
                    }
                }
                Op::Conv1d {
                    signal,
                    kernels,
                    bias,
                } => {
                    let (ts, tk) = (&nodes[signal.0].value, &nodes[kernels.0].value);
                    let (k, cin, cout) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
                    let r = ts.rank();
                    let l = ts.shape()[r - 2];
                    let lo = l - k + 1;
                    let batch = ts.len() / (l * cin);
                    if let Some(i) = acc(*bias, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for row in g.chunks(cout) {
                            gi.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                    if let Some(i) = acc(*kernels, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for b in 0..batch {
                            for t in 0..lo {
                                let grow = &g[(b * lo + t) * cout..(b * lo + t + 1) * cout];
                                for dk in 0..k {
                                    for ci in 0..cin {
                                        let s = ts.data()[(b * l + t + dk) * cin + ci];
                                        let dst = &mut gi[(dk * cin + ci) * cout..(dk * cin + ci + 1) * cout];
                                        dst.iter_mut().zip(grow).for_each(|(x, y)| *x += s * y);
                                    }
                                }
                            }
                        }
                    }
                    if let Some(i) = acc(*signal, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for b in 0..batch {
                            for t in 0..lo {
                                let grow = &g[(b * lo + t) * cout..(b * lo + t + 1) * cout];
                                for dk in 0..k {
                                    for ci in 0..cin {
                                        let w = &tk.data()[(dk * cin + ci) * cout..(dk * cin + ci + 1) * cout];
                                        gi[(b * l + t + dk) * cin + ci] +=
                                            w.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gather { table, indices } => {
                    let width = nodes[table.0].value.len() / nodes[table.0].value.shape()[0];
                    if let Some(i) = acc(*table, &mut grads) {
                        let gi = grads[i].as_mut().unwrap();
                        for (r, &row) in indices.iter().enumerate() {
                            let dst = &mut gi[row * width..(row + 1) * width];
                            dst.iter_mut()
                                .zip(&g[r * width..(r + 1) * width])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        assert_eq!(g.scalar(g.sigmoid(z)), 0.5);

        let x = g.constant(t(&[3], &[0.1, 0.9, 0.4]));
        assert_eq!(g.scalar(g.reduce_max(x).unwrap()), 0.9);

        let ones = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let sm = g.softmax(ones).unwrap();
        for &p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[4]).unwrap());
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
        assert!(matches!(g.matmul(a, a), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
        let c = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        assert!(matches!(g.concat(&[a, c], 0), Err(TensorError::ShapeMismatch { op: "concat", .. })));
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(g.value(g.matmul(a, eye).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = g.constant(t(&[2, 1], &[5.0, 7.0]));
        assert_eq!(g.value(g.matmul(eye, col).unwrap()).data(), &[5.0, 7.0]);
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let prod = g.matmul(a, ones).unwrap();
        assert_eq!(g.shape(prod), vec![2, 1]);
        assert_eq!(g.value(prod).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_examples() {
        let g = Graph::new();
        let zero_b = g.constant(t(&[1], &[0.0]));
        let sig = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[2, 1, 1], &[1.0, 0.0]));
        assert_eq!(g.value(g.conv1d_valid(sig, k, zero_b).unwrap()).data(), &[1.0, 2.0]);

        let k0 = g.constant(Tensor::zeros(&[2, 1, 1]).unwrap());
        assert_eq!(g.value(g.conv1d_valid(sig, k0, zero_b).unwrap()).data(), &[0.0, 0.0]);

        let ones = g.constant(t(&[4, 1], &[1.0; 4]));
        let k11 = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        assert_eq!(g.value(g.conv1d_valid(ones, k11, zero_b).unwrap()).data(), &[2.0, 2.0, 2.0]);

        let long = g.constant(Tensor::zeros(&[5, 1, 1]).unwrap());
        assert!(matches!(
            g.conv1d_valid(sig, long, zero_b),
            Err(TensorError::InvalidShape { op: "conv1d_valid", .. })
        ));
    }

    #[test]
    fn global_max_pool_examples() {
        let g = Graph::new();
        let x = g.constant(t(&[3, 1], &[0.1, 0.7, 0.3]));
        assert_eq!(g.value(g.global_max_pool(x).unwrap()).data(), &[0.7]);
        let two = g.constant(t(&[2, 2], &[1.0, 9.0, 5.0, 2.0]));
        assert_eq!(g.value(g.global_max_pool(two).unwrap()).data(), &[5.0, 9.0]);
        let c = g.constant(Tensor::full(&[4, 2], 0.25).unwrap());
        assert_eq!(g.value(g.global_max_pool(c).unwrap()).data(), &[0.25, 0.25]);
    }

    #[test]
    fn max_gradient_goes_to_first_maximum() {
        let g = Graph::new();
        let x = g.param(t(&[4], &[0.2, 0.8, 0.8, 0.1]));
        let m = g.reduce_max(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x), vec![0.0, 1.0, 0.0, 0.0]);

        let g = Graph::new();
        let x = g.param(t(&[3, 2], &[1.0, 4.0, 3.0, 4.0, 3.0, 0.0]));
        let pooled = g.global_max_pool(x).unwrap();
        let w = g.constant(t(&[2], &[2.0, -1.0]));
        let loss = g.sum(g.mul(pooled, w).unwrap());
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), vec![0.0, -1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_lookup_routes_gradient_to_one_row() {
        let g = Graph::new();
        let table = g.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = g.embedding_lookup(table, 1).unwrap();
        let b = g.embedding_lookup(table, 1).unwrap();
        assert_eq!(*g.value(a), *g.value(b));
        assert_eq!(g.shape(a), vec![2]);
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(table), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            g.embedding_lookup(table, 3),
            Err(TensorError::IndexOutOfRange { index: 3, size: 3, .. })
        ));
    }

    #[test]
    fn zero_width_table_rejected_at_construction() {
        assert!(Tensor::zeros(&[4, 0]).is_err());
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 1.0, 1.0]));
        let loss = g.sum(g.mul(x, x).unwrap());
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), vec![2.0, 4.0]);
        assert_eq!(grads.wrt(unused), vec![0.0; 3]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let g = Graph::new();
        let m = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = g.param(t(&[3], &[10.0, 20.0, 30.0]));
        let col = g.param(t(&[2, 1], &[2.0, 3.0]));
        let s = g.add(m, row).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let p = g.mul(s, col).unwrap();
        assert_eq!(g.value(p).data(), &[22.0, 44.0, 66.0, 42.0, 75.0, 108.0]);
        let grads = g.backward(g.sum(p)).unwrap();
        assert_eq!(grads.wrt(row), vec![5.0, 5.0, 5.0]);
        assert_eq!(grads.wrt(col), vec![66.0, 75.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let g = Graph::new();
            let a = g.constant(t(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]));
            let w = g.constant(t(&[3, 2], &[0.11, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let y = g.softmax(g.tanh(g.matmul(a, w).unwrap())).unwrap();
            let out = g.value(y).clone();
            out
        };
        assert_eq!(run(), run());
    }
}
