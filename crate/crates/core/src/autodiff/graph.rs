use super::{Tensor, TensorError};
use crate::rng::SplitMix64;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Mean(Var),
    SqErr(Var, Var),
    Dropout { x: Var, mask: Vec<f64> },
    L2Normalize { x: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only tape for reverse-mode differentiation.
///
/// Node ids are insertion indices, so every input precedes its consumer and
/// the reverse insertion order is a valid reverse topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + offset] = if input[i] == 1 { 0 } else { stride };
        stride *= input[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += in_strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe dense row-major
    // (or transposed) matrices lying inside those slices.
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

/// Splits a shape around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Graph whose dropout masks derive from `seed` and the node index.
    pub fn with_seed(seed: u64) -> Self {
        Self { nodes: Vec::new(), seed }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(Op::Leaf, tensor, needs)
    }

    /// Leaf with gradient tracking.
    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---- forward primitives -------------------------------------------

    /// `[..., M, K] x [K, N]` (leading axes of `a` folded into rows) or
    /// batched `[B, M, K] x [B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let n = sb[1];
            let rows = self.value(a).numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let needs = self.needs(a) || self.needs(b);
            return Ok(self.push(Op::MatMul { a, b, batched: false }, Tensor::from_parts(shape, out), needs));
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sb[1] == k {
            let (batch, m, n) = (sa[0], sa[1], sb[2]);
            let mut out = vec![0.0; batch * m * n];
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(m, k, n, &da[i * m * k..], false, &db[i * k * n..], false, &mut out[i * m * n..], false);
            }
            let needs = self.needs(a) || self.needs(b);
            return Ok(self.push(
                Op::MatMul { a, b, batched: true },
                Tensor::from_parts(vec![batch, m, n], out),
                needs,
            ));
        }
        Err(mismatch("matmul", &sa, &sb))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let data = if sa == sb {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let out: Vec<f64> = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(sa, out)
        } else {
            let shape = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch(name, &sa, &sb))?;
            let (ma, mb) = (broadcast_map(&sa, &shape), broadcast_map(&sb, &shape));
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let out: Vec<f64> = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(shape, out)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, data, needs))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let needs = self.needs(x);
        self.push(op, out, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let needs = self.needs(x);
        self.push(Op::Softmax(x), out, needs)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some((index, &value)) = self.value(x).data().iter().enumerate().find(|(_, v)| v.is_nan() || **v <= 0.0) {
            return Err(TensorError::LogDomain { index, value });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Clips into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::Concat(xs.to_vec()), Tensor::from_parts(shape, out), needs))
    }

    /// `x[..., start..start+len, ...]` along `axis` (copying).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid("slice", format!("range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(Op::Slice { x, axis, start }, Tensor::from_parts(new_shape, out), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape).map_err(|_| mismatch("reshape", self.shape(x), shape))?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), t, needs))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("transpose", format!("rank {} < 2", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (blk_in, blk_out) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), Tensor::from_parts(new_shape, out), needs))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), needs)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = 1;
        let needs = self.needs(x);
        Ok(self.push(Op::SumAxis { x, axis }, Tensor::from_parts(new_shape, out), needs))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Op::Mean(x), Tensor::scalar(m), needs)
    }

    /// `sum((a - b)^2)`, shape `[1]`.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("sq_err", self.shape(a), self.shape(b)));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::SqErr(a, b), Tensor::scalar(s), needs))
    }

    /// Inverted dropout. In eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = SplitMix64::stream(self.seed, self.nodes.len() as u64);
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel()).map(|_| if rng.next_f64() < rate { 0.0 } else { keep }).collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let needs = self.needs(x);
        Ok(self.push(Op::Dropout { x, mask }, out, needs))
    }

    /// `x / sqrt(sum(x^2) + eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let needs = self.needs(x);
        self.push(Op::L2Normalize { x, eps }, out, needs)
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every gradient-tracking leaf.
    ///
    /// Leaves the loss does not reach receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape != [1] {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.needs_grad {
                n.value.ensure_grad();
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reduces an output-shaped gradient onto a (possibly broadcast) input.
    fn unbroadcast(&self, v: Var, out_shape: &[usize], g: impl Fn(usize) -> f64) -> Vec<f64> {
        let in_shape = self.shape(v);
        let total: usize = out_shape.iter().product();
        if in_shape == out_shape {
            return (0..total).map(g).collect();
        }
        let map = broadcast_map(in_shape, out_shape);
        let mut acc = vec![0.0; self.value(v).numel()];
        for (i, &j) in map.iter().enumerate() {
            acc[j] += g(i);
        }
        acc
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sb = tb.shape();
                if !batched {
                    let (k, n) = (sb[0], sb[1]);
                    let rows = ta.numel() / k;
                    if self.needs(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        gemm(rows, n, k, g, false, tb.data(), true, &mut ga, false);
                        self.send(grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        gemm(k, rows, n, ta.data(), true, g, false, &mut gb, false);
                        self.send(grads, *b, gb);
                    }
                } else {
                    let sa = ta.shape();
                    let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.needs(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        for p in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[p * m * n..],
                                false,
                                &tb.data()[p * k * n..],
                                true,
                                &mut ga[p * m * k..],
                                false,
                            );
                        }
                        self.send(grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for p in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[p * m * k..],
                                true,
                                &g[p * m * n..],
                                false,
                                &mut gb[p * k * n..],
                                false,
                            );
                        }
                        self.send(grads, *b, gb);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let ga = self.unbroadcast(*a, out_shape, |j| g[j]);
                    self.send(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.unbroadcast(*b, out_shape, |j| sign * g[j]);
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let ma = (sa != out_shape).then(|| broadcast_map(sa, out_shape));
                let mb = (sb != out_shape).then(|| broadcast_map(sb, out_shape));
                let at = |j: usize| match &ma {
                    Some(m) => da[m[j]],
                    None => da[j],
                };
                let bt = |j: usize| match &mb {
                    Some(m) => db[m[j]],
                    None => db[j],
                };
                if self.needs(*a) {
                    let ga = self.unbroadcast(*a, out_shape, |j| g[j] * bt(j));
                    self.send(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.unbroadcast(*b, out_shape, |j| g[j] * at(j));
                    self.send(grads, *b, gb);
                }
            }
            Op::Affine { x, scale } => {
                self.send(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.send(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.send(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let gx = g.iter().zip(xs).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.send(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let cols = *out_shape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Log(x) => {
                let xs = self.value(*x).data();
                self.send(grads, *x, g.iter().zip(xs).map(|(g, v)| g / v).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xs = self.value(*x).data();
                let gx = g.iter().zip(xs).map(|(g, v)| if *v > *lo && *v < *hi { *g } else { 0.0 }).collect();
                self.send(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let total = *out_shape.last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &x in xs {
                    let w = *self.shape(x).last().unwrap();
                    if self.needs(x) {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.send(grads, x, gx);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, extent, inner) = split_axis(in_shape, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.send(grads, *x, gx);
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Transpose(x) => {
                let n = out_shape.len();
                let (r, c) = (out_shape[n - 2], out_shape[n - 1]);
                let mut gx = vec![0.0; g.len()];
                for (blk_in, blk_out) in g.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            blk_out[j * r + i] = blk_in[i * c + j];
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SqErr(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = da.iter().zip(db).map(|(x, y)| 2.0 * (x - y) * g[0]).collect();
                    self.send(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = da.iter().zip(db).map(|(x, y)| -2.0 * (x - y) * g[0]).collect();
                    self.send(grads, *b, gb);
                }
            }
            Op::Dropout { x, mask } => {
                self.send(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::L2Normalize { x, eps } => {
                let xs = self.value(*x).data();
                let cols = *out_shape.last().unwrap();
                let mut gx = vec![0.0; xs.len()];
                for ((xr, gr), out) in xs.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let norm = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let n3 = norm * norm * norm;
                    for j in 0..cols {
                        out[j] = gr[j] / norm - xr[j] * dot / n3;
                    }
                }
                self.send(grads, *x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sigmoid_and_softmax_examples() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let x = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let p = g.softmax(x);
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1000.0, 1000.0, -1000.0]));
        let p = g.softmax(x);
        assert!(g.value(p).is_finite());
        assert!((g.value(p).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::LogDomain { index: 1, .. })));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[0.0]));
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let l = g.sq_err(x, zero).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_sums_contributions() {
        // loss = sum(x * x + 3x) => grad = 2x + 3
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -4.0]));
        let sq = g.mul(x, x).unwrap();
        let lin = g.affine(x, 3.0, 0.0);
        let tot = g.add(sq, lin).unwrap();
        let l = g.sum(tot);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -5.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.param(t(&[1], &[3.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcasting_add_over_leading_axes() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(&[3], &[10.0, 20.0, 30.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcasting_column_multiply() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[2, 1], &[10.0, 100.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 20.0, 300.0, 400.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn slice_concat_transpose() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.slice(a, 1, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0, 5.0, 6.0]);
        let r = g.slice(a, 0, 1, 1).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 5.0, 6.0]);
        let c = g.concat(&[s, a]).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.value(c).row(1), &[5.0, 6.0, 4.0, 5.0, 6.0]);
        let tr = g.transpose(a).unwrap();
        assert_eq!(g.value(tr).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(g.slice(a, 1, 2, 2).is_err());
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 1], &[1.0, 1.0, 2.0, 0.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 6.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::with_seed(1);
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5, false).unwrap();
        assert_eq!(x, y);
        assert!(g.dropout(x, 1.0, true).is_err());
    }

    #[test]
    fn dropout_is_reproducible() {
        let run = || {
            let mut g = Graph::with_seed(42);
            let x = g.constant(Tensor::full(&[64], 1.0));
            let y = g.dropout(x, 0.3, true).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 2.0]));
        let y = g.l2_normalize(x, 0.0);
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 1.0]);
    }
}
