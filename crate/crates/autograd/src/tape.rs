use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{inverse_perm, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Gelu,
    Relu,
    Silu,
    Tanh,
    Sigmoid,
    Exp,
    Softplus,
    Abs,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Values are materialised eagerly; `backward` walks the nodes in reverse
/// creation order, which is a valid topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a store parameter. `None` for frozen stores and for
    /// parameters that never entered the graph.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        let v = self.params.get(&(store.uid(), id.0))?;
        self.grads[v.0].as_ref()
    }

    /// Squared L2 norm over all gradients of one store.
    pub fn store_sq_norm(&self, store: &ParamStore) -> f64 {
        store.ids().filter_map(|id| self.param(store, id)).map(Tensor::sq_norm).sum()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every slice covers the strided extents implied by (m, k, n) and
    // the strides, which callers derive from tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => gelu(x).0,
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => gelu(x).1,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (for gradient checks and probes).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter lookup, cached so repeated use shares one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable());
        self.params.insert(key, v);
        v
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let c = self.constant(c);
        self.mul(a, c)
    }

    /// `x[..., d] + row[d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(row).numel(), d, "add_row: width mismatch");
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    /// `x[..., d] * row[d]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(row).numel(), d, "mul_row: width mismatch");
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a *= b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::MulRow(x, row), ng)
    }

    /// Repeats a `[d]` vector into `[n, d]`.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let d = self.value(row).numel();
        let z = self.constant(Tensor::zeros(&[n, d]));
        self.add_row(z, row)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    /// `a[..., m, k] · b[k, n]` (shared right operand) or batched
    /// `a[B, m, k] · b[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = if sb.len() == 2 {
            let k = sb[0];
            let n = sb[1];
            assert_eq!(*sa.last().unwrap(), k, "matmul: inner dims {sa:?} x {sb:?}");
            let m = numel(&sa) / k;
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, &mut c, 0.0);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            Tensor::new(&shape, c).expect("matmul shape")
        } else {
            assert!(sa.len() == 3 && sb.len() == 3, "batched matmul needs rank 3");
            assert_eq!(sa[0], sb[0], "matmul batch mismatch");
            assert_eq!(sa[2], sb[1], "matmul inner dims {sa:?} x {sb:?}");
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![0.0; bt * m * n];
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                gemm(m, k, n, &ad[i * m * k..], k, 1, &bd[i * k * n..], n, 1, &mut c[i * m * n..(i + 1) * m * n], 0.0);
            }
            Tensor::new(&[bt, m, n], c).expect("bmm shape")
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = self.value(x).permute(axes);
        let ng = self.ng(x);
        self.push(v, Op::Permute(x, axes.to_vec()), ng)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let r = self.shape(x).len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let v = self.value(x).map(|a| u.forward(a));
        let ng = self.ng(x);
        self.push(v, Op::Unary(x, u), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in row.iter_mut() {
                *a = (*a - m).exp();
                s += *a;
            }
            for a in row.iter_mut() {
                *a /= s;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Zero-mean unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        let d = v.last_dim();
        let mut rstd = Vec::with_capacity(v.numel() / d.max(1));
        for row in v.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(v, Op::LayerNorm(x, rstd), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&oshape, out).unwrap(), Op::SumAxis(x, axis), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new(&oshape, out).unwrap(), Op::Concat(xs.to_vec(), axis), ng)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(&oshape, out).unwrap(), Op::Narrow(x, axis, start), ng)
    }

    /// Gathers rows along axis 0; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<Option<usize>>>) -> Var {
        let shape = self.shape(x).to_vec();
        let w = numel(&shape[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for i in idx.iter() {
            match i {
                Some(r) => {
                    assert!(*r < shape[0], "gather index {r} out of range");
                    out.extend_from_slice(&d[r * w..(r + 1) * w]);
                }
                None => out.extend(std::iter::repeat_n(0.0, w)),
            }
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&oshape, out).unwrap(), Op::GatherRows(x, idx), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0]).unwrap());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.zip_map(val(*b), |x, y| x * y));
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, r) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if want(*r) {
                    let d = val(*r).numel();
                    let mut acc = vec![0.0; d];
                    for chunk in g.data().chunks(d) {
                        for (a, b) in acc.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[r.0], Tensor::new(val(*r).shape(), acc).unwrap());
                }
            }
            Op::MulRow(x, r) => {
                let d = val(*r).numel();
                if want(*x) {
                    let rv = val(*r).data();
                    let mut gx = g.clone();
                    for chunk in gx.data_mut().chunks_mut(d) {
                        for (a, b) in chunk.iter_mut().zip(rv) {
                            *a *= b;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*r) {
                    let mut acc = vec![0.0; d];
                    for (gc, xc) in g.data().chunks(d).zip(val(*x).data().chunks(d)) {
                        for j in 0..d {
                            acc[j] += gc[j] * xc[j];
                        }
                    }
                    accumulate(&mut grads[r.0], Tensor::new(val(*r).shape(), acc).unwrap());
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    let c = *c;
                    accumulate(&mut grads[x.0], g.map(|v| v * c));
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Permute(x, axes) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], g.permute(&inverse_perm(axes)));
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    let gx = g.clone().reshape(val(*x).shape()).unwrap();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Unary(x, u) => {
                if want(*x) {
                    let xv = val(*x).data();
                    let yv = node.value.data();
                    let data = g.data().iter().enumerate().map(|(k, gk)| gk * u.derivative(xv[k], yv[k])).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), data).unwrap());
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let d = g.last_dim();
                    let y = node.value.data();
                    let mut gx = vec![0.0; g.numel()];
                    for (r, (gc, yc)) in g.data().chunks(d).zip(y.chunks(d)).enumerate() {
                        let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = yc[j] * (gc[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), gx).unwrap());
                }
            }
            Op::LayerNorm(x, rstd) => {
                if want(*x) {
                    let d = g.last_dim();
                    let y = node.value.data();
                    let mut gx = vec![0.0; g.numel()];
                    for (r, (gc, yc)) in g.data().chunks(d).zip(y.chunks(d)).enumerate() {
                        let mg = gc.iter().sum::<f64>() / d as f64;
                        let mgy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gc[j] - mg - yc[j] * mgy);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), gx).unwrap());
                }
            }
            Op::SumAll(x) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], Tensor::full(val(*x).shape(), g.item()));
                }
            }
            Op::SumAxis(x, axis) => {
                if want(*x) {
                    let shape = val(*x).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let gd = g.data();
                    let mut gx = vec![0.0; numel(shape)];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(shape, gx).unwrap());
                }
            }
            Op::Concat(xs, axis) => {
                let oshape = g.shape();
                let outer: usize = oshape[..*axis].iter().product();
                let inner: usize = oshape[axis + 1..].iter().product();
                let total = oshape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    if want(x) {
                        let mut gx = Vec::with_capacity(val(x).numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(&mut grads[x.0], Tensor::new(val(x).shape(), gx).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow(x, axis, start) => {
                if want(*x) {
                    let shape = val(*x).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let full = shape[*axis];
                    let len = g.shape()[*axis];
                    let mut gx = vec![0.0; numel(shape)];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(&mut grads[x.0], Tensor::new(shape, gx).unwrap());
                }
            }
            Op::GatherRows(x, idx) => {
                if want(*x) {
                    let shape = val(*x).shape();
                    let w = numel(&shape[1..]);
                    let mut gx = vec![0.0; numel(shape)];
                    for (o, i) in idx.iter().enumerate() {
                        if let Some(r) = i {
                            for j in 0..w {
                                gx[r * w + j] += g.data()[o * w + j];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(shape, gx).unwrap());
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.value(a);
        let bv = self.value(b);
        let want_a = self.ng(a);
        let want_b = self.ng(b);
        if bv.ndim() == 2 {
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.numel() / k;
            if want_a {
                // ga[m,k] = g[m,n] · bᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), n, 1, bv.data(), 1, n, &mut ga, 0.0);
                accumulate(&mut grads[a.0], Tensor::new(av.shape(), ga).unwrap());
            }
            if want_b {
                // gb[k,n] = aᵀ · g
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), 1, k, g.data(), n, 1, &mut gb, 0.0);
                accumulate(&mut grads[b.0], Tensor::new(bv.shape(), gb).unwrap());
            }
        } else {
            let (bt, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if want_a {
                let mut ga = vec![0.0; bt * m * k];
                for i in 0..bt {
                    gemm(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..],
                        n,
                        1,
                        &bv.data()[i * k * n..],
                        1,
                        n,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
                accumulate(&mut grads[a.0], Tensor::new(av.shape(), ga).unwrap());
            }
            if want_b {
                let mut gb = vec![0.0; bt * k * n];
                for i in 0..bt {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..],
                        1,
                        k,
                        &g.data()[i * m * n..],
                        n,
                        1,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        0.0,
                    );
                }
                accumulate(&mut grads[b.0], Tensor::new(bv.shape(), gb).unwrap());
            }
        }
    }
}
