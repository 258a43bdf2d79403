//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its value; [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::broadcast::{broadcast_shape, for_each};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{matmul_into, Scalar};
use crate::tensor::{numel, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Clamp(usize, T, T),
    SumAll(usize),
    SumAxes(usize),
    Reshape(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Upsample2(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, indices: Vec<usize> },
    Gather { a: usize, indices: Vec<usize> },
    Softmax { a: usize, axis: usize },
    LogSumExp { a: usize, axis: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    AdaIn { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, sigma: Vec<T>, eps: T },
    StraightThrough { soft: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros if it did not influence the output.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Reverse pass seeded with `d output = 1`; `output` must hold one element.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[output.id].value.len(), 1, "backward needs a scalar output");
        grads[output.id] = Some(Tensor::ones(nodes[output.id].value.shape()));
        for id in (0..=output.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Sums `g` (shaped `out`) down to the broadcast source shape `target`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut r = Tensor::zeros(target);
    let gd = g.data();
    let rd = r.data_mut();
    for_each(g.shape(), target, target, |o, t, _| rd[t] += gd[o]);
    r
}

/// (outer, axis, inner) factorisation of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            acc(nodes, grads, a, reduce_to(g, val(a).shape()));
            acc(nodes, grads, b, reduce_to(g, val(b).shape()));
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            acc(nodes, grads, a, reduce_to(g, val(a).shape()));
            acc(nodes, grads, b, reduce_to(&g.map(|x| -x), val(b).shape()));
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let is_div = matches!(nodes[id].op, Op::Div(..));
            let (va, vb) = (val(a), val(b));
            let mut ga = Tensor::zeros(g.shape());
            let mut gb = Tensor::zeros(g.shape());
            {
                let (gad, gbd, gd, ad, bd) = (ga.data_mut(), gb.data_mut(), g.data(), va.data(), vb.data());
                for_each(g.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    if is_div {
                        gad[o] = gd[o] / bd[ib];
                        gbd[o] = -gd[o] * ad[ia] / (bd[ib] * bd[ib]);
                    } else {
                        gad[o] = gd[o] * bd[ib];
                        gbd[o] = gd[o] * ad[ia];
                    }
                });
            }
            if nodes[a].needs_grad {
                acc(nodes, grads, a, reduce_to(&ga, va.shape()));
            }
            if nodes[b].needs_grad {
                acc(nodes, grads, b, reduce_to(&gb, vb.shape()));
            }
        }
        Op::Neg(a) => acc(nodes, grads, *a, g.map(|x| -x)),
        Op::Scale(a, c) => {
            let c = *c;
            acc(nodes, grads, *a, g.map(|x| x * c))
        }
        Op::AddScalar(a) => acc(nodes, grads, *a, g.clone()),
        Op::Exp(a) => acc(nodes, grads, *a, g.zip_map(out, |d, y| d * y)),
        Op::Log(a) => acc(nodes, grads, *a, g.zip_map(val(*a), |d, x| d / x)),
        Op::Abs(a) => acc(nodes, grads, *a, g.zip_map(val(*a), |d, x| d * x.signum() * if x == T::zero() { T::zero() } else { T::one() })),
        Op::Sqrt(a) => acc(nodes, grads, *a, g.zip_map(out, |d, y| d / (y + y))),
        Op::Square(a) => acc(nodes, grads, *a, g.zip_map(val(*a), |d, x| d * (x + x))),
        Op::Tanh(a) => acc(nodes, grads, *a, g.zip_map(out, |d, y| d * (T::one() - y * y))),
        Op::Sigmoid(a) => acc(nodes, grads, *a, g.zip_map(out, |d, y| d * y * (T::one() - y))),
        Op::Relu(a) => acc(nodes, grads, *a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() })),
        Op::LeakyRelu(a, s) => {
            let s = *s;
            acc(nodes, grads, *a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { d * s }))
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            acc(nodes, grads, *a, g.zip_map(val(*a), |d, x| if x < lo || x > hi { T::zero() } else { d }))
        }
        Op::SumAll(a) => acc(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item())),
        Op::SumAxes(a) => {
            let shape = val(*a).shape();
            let mut r = Tensor::zeros(shape);
            let (rd, gd) = (r.data_mut(), g.data());
            for_each(shape, g.shape(), g.shape(), |o, ig, _| rd[o] = gd[ig]);
            acc(nodes, grads, *a, r)
        }
        Op::Reshape(a) => {
            let r = g.clone().reshape(val(*a).shape()).expect("reshape grad");
            acc(nodes, grads, *a, r)
        }
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            let (va, vb) = (val(a), val(b));
            let (m, k) = if ta { (va.dim(1), va.dim(0)) } else { (va.dim(0), va.dim(1)) };
            let n = g.dim(1);
            if nodes[a].needs_grad {
                let mut ga = Tensor::zeros(va.shape());
                if ta {
                    matmul_into(vb.data(), tb, g.data(), true, k, n, m, T::zero(), ga.data_mut());
                } else {
                    matmul_into(g.data(), false, vb.data(), !tb, m, n, k, T::zero(), ga.data_mut());
                }
                acc(nodes, grads, a, ga);
            }
            if nodes[b].needs_grad {
                let mut gb = Tensor::zeros(vb.shape());
                if tb {
                    matmul_into(g.data(), true, va.data(), ta, n, m, k, T::zero(), gb.data_mut());
                } else {
                    matmul_into(va.data(), !ta, g.data(), false, k, m, n, T::zero(), gb.data_mut());
                }
                acc(nodes, grads, b, gb);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (x, w, b) = (*x, *w, *b);
            let (dx, dw, db) =
                kernels::conv2d_backward(geom, val(x).data(), val(w).data(), g.data(), nodes[x].needs_grad);
            if let Some(dx) = dx {
                acc(nodes, grads, x, Tensor::from_vec(val(x).shape(), dx).expect("conv dx"));
            }
            acc(nodes, grads, w, Tensor::from_vec(val(w).shape(), dw).expect("conv dw"));
            if let Some(b) = b {
                acc(nodes, grads, b, Tensor::from_vec(val(b).shape(), db).expect("conv db"));
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = Tensor::zeros(val(*x).shape());
            let d = dx.data_mut();
            for (o, &i) in argmax.iter().enumerate() {
                d[i] += g.data()[o];
            }
            acc(nodes, grads, *x, dx)
        }
        Op::Upsample2(x) => {
            let shape = val(*x).shape();
            let dx = kernels::upsample2_backward(shape, g.data());
            acc(nodes, grads, *x, Tensor::from_vec(shape, dx).expect("upsample dx"))
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(g.shape(), *axis);
            let total = g.dim(*axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).dim(*axis);
                if nodes[p].needs_grad {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    acc(nodes, grads, p, Tensor::from_vec(val(p).shape(), d).expect("concat grad"));
                }
                offset += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let shape = val(*a).shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let len = g.dim(*axis);
            let mut r = Tensor::zeros(shape);
            let rd = r.data_mut();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                rd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            acc(nodes, grads, *a, r)
        }
        Op::IndexSelect { a, indices } => {
            let shape = val(*a).shape();
            let inner = numel(&shape[1..]);
            let mut r = Tensor::zeros(shape);
            let rd = r.data_mut();
            for (o, &i) in indices.iter().enumerate() {
                for j in 0..inner {
                    rd[i * inner + j] += g.data()[o * inner + j];
                }
            }
            acc(nodes, grads, *a, r)
        }
        Op::Gather { a, indices } => {
            let mut r = Tensor::zeros(val(*a).shape());
            let rd = r.data_mut();
            for (o, &i) in indices.iter().enumerate() {
                rd[i] += g.data()[o];
            }
            acc(nodes, grads, *a, r)
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let mut r = Tensor::zeros(out.shape());
            let (rd, yd, gd) = (r.data_mut(), out.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        rd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            acc(nodes, grads, *a, r)
        }
        Op::LogSumExp { a, axis } => {
            let x = val(*a);
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut r = Tensor::zeros(x.shape());
            let (rd, xd, gd, od) = (r.data_mut(), x.data(), g.data(), out.data());
            for o in 0..outer {
                for i in 0..inner {
                    let lse = od[o * inner + i];
                    let gg = gd[o * inner + i];
                    for k in 0..len {
                        let at = (o * len + k) * inner + i;
                        rd[at] = gg * (xd[at] - lse).exp();
                    }
                }
            }
            acc(nodes, grads, *a, r)
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let shape = val(*x).shape();
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let m = T::of_usize(n * hw);
            let gam = val(*gamma).data();
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (mut sdy, mut sdyx) = (T::zero(), T::zero());
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sdy += gd[i];
                        sdyx += gd[i] * xhat[i];
                    }
                }
                dgamma[ch] = sdyx;
                dbeta[ch] = sdy;
                let k = gam[ch] * inv_std[ch] / m;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = k * (m * gd[i] - sdy - xhat[i] * sdyx);
                    }
                }
            }
            acc(nodes, grads, *x, Tensor::from_vec(shape, dx).expect("bn dx"));
            acc(nodes, grads, *gamma, Tensor::from_vec(&[c], dgamma).expect("bn dgamma"));
            acc(nodes, grads, *beta, Tensor::from_vec(&[c], dbeta).expect("bn dbeta"));
        }
        Op::AdaIn { x, gamma, beta, xhat, sigma, eps } => {
            let shape = val(*x).shape();
            let (nc, hw) = (shape[0] * shape[1], shape[2] * shape[3]);
            let m = T::of_usize(hw);
            let gam = val(*gamma).data();
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); nc];
            let mut dbeta = vec![T::zero(); nc];
            for p in 0..nc {
                let span = p * hw..(p + 1) * hw;
                let s = sigma[p] + *eps;
                let (mut sdy, mut sdyx) = (T::zero(), T::zero());
                for i in span.clone() {
                    sdy += gd[i];
                    sdyx += gd[i] * xhat[i];
                }
                dgamma[p] = sdyx;
                dbeta[p] = sdy;
                // xhat = (x - mu) / (sigma + eps); the sigma path vanishes for constant channels
                let mean_gx = gam[p] * sdy / m;
                let corr = if sigma[p] > T::zero() { gam[p] * sdyx * s / (m * sigma[p]) } else { T::zero() };
                for i in span {
                    dx[i] = (gam[p] * gd[i] - mean_gx - xhat[i] * corr) / s;
                }
            }
            acc(nodes, grads, *x, Tensor::from_vec(shape, dx).expect("adain dx"));
            let gshape = val(*gamma).shape().to_vec();
            acc(nodes, grads, *gamma, Tensor::from_vec(&gshape, dgamma).expect("adain dgamma"));
            acc(nodes, grads, *beta, Tensor::from_vec(&gshape, dbeta).expect("adain dbeta"));
        }
        Op::StraightThrough { soft } => acc(nodes, grads, *soft, g.clone()),
    }
}

macro_rules! unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(self) -> Var<'t, T> {
            let f = $f;
            let v = self.value().map(f);
            self.unary(v, Op::$op(self.id))
        }
    };
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let ng = self.requires_grad();
        self.tape.push(value, op, ng)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn binary(self, other: Var<'t, T>, kind: u8) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let mut out = Tensor::zeros(&shape);
        {
            let (od, ad, bd) = (out.data_mut(), a.data(), b.data());
            if a.shape() == b.shape() {
                for ((o, &x), &y) in od.iter_mut().zip(ad).zip(bd) {
                    *o = apply(kind, x, y);
                }
            } else {
                for_each(&shape, a.shape(), b.shape(), |o, ia, ib| od[o] = apply(kind, ad[ia], bd[ib]));
            }
        }
        let op = match kind {
            0 => Op::Add(self.id, other.id),
            1 => Op::Sub(self.id, other.id),
            2 => Op::Mul(self.id, other.id),
            _ => Op::Div(self.id, other.id),
        };
        let ng = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, op, ng))
    }

    pub fn try_add(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, 0)
    }
    pub fn try_sub(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, 1)
    }
    pub fn try_mul(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, 2)
    }
    pub fn try_div(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, 3)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    unary!(neg, Neg, |x: T| -x);
    unary!(exp, Exp, |x: T| x.exp());
    unary!(ln, Log, |x: T| x.ln());
    unary!(abs, Abs, |x: T| x.abs());
    unary!(sqrt, Sqrt, |x: T| x.sqrt());
    unary!(square, Square, |x: T| x * x);
    unary!(tanh, Tanh, |x: T| x.tanh());
    unary!(sigmoid, Sigmoid, |x: T| T::one() / (T::one() + (-x).exp()));
    unary!(relu, Relu, |x: T| x.max(T::zero()));

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::of_usize(self.value().len());
        self.sum().scale(T::one() / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        let mut out = Tensor::zeros(&shape);
        {
            let (od, xd) = (out.data_mut(), x.data());
            for_each(x.shape(), &shape, &shape, |i, o, _| od[o] += xd[i]);
        }
        self.unary(out, Op::SumAxes(self.id))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(T::one() / T::of_usize(count))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// 2-D product `op(self) · op(other)`, `op` transposing when the flag is set.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::Shape("matmul needs 2-D operands".into()));
        }
        let (m, k) = if ta { (a.dim(1), a.dim(0)) } else { (a.dim(0), a.dim(1)) };
        let (k2, n) = if tb { (b.dim(1), b.dim(0)) } else { (b.dim(0), b.dim(1)) };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(a.data(), ta, b.data(), tb, m, k, n, T::zero(), out.data_mut());
        let ng = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul { a: self.id, b: other.id, ta, tb }, ng))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// NCHW convolution with square kernel `w: (Cout, Cin, k, k)`.
    pub fn conv2d(self, w: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 4 || wv.rank() != 4 || wv.dim(2) != wv.dim(3) || wv.dim(1) != x.dim(1) {
            return Err(Error::Shape(format!("conv2d input {:?} weight {:?}", x.shape(), wv.shape())));
        }
        let geom = ConvGeom {
            n: x.dim(0),
            cin: x.dim(1),
            h: x.dim(2),
            w: x.dim(3),
            cout: wv.dim(0),
            k: wv.dim(2),
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.k || geom.w + 2 * pad < geom.k {
            return Err(Error::Shape("conv2d kernel larger than padded input".into()));
        }
        let bv = bias.map(|b| b.value());
        let data = kernels::conv2d_forward(&geom, x.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::from_vec(&[geom.n, geom.cout, geom.hout(), geom.wout()], data)?;
        let ng = self.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(out, Op::Conv2d { x: self.id, w: w.id, b: bias.map(|b| b.id), geom }, ng))
    }

    pub fn max_pool2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2 needs even NCHW dims, got {:?}", x.shape())));
        }
        let (v, argmax) = kernels::maxpool2_forward(x.shape(), x.data());
        let out = Tensor::from_vec(&[x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2], v)?;
        Ok(self.unary(out, Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::Shape("upsample2 needs NCHW".into()));
        }
        let v = kernels::upsample2_forward(x.shape(), x.data());
        let out = Tensor::from_vec(&[x.dim(0), x.dim(1), x.dim(2) * 2, x.dim(3) * 2], v)?;
        Ok(self.unary(out, Op::Upsample2(self.id)))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut shape = values[0].shape().to_vec();
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != shape.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != shape[i]) {
                return Err(Error::Shape(format!("concat {:?} with {:?}", shape, s)));
            }
        }
        shape[axis] = values.iter().map(|v| v.dim(axis)).sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.dim(axis) * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis };
        Ok(tape.push(Tensor::from_vec(&shape, data)?, op, ng))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.dim(axis) {
            return Err(Error::Shape(format!("narrow {axis}:{start}+{len} of {:?}", x.shape())));
        }
        let (outer, total, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(Tensor::from_vec(&shape, data)?, Op::Narrow { a: self.id, axis, start }))
    }

    /// Rows of axis 0 picked by `indices` (repeats allowed).
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let inner = numel(&x.shape()[1..]);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= x.dim(0) {
                return Err(Error::Shape(format!("index {i} out of {}", x.dim(0))));
            }
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let op = Op::IndexSelect { a: self.id, indices: indices.to_vec() };
        Ok(self.unary(Tensor::from_vec(&shape, data)?, op))
    }

    /// Elements at flat `indices`, arranged as `shape`.
    pub fn gather(self, indices: &[usize], shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if numel(shape) != indices.len() {
            return Err(Error::Shape("gather shape/indices mismatch".into()));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(*x.data().get(i).ok_or_else(|| Error::Shape(format!("gather index {i} out of range")))?);
        }
        let op = Op::Gather { a: self.id, indices: indices.to_vec() };
        Ok(self.unary(Tensor::from_vec(shape, data)?, op))
    }

    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = Tensor::zeros(x.shape());
        let (od, xd) = (out.data_mut(), x.data());
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    od[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    od[at(k)] /= z;
                }
            }
        }
        self.unary(out, Op::Softmax { a: self.id, axis })
    }

    /// `log Σ exp` along `axis`, kept as a size-1 dim.
    pub fn logsumexp(self, axis: usize) -> Var<'t, T> {
        let x = self.value();
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let mut out = Tensor::zeros(&shape);
        let (od, xd) = (out.data_mut(), x.data());
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|k| (xd[at(k)] - m).exp()).sum();
                od[o * inner + i] = m + s.ln();
            }
        }
        self.unary(out, Op::LogSumExp { a: self.id, axis })
    }

    /// Training-mode batch normalisation over (N, H, W) per channel.
    /// Returns the output with the biased batch mean and variance.
    pub fn batch_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::Shape("batch_norm needs NCHW".into()));
        }
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape("batch_norm affine size".into()));
        }
        let m = T::of_usize(n * hw);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut v = T::zero();
            for b in 0..n {
                for &q in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    v += (q - mu) * (q - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let ng = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        let y = self.tape.push(Tensor::from_vec(x.shape(), out)?, op, ng);
        Ok((y, mean, var))
    }

    /// Adaptive instance normalisation: every (sample, channel) plane is
    /// whitened with its own population statistics, `(x - μ) / (σ + eps)`,
    /// then scaled by `gamma[n, c]` and shifted by `beta[n, c]`.
    pub fn adain(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::Shape("adain needs NCHW".into()));
        }
        let (nc, hw) = (x.dim(0) * x.dim(1), x.dim(2) * x.dim(3));
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [x.dim(0), x.dim(1)] || bv.shape() != [x.dim(0), x.dim(1)] {
            return Err(Error::Shape(format!(
                "adain feature {:?} needs (N, C) scale/bias, got {:?} / {:?}",
                x.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let m = T::of_usize(hw);
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut sigma = vec![T::zero(); nc];
        for p in 0..nc {
            let plane = &xd[p * hw..(p + 1) * hw];
            let mu = plane.iter().copied().sum::<T>() / m;
            let var = plane.iter().map(|&q| (q - mu) * (q - mu)).sum::<T>() / m;
            sigma[p] = var.sqrt();
            let s = sigma[p] + eps;
            for i in 0..hw {
                let h = if s > T::zero() { (plane[i] - mu) / s } else { T::zero() };
                xhat[p * hw + i] = h;
                out[p * hw + i] = gv.data()[p] * h + bv.data()[p];
            }
        }
        let ng = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::AdaIn { x: self.id, gamma: gamma.id, beta: beta.id, xhat, sigma, eps };
        Ok(self.tape.push(Tensor::from_vec(x.shape(), out)?, op, ng))
    }

    /// Forward value `hard`, gradient routed to `self` unchanged.
    pub fn straight_through(self, hard: Tensor<T>) -> Result<Var<'t, T>> {
        if hard.shape() != self.shape().as_slice() {
            return Err(Error::Shape("straight-through value shape".into()));
        }
        Ok(self.unary(hard, Op::StraightThrough { soft: self.id }))
    }
}

fn apply<T: Scalar>(kind: u8, x: T, y: T) -> T {
    match kind {
        0 => x + y,
        1 => x - y,
        2 => x * y,
        _ => x / y,
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $f:ident) => {
        impl<'t, T: Scalar> std::ops::$tr for Var<'t, T> {
            type Output = Var<'t, T>;
            fn $m(self, rhs: Var<'t, T>) -> Var<'t, T> {
                self.$f(rhs).expect(concat!("shape mismatch in ", stringify!($m)))
            }
        }
    };
}

binop!(Add, add, try_add);
binop!(Sub, sub, try_sub);
binop!(Mul, mul, try_mul);
binop!(Div, div, try_div);

impl<'t, T: Scalar> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Var<'t, T> {
        Var::neg(self)
    }
}
