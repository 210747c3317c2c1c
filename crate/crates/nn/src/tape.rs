//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every forward op appends a node holding its value and enough context to
//! push gradients back to its inputs. Values are reference counted so model
//! parameters can be bound as leaves without copying.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array1, ArrayD, Axis, IxDyn, Slice, Zip};

use crate::conv;
use crate::Float;

enum Op<T: Float> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: ArrayD<T>,
        invstd: Array1<T>,
        batch_stats: bool,
    },
    Upsample2x(usize),
    AvgPool2x(usize),
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Replicate(usize),
}

struct Node<T: Float> {
    value: Arc<ArrayD<T>>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<Arc<str>>,
}

/// Batch statistics observed by a training-mode batch-norm, to be folded
/// into the running buffers once the step is over.
#[derive(Debug, Clone)]
pub struct BnObservation<T: Float> {
    pub running_mean: String,
    pub running_var: String,
    pub mean: Array1<T>,
    /// Unbiased variance.
    pub var: Array1<T>,
}

#[derive(Default)]
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    bn: RefCell<Vec<BnObservation<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bn: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, requires_grad, None)
    }

    fn push_arc(
        &self,
        value: Arc<ArrayD<T>>,
        op: Op<T>,
        requires_grad: bool,
        name: Option<Arc<str>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn input(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&self, value: Arc<ArrayD<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, false, None)
    }

    /// A named leaf; its gradient is reported under `name` by [`Gradients::by_name`].
    pub fn param(&self, name: &str, value: Arc<ArrayD<T>>, trainable: bool) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, trainable, Some(Arc::from(name)))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn value(&self, id: usize) -> Arc<ArrayD<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn observe_bn(&self, obs: BnObservation<T>) {
        self.bn.borrow_mut().push(obs);
    }

    /// Drains the batch-norm statistics recorded by training-mode forwards.
    pub fn take_bn_observations(&self) -> Vec<BnObservation<T>> {
        std::mem::take(&mut *self.bn.borrow_mut())
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert!(root.id < nodes.len(), "root not on this tape");
        assert_eq!(nodes[root.id].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), T::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let gy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &*nodes[i].value;
            let mut acc = |i: usize, g: ArrayD<T>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, gy.clone());
                    }
                    acc(*a, gy);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, gy.mapv(|v| -v));
                    }
                    acc(*a, gy);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, &gy * val(*b));
                    }
                    if needs(*b) {
                        acc(*b, &gy * val(*a));
                    }
                }
                Op::Scale(a, k) => acc(*a, gy.mapv(|v| v * *k)),
                Op::Shift(a) => acc(*a, gy),
                Op::Relu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    acc(*a, g);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| {
                        if x <= T::zero() {
                            *g *= *slope;
                        }
                    });
                    acc(*a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&*node.value)
                        .for_each(|g, &y| *g *= y * (T::one() - y));
                    acc(*a, g);
                }
                Op::Tanh(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&*node.value)
                        .for_each(|g, &y| *g *= T::one() - y * y);
                    acc(*a, g);
                }
                Op::Exp(a) => acc(*a, gy * &*node.value),
                Op::Ln(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g /= x);
                    acc(*a, g);
                }
                Op::Square(a) => {
                    let mut g = gy;
                    let two = T::of(2.0);
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g *= two * x);
                    acc(*a, g);
                }
                Op::Abs(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| {
                        *g = if x > T::zero() {
                            *g
                        } else if x < T::zero() {
                            -*g
                        } else {
                            T::zero()
                        }
                    });
                    acc(*a, g);
                }
                Op::Sum(a) => {
                    let g0 = *gy.iter().next().expect("scalar grad");
                    acc(*a, ArrayD::from_elem(val(*a).raw_dim(), g0));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv::conv2d_backward(
                        val(*x),
                        val(*w),
                        &gy,
                        *stride,
                        *pad,
                        needs(*x),
                        needs(*w),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let g2 = gy.view().into_dimensionality::<ndarray::Ix2>().expect("2d grad");
                    let xv = val(*x).view().into_dimensionality::<ndarray::Ix2>().expect("2d x");
                    let wv = val(*w).view().into_dimensionality::<ndarray::Ix2>().expect("2d w");
                    if needs(*x) {
                        acc(*x, g2.dot(&wv).into_dyn());
                    }
                    if needs(*w) {
                        acc(*w, g2.t().dot(&xv).into_dyn());
                    }
                    if let Some(b) = b {
                        acc(*b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    invstd,
                    batch_stats,
                } => {
                    let (dx, dgamma, dbeta) =
                        batch_norm_backward(&gy, xhat, invstd, val(*gamma), *batch_stats);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                    if needs(*x) {
                        acc(*x, dx);
                    }
                }
                Op::Upsample2x(a) => {
                    let s = gy.shape();
                    let (b, c, h2, w2) = (s[0], s[1], s[2], s[3]);
                    let g4 = gy
                        .view()
                        .into_shape_with_order((b, c, h2 / 2, 2, w2 / 2, 2))
                        .expect("upsample grad");
                    let g = g4.sum_axis(Axis(5)).sum_axis(Axis(3));
                    acc(*a, g.into_dyn());
                }
                Op::AvgPool2x(a) => {
                    let s = gy.shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let quarter = T::of(0.25);
                    let mut g = ndarray::Array4::<T>::zeros((b, c, 2 * h, 2 * w));
                    let g4 = gy
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("4-d")
                        .mapv(|v| v * quarter);
                    for di in 0..2 {
                        for dj in 0..2 {
                            g.slice_mut(s![.., .., di..;2, dj..;2]).assign(&g4);
                        }
                    }
                    acc(*a, g.into_dyn());
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[1];
                        if needs(p) {
                            let g = gy
                                .slice_axis(Axis(1), Slice::from(start..start + len))
                                .to_owned();
                            acc(p, g);
                        }
                        start += len;
                    }
                }
                Op::Narrow { x, start } => {
                    let mut g = ArrayD::zeros(val(*x).raw_dim());
                    let len = gy.shape()[1];
                    g.slice_axis_mut(Axis(1), Slice::from(*start..*start + len))
                        .assign(&gy);
                    acc(*x, g);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).raw_dim();
                    acc(
                        *a,
                        gy.as_standard_layout()
                            .into_owned()
                            .into_shape_with_order(shape)
                            .expect("reshape grad"),
                    );
                }
                Op::Replicate(a) => {
                    let g = gy.sum_axis(Axis(3)).sum_axis(Axis(2));
                    acc(*a, g);
                }
            }
        }
        let names = nodes.iter().map(|n| n.name.clone()).collect();
        Gradients { grads, names }
    }
}

fn batch_norm_backward<T: Float>(
    gy: &ArrayD<T>,
    xhat: &ArrayD<T>,
    invstd: &Array1<T>,
    gamma: &ArrayD<T>,
    batch_stats: bool,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let shape = gy.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let l: usize = shape[2..].iter().product();
    let n = T::of((b * l) as f64);
    let gy = gy.as_standard_layout();
    let gys = gy.as_slice().expect("contiguous");
    let xh = xhat.as_slice().expect("contiguous");
    let mut sdy = vec![T::zero(); c];
    let mut sdyx = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            let (mut a, mut d) = (T::zero(), T::zero());
            for k in off..off + l {
                a += gys[k];
                d += gys[k] * xh[k];
            }
            sdy[ci] += a;
            sdyx[ci] += d;
        }
    }
    let mut dx = vec![T::zero(); gys.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            let gm = gamma[ci] * invstd[ci];
            if batch_stats {
                let k0 = gm / n;
                for k in off..off + l {
                    dx[k] = k0 * (n * gys[k] - sdy[ci] - xh[k] * sdyx[ci]);
                }
            } else {
                for k in off..off + l {
                    dx[k] = gm * gys[k];
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("bn grad"),
        Array1::from(sdyx).into_dyn(),
        Array1::from(sdy).into_dyn(),
    )
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<ArrayD<T>>>,
    names: Vec<Option<Arc<str>>>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of named parameters, summed over every binding of the same name.
    pub fn by_name(&self) -> BTreeMap<String, ArrayD<T>> {
        let mut out: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
        for (g, name) in self.grads.iter().zip(&self.names) {
            if let (Some(g), Some(name)) = (g, name) {
                match out.get_mut(&**name) {
                    Some(e) => *e += g,
                    None => {
                        out.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
        out
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_arc(self.value())
    }

    fn unary(&self, value: ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, value: ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn check_same(&self, other: &Var<'t, T>, what: &str) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "{what}: operands on different tapes"
        );
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch");
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.check_same(other, "add");
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.check_same(other, "sub");
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.check_same(other, "mul");
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, k: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x * k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let v = self.value().mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let v = self
            .value()
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.ln());
        self.unary(v, Op::Ln(self.id))
    }

    pub fn square(&self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn abs(&self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// NCHW convolution with square padding `pad` on both sides.
    pub fn conv2d(
        &self,
        w: &Var<'t, T>,
        b: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, T> {
        let xs = self.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        let bv = b.map(|b| b.value());
        let v = conv::conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad);
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Var<'t, T> {
        let xv = self.value();
        let wv = w.value();
        let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().expect("linear input must be 2-d");
        let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().expect("linear weight must be 2-d");
        assert_eq!(x2.ncols(), w2.ncols(), "linear dimension mismatch");
        let mut y = x2.dot(&w2.t());
        if let Some(b) = b {
            let bv = b.value();
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            y += &b1;
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.tape.push(
            y.into_dyn(),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        )
    }

    /// Batch normalization over axis 1, reducing over every other axis.
    ///
    /// With `running = None` the batch statistics are used; otherwise the
    /// supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running: Option<(&ArrayD<T>, &ArrayD<T>)>,
        eps: T,
    ) -> (Var<'t, T>, Option<(Array1<T>, Array1<T>)>) {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let n = b * l;
        let (mean, var_biased, stats) = match running {
            None => {
                let mut mean = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * l;
                        let s: T = xs[off..off + l].iter().copied().sum();
                        mean[ci] += s;
                    }
                }
                for m in &mut mean {
                    *m /= T::of(n as f64);
                }
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * l;
                        let m = mean[ci];
                        let s: T = xs[off..off + l].iter().map(|&v| (v - m) * (v - m)).sum();
                        var[ci] += s;
                    }
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&s| if n > 1 { s / T::of((n - 1) as f64) } else { s })
                    .collect();
                let biased: Vec<T> = var.iter().map(|&s| s / T::of(n as f64)).collect();
                (
                    mean.clone(),
                    biased,
                    Some((Array1::from(mean), Array1::from(unbiased))),
                )
            }
            Some((rm, rv)) => (rm.iter().copied().collect(), rv.iter().copied().collect(), None),
        };
        let invstd: Array1<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                let (m, is, g, bt) = (mean[ci], invstd[ci], gv[ci], bv[ci]);
                for k in off..off + l {
                    let h = (xs[k] - m) * is;
                    xhat[k] = h;
                    y[k] = g * h + bt;
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = self.tape.push(
            ArrayD::from_shape_vec(IxDyn(&shape), y).expect("bn output"),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: ArrayD::from_shape_vec(IxDyn(&shape), xhat).expect("bn xhat"),
                invstd,
                batch_stats: running.is_none(),
            },
            rg,
        );
        (out, stats)
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW map.
    pub fn upsample2x(&self) -> Var<'t, T> {
        let xv = self.value();
        let s = xv.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut y = ndarray::Array4::<T>::zeros((b, c, 2 * h, 2 * w));
        for di in 0..2 {
            for dj in 0..2 {
                y.slice_mut(s![.., .., di..;2, dj..;2])
                    .assign(&xv.view().into_dimensionality::<ndarray::Ix4>().expect("4-d"));
            }
        }
        self.unary(y.into_dyn(), Op::Upsample2x(self.id))
    }

    /// 2×2 average pooling with stride 2 of an NCHW map with even sides.
    pub fn avg_pool2x(&self) -> Var<'t, T> {
        let xv = self.value();
        let s = xv.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even sides");
        let y = xv
            .view()
            .into_shape_with_order((b, c, h / 2, 2, w / 2, 2))
            .expect("pool view")
            .sum_axis(Axis(5))
            .sum_axis(Axis(3))
            .mapv(|v| v * T::of(0.25));
        self.unary(y.into_dyn(), Op::AvgPool2x(self.id))
    }

    /// Concatenates along axis 1.
    pub fn concat(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Arc<ArrayD<T>>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            v.as_standard_layout().into_owned(),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// `len` entries of axis 1 starting at `start`.
    pub fn narrow(&self, start: usize, len: usize) -> Var<'t, T> {
        let v = self
            .value()
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.unary(v, Op::Narrow { x: self.id, start })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.unary(v, Op::Reshape(self.id))
    }

    /// `[B, C]` -> `[B, C, h, w]`, copying each column to every site.
    pub fn replicate(&self, h: usize, w: usize) -> Var<'t, T> {
        let xv = self.value();
        let s = xv.shape();
        assert_eq!(s.len(), 2, "replicate expects [B, C]");
        let (b, c) = (s[0], s[1]);
        let x2 = xv.view().into_shape_with_order((b, c, 1, 1)).expect("2-d");
        let y = x2
            .broadcast((b, c, h, w))
            .expect("broadcast")
            .as_standard_layout()
            .into_owned();
        self.unary(y.into_dyn(), Op::Replicate(self.id))
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
