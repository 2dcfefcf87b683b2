//! Reverse-mode automatic differentiation over a per-computation tape.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in
//! evaluation order, so walking the node list backwards is a reverse
//! topological order. Operations on [`Var`] handles validate shapes and
//! record a backward closure only when some input needs a gradient.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, T: Real> {
    grads: &'a mut [Option<Tensor<T>>],
    live: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    #[inline]
    pub fn wants(&self, id: usize) -> bool {
        self.live[id]
    }

    pub fn add(&mut self, id: usize, grad: Tensor<T>) {
        if !self.live[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), params: RefCell::new(BTreeMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, backward: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Binds a named model parameter. Binding the same name twice returns
    /// the existing leaf.
    pub fn param(&self, name: &str, value: &Tensor<T>, trainable: bool) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { graph: self, id };
        }
        let v = self.leaf(value.clone(), trainable);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    fn record(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node { value: Rc::new(value), requires_grad, backward });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let live: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if live[loss.id] {
            grads[loss.id] = Some(Tensor::ones(loss_value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let Some(bw) = &nodes[id].backward else { continue };
            if let Some(g) = grads[id].take() {
                let mut sink = GradSink { grads: &mut grads, live: &live };
                bw(&g, &mut sink);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, params: self.params.borrow().clone() })
    }
}

/// Gradients of a scalar with respect to every leaf.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.by_id(v.id)
    }

    fn by_id(&self, id: usize) -> Tensor<T> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&id| self.by_id(id))
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn zip3_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).zip(c.data()).map(|((&x, &y), &z)| f(x, y, z)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn conv_geom<T: Real>(op: &'static str, x: &Tensor<T>, w: &Tensor<T>, transposed: bool) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    let bad = || Error::shape(op, format!("input {:?}, weight {:?}", xs, ws));
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(bad());
    }
    let (c_out, c_in) = (ws[0], ws[1]);
    let channels = if transposed { c_out } else { c_in };
    if xs[1] != channels {
        return Err(bad());
    }
    Ok(ConvGeom { batch: xs[0], c_in, c_out, height: xs[2], width: xs[3], kernel: ws[2] })
}

/// Smallest argument accepted by `arccosh`.
const ACOSH_FLOOR: f64 = 1.0 + 1e-12;

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = Rc::new(x.map(&f));
        let (ix, y_saved) = (self.id, y.clone());
        self.graph.record((*y).clone(), &[ix], move |g, s| {
            let d = zip3_with(g, &x, &y_saved, |gi, xi, yi| gi * df(xi, yi));
            s.add(ix, d);
        })
    }

    // ---- elementwise binary ----

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.graph.record(zip_with(&a, &b, |x, y| x + y), &[ia, ib], move |g, s| {
            s.add(ia, g.clone());
            s.add(ib, g.clone());
        }))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.graph.record(zip_with(&a, &b, |x, y| x - y), &[ia, ib], move |g, s| {
            s.add(ia, g.clone());
            if s.wants(ib) {
                s.add(ib, g.map(|v| -v));
            }
        }))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        let out = zip_with(&a, &b, |x, y| x * y);
        Ok(self.graph.record(out, &[ia, ib], move |g, s| {
            if s.wants(ia) {
                s.add(ia, zip_with(g, &b, |gi, bi| gi * bi));
            }
            if s.wants(ib) {
                s.add(ib, zip_with(g, &a, |gi, ai| gi * ai));
            }
        }))
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        let out = zip_with(&a, &b, |x, y| x / y);
        Ok(self.graph.record(out, &[ia, ib], move |g, s| {
            if s.wants(ia) {
                s.add(ia, zip_with(g, &b, |gi, bi| gi / bi));
            }
            if s.wants(ib) {
                s.add(ib, zip3_with(g, &a, &b, |gi, ai, bi| -gi * ai / (bi * bi)));
            }
        }))
    }

    // ---- scalar-tensor ----

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    // ---- elementwise unary ----

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let a = T::of(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * a },
            move |x, _| if x > T::zero() { T::one() } else { a },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| T::one() / (T::of(2.0) * y))
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| T::of(2.0) * x)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    /// `ln(x + sqrt(x² − 1))`. Arguments below 1 evaluate as 1, and the
    /// derivative is zero up to `1 + 1e-12`, so the op never yields NaN.
    pub fn arccosh(self) -> Var<'g, T> {
        let floor = T::of(ACOSH_FLOOR);
        self.unary(
            |x| {
                let x = x.max(T::one());
                (x + (x * x - T::one()).sqrt()).ln()
            },
            move |x, _| if x <= floor { T::zero() } else { T::one() / (x * x - T::one()).sqrt() },
        )
    }

    // ---- reductions ----

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let ix = self.id;
        self.graph.record(Tensor::scalar(x.sum()), &[ix], move |g, s| {
            s.add(ix, Tensor::full(&shape, g.item()));
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums everything but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_rows(self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() < 1 {
            return Err(Error::shape("sum_rows", format!("{:?}", x.shape())));
        }
        let (b, n) = (x.batch(), x.row_len());
        let out = Tensor::from_fn(&[b], |i| x.row(i).iter().copied().sum());
        let shape = x.shape().to_vec();
        let ix = self.id;
        Ok(self.graph.record(out, &[ix], move |g, s| {
            let d = Tensor::from_fn(&shape, |j| g.data()[j / n]);
            s.add(ix, d);
        }))
    }

    pub fn l1_norm(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.data().iter().map(|v| v.abs()).sum();
        let ix = self.id;
        self.graph.record(Tensor::scalar(out), &[ix], move |g, s| {
            let gi = g.item();
            s.add(ix, x.map(|v| if v > T::zero() { gi } else if v < T::zero() { -gi } else { T::zero() }));
        })
    }

    pub fn l2_norm(self) -> Var<'g, T> {
        let x = self.value();
        let norm = x.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let ix = self.id;
        self.graph.record(Tensor::scalar(norm), &[ix], move |g, s| {
            let scale = if norm > T::zero() { g.item() / norm } else { T::zero() };
            s.add(ix, x.map(|v| v * scale));
        })
    }

    // ---- shape ----

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = (*x).clone().reshape(shape)?;
        let orig = x.shape().to_vec();
        let ix = self.id;
        Ok(self.graph.record(out, &[ix], move |g, s| {
            s.add(ix, g.clone().reshape(&orig).expect("same numel"));
        }))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out = Tensor::from_fn(&[c, r], |i| x.data()[(i % r) * c + i / r]);
        let ix = self.id;
        Ok(self.graph.record(out, &[ix], move |g, s| {
            s.add(ix, Tensor::from_fn(&[r, c], |i| g.data()[(i % c) * r + i / c]));
        }))
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat_batch(self, n: usize) -> Var<'g, T> {
        let x = self.value();
        let m = x.numel();
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let out = Tensor::from_fn(&shape, |i| x.data()[i % m]);
        let orig = x.shape().to_vec();
        let ix = self.id;
        self.graph.record(out, &[ix], move |g, s| {
            let mut d = Tensor::zeros(&orig);
            for chunk in g.data().chunks(m) {
                for (a, b) in d.data_mut().iter_mut().zip(chunk) {
                    *a += *b;
                }
            }
            s.add(ix, d);
        })
    }

    // ---- linear algebra ----

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
        let (ia, ib) = (self.id, other.id);
        Ok(self.graph.record(out, &[ia, ib], move |g, s| {
            if s.wants(ia) {
                let mut da = Tensor::zeros(&[m, k]);
                T::gemm(m, n, k, g.data(), false, b.data(), true, da.data_mut(), false);
                s.add(ia, da);
            }
            if s.wants(ib) {
                let mut db = Tensor::zeros(&[k, n]);
                T::gemm(k, m, n, a.data(), true, g.data(), false, db.data_mut(), false);
                s.add(ib, db);
            }
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` of `[B, C, ...]`.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, b) = (self.value(), bias.value());
        let xs = x.shape();
        if xs.len() < 2 || b.shape() != [xs[1]] {
            return Err(Error::shape("add_channel_bias", format!("{:?} + {:?}", xs, b.shape())));
        }
        let c = xs[1];
        let plane: usize = xs[2..].iter().product();
        let out = Tensor::from_fn(xs, |i| x.data()[i] + b.data()[(i / plane) % c]);
        let (ix, ib) = (self.id, bias.id);
        Ok(self.graph.record(out, &[ix, ib], move |g, s| {
            s.add(ix, g.clone());
            if s.wants(ib) {
                let mut db = Tensor::zeros(&[c]);
                for (i, v) in g.data().iter().enumerate() {
                    db.data_mut()[(i / plane) % c] += *v;
                }
                s.add(ib, db);
            }
        }))
    }

    /// Per-sample, per-channel affine map `x·scale + shift` with `scale` and
    /// `shift` shaped `[B, C]`.
    pub fn modulate(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, a, t) = (self.value(), scale.value(), shift.value());
        let xs = x.shape();
        if xs.len() < 2 || a.shape() != &xs[..2] || t.shape() != &xs[..2] {
            return Err(Error::shape(
                "modulate",
                format!("input {:?}, scale {:?}, shift {:?}", xs, a.shape(), t.shape()),
            ));
        }
        let plane: usize = xs[2..].iter().product();
        let out = Tensor::from_fn(xs, |i| x.data()[i] * a.data()[i / plane] + t.data()[i / plane]);
        let (ix, ia, it) = (self.id, scale.id, shift.id);
        Ok(self.graph.record(out, &[ix, ia, it], move |g, s| {
            if s.wants(ix) {
                s.add(ix, Tensor::from_fn(x.shape(), |i| g.data()[i] * a.data()[i / plane]));
            }
            if s.wants(ia) {
                let d = Tensor::from_fn(a.shape(), |p| {
                    let r = p * plane..(p + 1) * plane;
                    g.data()[r.clone()].iter().zip(&x.data()[r]).map(|(&gi, &xi)| gi * xi).sum()
                });
                s.add(ia, d);
            }
            if s.wants(it) {
                let d = Tensor::from_fn(a.shape(), |p| {
                    g.data()[p * plane..(p + 1) * plane].iter().copied().sum()
                });
                s.add(it, d);
            }
        }))
    }

    // ---- convolution and resampling ----

    /// Same-padded stride-1 convolution of `[B, Cin, H, W]` by `[Cout, Cin, k, k]`.
    pub fn conv2d(self, weight: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let geom = conv_geom("conv2d", &x, &w, false)?;
        let out = kernels::conv2d_forward(x.data(), w.data(), &geom);
        let out = Tensor::new(vec![geom.batch, geom.c_out, geom.height, geom.width], out)?;
        let (ix, iw) = (self.id, weight.id);
        Ok(self.graph.record(out, &[ix, iw], move |g, s| {
            if s.wants(ix) {
                let dx = kernels::conv2d_backward_input(g.data(), w.data(), &geom);
                s.add(ix, Tensor::new(x.shape().to_vec(), dx).expect("conv dx"));
            }
            if s.wants(iw) {
                let dw = kernels::conv2d_backward_weight(x.data(), g.data(), &geom);
                s.add(iw, Tensor::new(w.shape().to_vec(), dw).expect("conv dw"));
            }
        }))
    }

    /// Transposed convolution: maps `[B, Cout, H, W]` back to `[B, Cin, H, W]`
    /// through `weight` shaped `[Cout, Cin, k, k]`. This is the input
    /// gradient of [`Var::conv2d`] as a differentiable op.
    pub fn conv2d_transpose(self, weight: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let geom = conv_geom("conv2d_transpose", &x, &w, true)?;
        let out = kernels::conv2d_backward_input(x.data(), w.data(), &geom);
        let out = Tensor::new(vec![geom.batch, geom.c_in, geom.height, geom.width], out)?;
        let (ix, iw) = (self.id, weight.id);
        Ok(self.graph.record(out, &[ix, iw], move |g, s| {
            if s.wants(ix) {
                let dx = kernels::conv2d_forward(g.data(), w.data(), &geom);
                s.add(ix, Tensor::new(x.shape().to_vec(), dx).expect("convT dx"));
            }
            if s.wants(iw) {
                let dw = kernels::conv2d_backward_weight(g.data(), x.data(), &geom);
                s.add(iw, Tensor::new(w.shape().to_vec(), dw).expect("convT dw"));
            }
        }))
    }

    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{:?}", xs)));
        }
        let planes = xs[0] * xs[1];
        let (h, w) = (xs[2], xs[3]);
        let out = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], kernels::upsample2x(x.data(), planes, h, w))?;
        let ix = self.id;
        Ok(self.graph.record(out, &[ix], move |g, s| {
            let d = kernels::sum_pool2x(g.data(), planes, h, w);
            s.add(ix, Tensor::new(xs.clone(), d).expect("upsample grad"));
        }))
    }

    pub fn avg_pool2x(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2x", format!("{:?}", xs)));
        }
        let planes = xs[0] * xs[1];
        let (h, w) = (xs[2] / 2, xs[3] / 2);
        let quarter = T::of(0.25);
        let mut pooled = kernels::sum_pool2x(x.data(), planes, h, w);
        pooled.iter_mut().for_each(|v| *v *= quarter);
        let out = Tensor::new(vec![xs[0], xs[1], h, w], pooled)?;
        let ix = self.id;
        Ok(self.graph.record(out, &[ix], move |g, s| {
            let mut d = kernels::upsample2x(g.data(), planes, h, w);
            d.iter_mut().for_each(|v| *v *= quarter);
            s.add(ix, Tensor::new(xs.clone(), d).expect("pool grad"));
        }))
    }

    // ---- normalization ----

    /// Normalizes each `(sample, channel)` plane of `[B, C, ...]` to zero mean
    /// and unit variance.
    pub fn instance_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() < 3 {
            return Err(Error::shape("instance_norm", format!("{:?}", xs)));
        }
        let plane: usize = xs[2..].iter().product();
        let n = T::of(plane as f64);
        let eps = T::of(eps);
        let mut y = Tensor::zeros(xs);
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        for (src, dst) in x.data().chunks(plane).zip(y.data_mut().chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let y_saved = Rc::new(y.clone());
        let ix = self.id;
        Ok(self.graph.record(y, &[ix], move |g, s| {
            let mut d = Tensor::zeros(y_saved.shape());
            for (p, ((gs, ys), ds)) in g
                .data()
                .chunks(plane)
                .zip(y_saved.data().chunks(plane))
                .zip(d.data_mut().chunks_mut(plane))
                .enumerate()
            {
                let gm = gs.iter().copied().sum::<T>() / n;
                let gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
                for ((dv, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                    *dv = inv_std[p] * (gv - gm - yv * gy);
                }
            }
            s.add(ix, d);
        }))
    }

    fn check_rows(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(op, format!("expected [B, K], got {:?}", shape)));
        }
        Ok((shape[0], shape[1]))
    }

    /// Row-wise softmax of `[B, K]`.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let (b, k) = self.check_rows("softmax")?;
        let x = self.value();
        let mut y = Tensor::zeros(&[b, k]);
        for (src, dst) in x.data().chunks(k).zip(y.data_mut().chunks_mut(k)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let y_saved = Rc::new(y.clone());
        let ix = self.id;
        Ok(self.graph.record(y, &[ix], move |g, s| {
            let mut d = Tensor::zeros(&[b, k]);
            for ((gs, ys), ds) in g.data().chunks(k).zip(y_saved.data().chunks(k)).zip(d.data_mut().chunks_mut(k)) {
                let dot = gs.iter().zip(ys).map(|(&a, &c)| a * c).sum::<T>();
                for ((dv, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                    *dv = yv * (gv - dot);
                }
            }
            s.add(ix, d);
        }))
    }

    /// Row-wise log-softmax of `[B, K]`.
    pub fn log_softmax(self) -> Result<Var<'g, T>> {
        let (b, k) = self.check_rows("log_softmax")?;
        let x = self.value();
        let mut y = Tensor::zeros(&[b, k]);
        for (src, dst) in x.data().chunks(k).zip(y.data_mut().chunks_mut(k)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + src.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v - lse;
            }
        }
        let y_saved = Rc::new(y.clone());
        let ix = self.id;
        Ok(self.graph.record(y, &[ix], move |g, s| {
            let mut d = Tensor::zeros(&[b, k]);
            for ((gs, ys), ds) in g.data().chunks(k).zip(y_saved.data().chunks(k)).zip(d.data_mut().chunks_mut(k)) {
                let total = gs.iter().copied().sum::<T>();
                for ((dv, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                    *dv = gv - yv.exp() * total;
                }
            }
            s.add(ix, d);
        }))
    }

    /// Rescales each row of `[B, K]` whose l2 norm exceeds `max` onto the
    /// sphere of radius `max`.
    pub fn clamp_row_norm(self, max: f64) -> Result<Var<'g, T>> {
        let (b, k) = self.check_rows("clamp_row_norm")?;
        let x = self.value();
        let max = T::of(max);
        let norms: Vec<T> = x.data().chunks(k).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let out = Tensor::from_fn(&[b, k], |i| {
            let nr = norms[i / k];
            if nr > max {
                x.data()[i] * max / nr
            } else {
                x.data()[i]
            }
        });
        let ix = self.id;
        Ok(self.graph.record(out, &[ix], move |g, s| {
            let mut d = g.clone();
            for ((ds, xs), &nr) in d.data_mut().chunks_mut(k).zip(x.data().chunks(k)).zip(&norms) {
                if nr <= max {
                    continue;
                }
                let dot = ds.iter().zip(xs).map(|(&a, &c)| a * c).sum::<T>() / nr;
                for (dv, &xv) in ds.iter_mut().zip(xs) {
                    *dv = max / nr * (*dv - xv / nr * dot);
                }
            }
            s.add(ix, d);
        }))
    }
}
