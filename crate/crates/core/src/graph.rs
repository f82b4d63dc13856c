//! Tape-based reverse-mode differentiation over the kernels in [`crate::kernels`].
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes hold their value
//! and, when any input needs a gradient, a closure mapping the output
//! gradient to contributions for each input. Inference runs through the same
//! code with gradients disabled, so no closures are recorded.

use std::collections::BTreeMap;

use crate::error::{DcaeError, Result};
use crate::kernels::{self, normal_cdf, normal_pdf, sigmoid};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Likelihoods are floored here before taking `-log2` in the rate terms.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(usize, Tensor<T>)>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<Backward<T>>,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: BTreeMap<String, Var>,
    recorded: BTreeMap<String, Var>,
    grad_enabled: bool,
}

/// Result of a backward pass.
pub struct Backprop<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    pub params: Gradients<T>,
}

impl<T: Scalar> Backprop<T> {
    /// Gradient for a node, zeros when the node did not reach the loss.
    pub fn grad(&self, g: &Graph<'_, T>, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn boxed<T: Scalar>(f: impl Fn(&Tensor<T>) -> Vec<(usize, Tensor<T>)> + 'static) -> Backward<T> {
    Box::new(f)
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph that records backward closures.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            recorded: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph for pure evaluation.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Remember an intermediate under a name (attention maps, debugging).
    pub fn record(&mut self, name: impl Into<String>, v: Var) {
        self.recorded.insert(name.into(), v);
    }

    pub fn recorded(&self, name: &str) -> Option<&Tensor<T>> {
        self.recorded.get(name).map(|&v| self.value(v))
    }

    pub fn recorded_names(&self) -> impl Iterator<Item = &str> {
        self.recorded.keys().map(String::as_str)
    }

    /// Names of every parameter the forward pass touched.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, backward: Option<Backward<T>>) -> Var {
        let requires_grad = backward.is_some();
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// An input whose gradient is wanted.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.value(name)?.clone();
        let v = self.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn backward(&self, loss: Var) -> Result<Backprop<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                for (parent, contrib) in bw(&g) {
                    if !self.nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => acc.add_assign(&contrib)?,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let mut params = Gradients::default();
        for (name, &v) in &self.bound {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            params.params.insert(name.clone(), g);
        }
        Ok(Backprop { grads, params })
    }

    // ---- convolution and linear maps -------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let bw = self.needs(&deps).then(|| {
            let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
            boxed(move |g| {
                let (gx, gw, gb) = kernels::conv2d_backward(&xv, &wv, g, stride, padding);
                let mut v = vec![(x.0, gx), (w.0, gw)];
                if let Some(b) = b {
                    v.push((b.0, gb));
                }
                v
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_transpose(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let bw = self.needs(&deps).then(|| {
            let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
            boxed(move |g| {
                let (gx, gw, gb) =
                    kernels::conv2d_transpose_backward(&xv, &wv, g, stride, padding);
                let mut v = vec![(x.0, gx), (w.0, gw)];
                if let Some(b) = b {
                    v.push((b.0, gb));
                }
                v
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::dwconv3x3(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let bw = self.needs(&deps).then(|| {
            let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
            boxed(move |g| {
                let (gx, gw, gb) = kernels::dwconv3x3_backward(&xv, &wv, g);
                let mut v = vec![(x.0, gx), (w.0, gw)];
                if let Some(b) = b {
                    v.push((b.0, gb));
                }
                v
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let bw = self.needs(&deps).then(|| {
            let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
            boxed(move |g| {
                let (gx, gw, gb) = kernels::linear_backward(&xv, &wv, g);
                let mut v = vec![(x.0, gx), (w.0, gw)];
                if let Some(b) = b {
                    v.push((b.0, gb));
                }
                v
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let bw = self.needs(&[a, b]).then(|| {
            let (av, bv) = (self.value(a).clone(), self.value(b).clone());
            boxed(move |g| {
                let (ga, gb) = kernels::matmul_nt_backward(&av, &bv, g);
                vec![(a.0, ga), (b.0, gb)]
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let bw = self.needs(&[a, b]).then(|| {
            let (av, bv) = (self.value(a).clone(), self.value(b).clone());
            boxed(move |g| {
                let (ga, gb) = kernels::matmul_backward(&av, &bv, g);
                vec![(a.0, ga), (b.0, gb)]
            })
        });
        Ok(self.push(out, bw))
    }

    /// Softmax over the channel axis (the last axis of a row matrix).
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax_channels(self.value(x));
        let bw = self.needs(&[x]).then(|| {
            let y = out.clone();
            boxed(move |g| vec![(x.0, kernels::softmax_channels_backward(&y, g))])
        });
        self.push(out, bw)
    }

    // ---- layout ----------------------------------------------------------

    /// `(B, C, H, W)` to `(B*H*W, C, 1, 1)`, rows ordered by `(b, h, w)`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [nb, c, h, w] = xv.shape();
        let plane = h * w;
        let mut out = Tensor::zeros([nb * plane, c, 1, 1]);
        for b in 0..nb {
            for ch in 0..c {
                for p in 0..plane {
                    out.data_mut()[(b * plane + p) * c + ch] = xv.data()[(b * c + ch) * plane + p];
                }
            }
        }
        let bw = self.needs(&[x]).then(|| {
            boxed(move |g: &Tensor<T>| {
                vec![(x.0, rows_to_spatial(g, nb, h, w))]
            })
        });
        self.push(out, bw)
    }

    /// Inverse of [`Graph::to_rows`].
    pub fn from_rows(&mut self, x: Var, nb: usize, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape()[0] != nb * h * w || xv.height() != 1 || xv.width() != 1 {
            return Err(DcaeError::dim(format!(
                "cannot view rows {:?} as batch {nb} of {h}x{w}",
                xv.shape()
            )));
        }
        let out = rows_to_spatial(xv, nb, h, w);
        let bw = self.needs(&[x]).then(|| {
            boxed(move |g: &Tensor<T>| {
                let [nb, c, h, w] = g.shape();
                let plane = h * w;
                let mut r = Tensor::zeros([nb * plane, c, 1, 1]);
                for b in 0..nb {
                    for ch in 0..c {
                        for p in 0..plane {
                            r.data_mut()[(b * plane + p) * c + ch] =
                                g.data()[(b * c + ch) * plane + p];
                        }
                    }
                }
                vec![(x.0, r)]
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let [nb, c, h, w] = xv.shape();
        if start + len > c {
            return Err(DcaeError::dim(format!(
                "channel slice {start}..{} out of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([nb, len, h, w]);
        for b in 0..nb {
            let src = &xv.data()[(b * c + start) * plane..(b * c + start + len) * plane];
            out.data_mut()[b * len * plane..(b + 1) * len * plane].copy_from_slice(src);
        }
        let bw = self.needs(&[x]).then(|| {
            boxed(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros([nb, c, h, w]);
                for b in 0..nb {
                    gx.data_mut()[(b * c + start) * plane..(b * c + start + len) * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![(x.0, gx)]
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DcaeError::dim("concat of zero tensors"));
        };
        let [nb, _, h, w] = self.value(first).shape();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != nb || s[2] != h || s[3] != w {
                return Err(DcaeError::dim(format!(
                    "concat: {:?} not aligned with {:?}",
                    s,
                    self.value(first).shape()
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros([nb, total, h, w]);
        for b in 0..nb {
            let mut off = 0;
            for (&p, &c) in parts.iter().zip(&widths) {
                let src = &self.value(p).data()[b * c * plane..(b + 1) * c * plane];
                out.data_mut()[(b * total + off) * plane..(b * total + off + c) * plane]
                    .copy_from_slice(src);
                off += c;
            }
        }
        let bw = self.needs(parts).then(|| {
            let parts = parts.to_vec();
            boxed(move |g: &Tensor<T>| {
                let mut v = Vec::with_capacity(parts.len());
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(&widths) {
                    let mut gp = Tensor::zeros([nb, c, h, w]);
                    for b in 0..nb {
                        gp.data_mut()[b * c * plane..(b + 1) * c * plane].copy_from_slice(
                            &g.data()[(b * total + off) * plane..(b * total + off + c) * plane],
                        );
                    }
                    v.push((p.0, gp));
                    off += c;
                }
                v
            })
        });
        Ok(self.push(out, bw))
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape();
        let out = kernels::channel_mean(self.value(x));
        let bw = self
            .needs(&[x])
            .then(|| boxed(move |g| vec![(x.0, kernels::channel_mean_backward(shape, g))]));
        self.push(out, bw)
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape();
        let (out, arg) = kernels::channel_max(self.value(x));
        let bw = self.needs(&[x]).then(|| {
            boxed(move |g| vec![(x.0, kernels::channel_max_backward(shape, &arg, g))])
        });
        self.push(out, bw)
    }

    // ---- elementwise -----------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var {
        let out = self.value(x).map(f);
        let bw = self.needs(&[x]).then(|| {
            let xv = self.value(x).clone();
            boxed(move |g: &Tensor<T>| {
                let gx = Tensor::from_fn(g.shape(), |i| g.data()[i] * df(xv.data()[i]));
                vec![(x.0, gx)]
            })
        });
        self.push(out, bw)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, kernels::gelu_grad)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (T::one() - s)
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.tanh(),
            |v| {
                let t = v.tanh();
                T::one() - t * t
            },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, sigmoid)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let f = T::from_f64(floor);
        self.unary(
            x,
            move |v| if v > f { v } else { f },
            move |v| if v > f { T::one() } else { T::zero() },
        )
    }

    /// `min(max(x, lo), hi)`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            x,
            move |v| if v < l { l } else if v > h { h } else { v },
            move |v| if v > l && v < h { T::one() } else { T::zero() },
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v * c, move |_| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v + c, |_| T::one())
    }

    /// Rounding whose backward pass is the identity.
    pub fn ste_round(&mut self, x: Var) -> Var {
        self.unary(x, kernels::round_half_away, |_| T::one())
    }

    /// Rounding with zero gradient (true quantisation).
    pub fn round(&mut self, x: Var) -> Var {
        self.unary(x, kernels::round_half_away, |_| T::zero())
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(c, |a, b| a + b)?;
        let bw = self
            .needs(&[x])
            .then(|| boxed(move |g: &Tensor<T>| vec![(x.0, g.clone())]));
        Ok(self.push(out, bw))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let bw = self
            .needs(&[a, b])
            .then(|| boxed(move |g: &Tensor<T>| vec![(a.0, g.clone()), (b.0, g.clone())]));
        Ok(self.push(out, bw))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let bw = self.needs(&[a, b]).then(|| {
            boxed(move |g: &Tensor<T>| vec![(a.0, g.clone()), (b.0, g.map(|v| -v))])
        });
        Ok(self.push(out, bw))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let bw = self.needs(&[a, b]).then(|| {
            let (av, bv) = (self.value(a).clone(), self.value(b).clone());
            boxed(move |g: &Tensor<T>| {
                vec![
                    (a.0, g.zip_map(&bv, |g, y| g * y).expect("same shape")),
                    (b.0, g.zip_map(&av, |g, x| g * x).expect("same shape")),
                ]
            })
        });
        Ok(self.push(out, bw))
    }

    /// `x ⊙ m` where `m` is a `(B, 1, H, W)` map broadcast over channels.
    pub fn mul_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.value(x).shape(), self.value(m).shape());
        let [nb, c, h, w] = xs;
        if ms != [nb, 1, h, w] {
            return Err(DcaeError::dim(format!(
                "spatial map {:?} does not broadcast over {:?}",
                ms, xs
            )));
        }
        let plane = h * w;
        let out = {
            let (xv, mv) = (self.value(x), self.value(m));
            Tensor::from_fn(xs, |i| {
                let b = i / (c * plane);
                xv.data()[i] * mv.data()[b * plane + i % plane]
            })
        };
        let bw = self.needs(&[x, m]).then(|| {
            let (xv, mv) = (self.value(x).clone(), self.value(m).clone());
            boxed(move |g: &Tensor<T>| {
                let gx = Tensor::from_fn(xs, |i| {
                    let b = i / (c * plane);
                    g.data()[i] * mv.data()[b * plane + i % plane]
                });
                let mut gm = Tensor::zeros(ms);
                for b in 0..nb {
                    for ch in 0..c {
                        for p in 0..plane {
                            let i = (b * c + ch) * plane + p;
                            gm.data_mut()[b * plane + p] += g.data()[i] * xv.data()[i];
                        }
                    }
                }
                vec![(x.0, gx), (m.0, gm)]
            })
        });
        Ok(self.push(out, bw))
    }

    /// `x / s` for a single-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(DcaeError::dim(format!(
                "divisor must be a scalar, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v / sv);
        let bw = self.needs(&[x, s]).then(|| {
            let xv = self.value(x).clone();
            let sshape = self.value(s).shape();
            boxed(move |g: &Tensor<T>| {
                let gx = g.map(|v| v / sv);
                let mut acc = T::zero();
                for (&gv, &xv) in g.data().iter().zip(xv.data()) {
                    acc += gv * xv;
                }
                let gs = Tensor::full(sshape, -acc / (sv * sv));
                vec![(x.0, gx), (s.0, gs)]
            })
        });
        Ok(self.push(out, bw))
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape();
        let out = Tensor::scalar(self.value(x).sum());
        let bw = self
            .needs(&[x])
            .then(|| boxed(move |g: &Tensor<T>| vec![(x.0, Tensor::full(shape, g.data()[0]))]));
        self.push(out, bw)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_shape(bv.shape(), "mse")?;
        let n = T::from_f64(av.numel() as f64);
        let mut acc = T::zero();
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            acc += (x - y) * (x - y);
        }
        let out = Tensor::scalar(acc / n);
        let bw = self.needs(&[a, b]).then(|| {
            let diff = av.zip_map(bv, |x, y| x - y).expect("same shape");
            boxed(move |g: &Tensor<T>| {
                let k = T::from_f64(2.0) * g.data()[0] / n;
                let ga = diff.map(|d| d * k);
                let gb = ga.map(|v| -v);
                vec![(a.0, ga), (b.0, gb)]
            })
        });
        Ok(self.push(out, bw))
    }

    /// Total bits `Σ -log2 P(v)` where `P` is a zero-mean Gaussian with scale
    /// `sigma` convolved with `U(-1/2, 1/2)`, evaluated at residuals `v = y - μ`.
    pub fn gaussian_bits(&mut self, v: Var, sigma: Var) -> Result<Var> {
        let (vv, sv) = (self.value(v), self.value(sigma));
        vv.expect_shape(sv.shape(), "gaussian_bits")?;
        let n = vv.numel();
        let mut total = 0.0;
        let mut dv = vec![T::zero(); n];
        let mut ds = vec![T::zero(); n];
        for i in 0..n {
            let x = vv.data()[i].as_f64();
            let s = sv.data()[i].as_f64();
            let (p, dp_dabs, dp_ds) = gaussian_bin(x.abs(), s);
            if p > LIKELIHOOD_FLOOR {
                total -= p.log2();
                let k = -1.0 / (p * std::f64::consts::LN_2);
                dv[i] = T::from_f64(k * dp_dabs * x.signum() * f64::from(x != 0.0));
                ds[i] = T::from_f64(k * dp_ds);
            } else {
                total -= LIKELIHOOD_FLOOR.log2();
            }
        }
        let shape = vv.shape();
        let out = Tensor::scalar(T::from_f64(total));
        let bw = self.needs(&[v, sigma]).then(|| {
            boxed(move |g: &Tensor<T>| {
                let g0 = g.data()[0];
                let gv = Tensor::from_vec(shape, dv.iter().map(|&d| d * g0).collect())
                    .expect("shape");
                let gs = Tensor::from_vec(shape, ds.iter().map(|&d| d * g0).collect())
                    .expect("shape");
                vec![(v.0, gv), (sigma.0, gs)]
            })
        });
        Ok(self.push(out, bw))
    }

    /// Total bits of `z` under a per-channel logistic with location `loc` and
    /// scale `exp(log_scale)`, convolved with `U(-1/2, 1/2)`. `loc` and
    /// `log_scale` are `(C, 1, 1, 1)`.
    pub fn logistic_bits(&mut self, z: Var, loc: Var, log_scale: Var) -> Result<Var> {
        let (zv, lv, sv) = (self.value(z), self.value(loc), self.value(log_scale));
        let [nb, c, h, w] = zv.shape();
        if lv.numel() != c || sv.numel() != c {
            return Err(DcaeError::dim(format!(
                "prior parameters {:?}/{:?} do not match {} channels",
                lv.shape(),
                sv.shape(),
                c
            )));
        }
        let plane = h * w;
        let mut total = 0.0;
        let mut dz = vec![T::zero(); zv.numel()];
        let mut dl = vec![0.0f64; c];
        let mut dls = vec![0.0f64; c];
        for b in 0..nb {
            for ch in 0..c {
                let l = lv.data()[ch].as_f64();
                let s = sv.data()[ch].as_f64().exp();
                for p in 0..plane {
                    let i = (b * c + ch) * plane + p;
                    let d = zv.data()[i].as_f64() - l;
                    let (prob, dp_dabs, dp_ds) = logistic_bin(d.abs(), s);
                    if prob > LIKELIHOOD_FLOOR {
                        total -= prob.log2();
                        let k = -1.0 / (prob * std::f64::consts::LN_2);
                        let gd = k * dp_dabs * d.signum() * f64::from(d != 0.0);
                        dz[i] = T::from_f64(gd);
                        dl[ch] -= gd;
                        dls[ch] += k * dp_ds * s;
                    } else {
                        total -= LIKELIHOOD_FLOOR.log2();
                    }
                }
            }
        }
        let (zs, ls, sss) = (zv.shape(), lv.shape(), sv.shape());
        let out = Tensor::scalar(T::from_f64(total));
        let bw = self.needs(&[z, loc, log_scale]).then(|| {
            boxed(move |g: &Tensor<T>| {
                let g0 = g.data()[0];
                let gz = Tensor::from_vec(zs, dz.iter().map(|&d| d * g0).collect()).expect("shape");
                let gl = Tensor::from_vec(ls, dl.iter().map(|&d| T::from_f64(d) * g0).collect())
                    .expect("shape");
                let gs = Tensor::from_vec(sss, dls.iter().map(|&d| T::from_f64(d) * g0).collect())
                    .expect("shape");
                vec![(z.0, gz), (loc.0, gl), (log_scale.0, gs)]
            })
        });
        Ok(self.push(out, bw))
    }
}

fn rows_to_spatial<T: Scalar>(r: &Tensor<T>, nb: usize, h: usize, w: usize) -> Tensor<T> {
    let c = r.channels();
    let plane = h * w;
    let mut out = Tensor::zeros([nb, c, h, w]);
    for b in 0..nb {
        for ch in 0..c {
            for p in 0..plane {
                out.data_mut()[(b * c + ch) * plane + p] = r.data()[(b * plane + p) * c + ch];
            }
        }
    }
    out
}

/// Probability of the unit bin at distance `a = |v| >= 0` under `N(0, s^2)`,
/// with derivatives with respect to `a` and `s`.
pub fn gaussian_bin(a: f64, s: f64) -> (f64, f64, f64) {
    let upper = (0.5 - a) / s;
    let lower = (-0.5 - a) / s;
    let p = normal_cdf(upper) - normal_cdf(lower);
    let (fu, fl) = (normal_pdf(upper), normal_pdf(lower));
    let dp_da = (-fu + fl) / s;
    let dp_ds = (-upper * fu + lower * fl) / s;
    (p, dp_da, dp_ds)
}

/// Logistic analogue of [`gaussian_bin`].
pub fn logistic_bin(a: f64, s: f64) -> (f64, f64, f64) {
    let upper = (0.5 - a) / s;
    let lower = (-0.5 - a) / s;
    let (su, sl) = (sigmoid(upper), sigmoid(lower));
    let p = su - sl;
    let (du, dl) = (su * (1.0 - su), sl * (1.0 - sl));
    let dp_da = (-du + dl) / s;
    let dp_ds = (-upper * du + lower * dl) / s;
    (p, dp_da, dp_ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_roundtrip() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let t = Tensor::from_fn([2, 3, 2, 2], |i| i as f64);
        let x = g.input(t.clone());
        let r = g.to_rows(x);
        assert_eq!(g.value(r).shape(), [8, 3, 1, 1]);
        assert_eq!(g.value(r).at(1, 2, 0, 0), t.at(0, 2, 0, 1));
        let back = g.from_rows(r, 2, 2, 2).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn unconnected_input_gets_zero_grad() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(Tensor::full([1, 2, 1, 1], 3.0));
        let c = g.input(Tensor::full([1, 2, 1, 1], 1.0));
        let loss = g.sum(c);
        let bp = g.backward(loss).unwrap();
        assert!(!bp.reached(x));
        assert_eq!(bp.grad(&g, x).max_abs(), 0.0);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::inference(&store);
        let x = g.input_with_grad(Tensor::full([1, 1, 2, 2], 1.0));
        let y = g.gelu(x);
        assert!(g.nodes[y.0].backward.is_none());
    }

    #[test]
    fn bin_probabilities_are_symmetric_and_sum_to_one() {
        let total: f64 = (-40..=40).map(|k| gaussian_bin((k as f64).abs(), 2.0).0).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let total: f64 = (-400..=400).map(|k| logistic_bin((k as f64).abs(), 2.0).0).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
