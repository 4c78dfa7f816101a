//! A define-by-run reverse-mode autodiff tape.
//!
//! Every forward pass records its nodes into a fresh [`Graph`]. Parameters
//! enter the tape either as trainable leaves tagged with the network they
//! belong to, or as frozen constants. [`Graph::backward`] returns gradients
//! keyed by `(tag, index)` so each optimizer only ever sees its own network.

use std::collections::BTreeMap;

use crate::kernels::{self, ConvGeom};
use crate::params::ParamSet;
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Identifies one network's parameter set on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u32);

/// How a network's parameters enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Train(Tag),
    Frozen,
}

enum Op {
    Input,
    Param { tag: Tag, index: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    MaxPool { x: Var, arg: Vec<usize> },
    Resize { x: Var },
    Concat { parts: Vec<Var> },
    ChannelBroadcastMul { x: Var, alpha: Var },
    AdaIn { x: Var, scale: Var, shift: Var, xhat: Tensor, inv_std: Vec<f64> },
    Noise { x: Var, scale: Var, noise: Tensor },
    Loss { terms: Vec<(Var, Tensor)> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients collected by [`Graph::backward`].
#[derive(Default)]
pub struct Gradients {
    params: BTreeMap<(Tag, usize), Tensor>,
}

impl Gradients {
    /// Gradients for every parameter of `set`, zero where the parameter was unused.
    pub fn for_set(&self, tag: Tag, set: &ParamSet) -> Vec<Tensor> {
        set.tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.params
                    .get(&(tag, i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    pub fn get(&self, tag: Tag, index: usize) -> Option<&Tensor> {
        self.params.get(&(tag, index))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, binding: Binding, set: &ParamSet, index: usize) -> Var {
        let value = set.tensors()[index].clone();
        match binding {
            Binding::Train(tag) => self.push(value, Op::Param { tag, index }, true),
            Binding::Frozen => self.input(value),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        assert_eq!(wv.shape()[1], fin, "linear input width mismatch");
        let mut out = vec![0.0; n * fout];
        for r in 0..n {
            let xr = &xv.data()[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wv.data()[o * fin..(o + 1) * fin];
                let mut acc = b.map_or(0.0, |b| self.value(b).data()[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[r * fout + o] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[n, fout], out).unwrap();
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q).expect("add shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q).expect("mul shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (value, arg) = kernels::maxpool2(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::MaxPool { x, arg }, rg)
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = kernels::resize_bilinear(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(value, Op::Resize { x }, rg)
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total_c: usize = parts.iter().map(|p| self.value(*p).dims4().1).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for p in parts {
                let v = self.value(*p);
                let (pn, c, ph, pw) = v.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial mismatch");
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let value = Tensor::from_vec(&[n, total_c, h, w], out).unwrap();
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// `x[n, c, i] · alpha[n, 0, i]`: a single-channel map scaling every channel.
    pub fn channel_broadcast_mul(&mut self, x: Var, alpha: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let av = self.value(alpha);
        assert_eq!(av.shape(), &[n, 1, h, w], "attention map shape");
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            let a = &av.data()[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                out.extend(xv[off..off + plane].iter().zip(a).map(|(p, q)| p * q));
            }
        }
        let rg = self.rg(x) || self.rg(alpha);
        let value = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.push(value, Op::ChannelBroadcastMul { x, alpha }, rg)
    }

    /// Adaptive instance normalization with per-sample `scale`/`shift` of shape `[N, C]`.
    pub fn adain(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(scale).shape(), &[n, c], "adain scale shape");
        assert_eq!(self.value(shift).shape(), &[n, c], "adain shift shape");
        let (value, xhat, inv_std) = crate::style::adain_forward(
            self.value(x),
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
        );
        let _ = (h, w);
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            value,
            Op::AdaIn {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// `x + scale[c] · noise[n, 0, i]` with a fixed noise sample.
    pub fn add_noise(&mut self, x: Var, scale: Var, noise: Tensor) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(noise.shape(), &[n, 1, h, w], "noise shape");
        assert_eq!(self.value(scale).shape(), &[c], "noise scale shape");
        let plane = h * w;
        let s = self.value(scale).data().to_vec();
        let mut value = self.value(x).clone();
        for b in 0..n {
            let nz = &noise.data()[b * plane..(b + 1) * plane];
            for (ch, sc) in s.iter().enumerate() {
                let off = (b * c + ch) * plane;
                for (v, e) in value.data_mut()[off..off + plane].iter_mut().zip(nz) {
                    *v += sc * e;
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale);
        self.push(value, Op::Noise { x, scale, noise }, rg)
    }

    /// Records a scalar loss whose value and input gradients were computed
    /// outside the tape (see [`crate::losses`]).
    pub fn loss(&mut self, value: f64, terms: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &terms {
            assert_eq!(self.value(*v).shape(), g.shape(), "loss gradient shape");
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::Loss { terms }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|(v, k)| k * self.scalar(*v)).sum();
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, t: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param { tag, index } => match out.params.get_mut(&(*tag, *index)) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert((*tag, *index), g);
                    }
                },
                Op::Conv { x, w, b, geom } => {
                    let need = (
                        self.rg(*x),
                        self.rg(*w),
                        b.is_some_and(|b| self.rg(b)),
                    );
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *geom, need);
                    if let Some(t) = cg.input {
                        send(*x, t);
                    }
                    if let Some(t) = cg.weight {
                        send(*w, t);
                    }
                    if let (Some(b), Some(t)) = (b, cg.bias) {
                        send(*b, t);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    let gd = g.data();
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * fin];
                        for r in 0..n {
                            for o in 0..fout {
                                let go = gd[r * fout + o];
                                for i in 0..fin {
                                    dx[r * fin + i] += go * wv.data()[o * fin + i];
                                }
                            }
                        }
                        send(*x, Tensor::from_vec(&[n, fin], dx).unwrap());
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; fout * fin];
                        for r in 0..n {
                            for o in 0..fout {
                                let go = gd[r * fout + o];
                                for i in 0..fin {
                                    dw[o * fin + i] += go * xv.data()[r * fin + i];
                                }
                            }
                        }
                        send(*w, Tensor::from_vec(&[fout, fin], dw).unwrap());
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = vec![0.0; fout];
                            for r in 0..n {
                                for o in 0..fout {
                                    db[o] += gd[r * fout + o];
                                }
                            }
                            send(*b, Tensor::from_vec(&[fout], db).unwrap());
                        }
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.zip_map(self.value(*b), |p, q| p * q).unwrap());
                    }
                    if self.rg(*b) {
                        send(*b, g.zip_map(self.value(*a), |p, q| p * q).unwrap());
                    }
                }
                Op::Scale(a, k) => send(*a, g.map(|v| v * k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |p, x| if x > 0.0 { p } else { 0.0 });
                    send(*a, d.unwrap());
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(self.value(*a), |p, x| if x > 0.0 { p } else { slope * p });
                    send(*a, d.unwrap());
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |p, s| p * s * (1.0 - s));
                    send(*a, d.unwrap());
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (gv, &i) in g.data().iter().zip(arg) {
                        dx.data_mut()[i] += gv;
                    }
                    send(*x, dx);
                }
                Op::Resize { x } => {
                    let (_, _, h, w) = self.value(*x).dims4();
                    send(*x, kernels::resize_bilinear_backward(&g, h, w));
                }
                Op::Concat { parts } => {
                    let (n, total_c, h, w) = g.dims4();
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).dims4().1;
                        if self.rg(*p) {
                            let mut d = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let start = (b * total_c + offset) * plane;
                                d.extend_from_slice(&g.data()[start..start + c * plane]);
                            }
                            send(*p, Tensor::from_vec(&[n, c, h, w], d).unwrap());
                        }
                        offset += c;
                    }
                }
                Op::ChannelBroadcastMul { x, alpha } => {
                    let (n, c, h, w) = g.dims4();
                    let plane = h * w;
                    let (xv, av) = (self.value(*x), self.value(*alpha));
                    if self.rg(*x) {
                        let mut dx = Vec::with_capacity(g.len());
                        for b in 0..n {
                            let a = &av.data()[b * plane..(b + 1) * plane];
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                dx.extend(g.data()[off..off + plane].iter().zip(a).map(|(p, q)| p * q));
                            }
                        }
                        send(*x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
                    }
                    if self.rg(*alpha) {
                        let mut da = vec![0.0; n * plane];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                for i in 0..plane {
                                    da[b * plane + i] += g.data()[off + i] * xv.data()[off + i];
                                }
                            }
                        }
                        send(*alpha, Tensor::from_vec(&[n, 1, h, w], da).unwrap());
                    }
                }
                Op::AdaIn {
                    x,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dscale, dshift) =
                        crate::style::adain_backward(&g, xhat, inv_std, self.value(*scale).data());
                    if self.rg(*x) {
                        send(*x, dx);
                    }
                    if self.rg(*scale) {
                        send(*scale, dscale);
                    }
                    if self.rg(*shift) {
                        send(*shift, dshift);
                    }
                }
                Op::Noise { x, scale, noise } => {
                    if self.rg(*scale) {
                        let (n, c, h, w) = g.dims4();
                        let plane = h * w;
                        let mut ds = vec![0.0; c];
                        for b in 0..n {
                            let nz = &noise.data()[b * plane..(b + 1) * plane];
                            for (ch, d) in ds.iter_mut().enumerate() {
                                let off = (b * c + ch) * plane;
                                *d += g.data()[off..off + plane]
                                    .iter()
                                    .zip(nz)
                                    .map(|(p, q)| p * q)
                                    .sum::<f64>();
                            }
                        }
                        send(*scale, Tensor::from_vec(&[c], ds).unwrap());
                    }
                    send(*x, g);
                }
                Op::Loss { terms } => {
                    let up = g.data()[0];
                    for (v, t) in terms {
                        send(*v, t.map(|d| d * up));
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = g.data()[0];
                    for (v, k) in terms {
                        send(*v, Tensor::scalar(up * k));
                    }
                }
            }
        }
        out
    }
}
