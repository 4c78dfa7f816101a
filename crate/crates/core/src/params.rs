//! Named parameter storage, layer handles and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Binding, Graph, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

/// An ordered list of named parameter tensors belonging to one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive digest over every parameter's exact bits.
    pub fn checksum(&self) -> u64 {
        self.tensors
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }
}

/// Fan-in scaled uniform initialization bound.
fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub geom: ConvGeomDef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeomDef {
    pub stride: usize,
    pub pad: usize,
}

impl From<ConvGeomDef> for ConvGeom {
    fn from(g: ConvGeomDef) -> Self {
        ConvGeom {
            stride: g.stride,
            pad: g.pad,
        }
    }
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(cin * k * k);
        let weight = set.push(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, k, k], bound, rng),
        );
        let bias = bias.then(|| set.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv {
            weight,
            bias,
            geom: ConvGeomDef { stride, pad },
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(set, name, cin, cout, 3, 1, 1, true, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(set, name, cin, cout, 1, 1, 0, bias, rng)
    }

    pub fn forward(&self, g: &mut Graph, bind: Binding, set: &ParamSet, x: Var) -> Var {
        let w = g.param(bind, set, self.weight);
        let b = self.bias.map(|b| g.param(bind, set, b));
        g.conv2d(x, w, b, self.geom.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        fin: usize,
        fout: usize,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        let weight = set.push(
            format!("{name}.weight"),
            Tensor::uniform(&[fout, fin], fan_in_bound(fin), rng),
        );
        let bias = set.push(format!("{name}.bias"), Tensor::full(&[fout], bias_init));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, bind: Binding, set: &ParamSet, x: Var) -> Var {
        let w = g.param(bind, set, self.weight);
        let b = g.param(bind, set, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one instance per network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, set: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, set: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), set.len(), "gradient count");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in set
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors, for checkpointing.
    pub fn to_params(&self, prefix: &str, set: &ParamSet) -> ParamSet {
        let mut out = ParamSet::default();
        out.push(format!("{prefix}.step"), Tensor::scalar(self.step as f64));
        for (name, (m, v)) in set.names().iter().zip(self.m.iter().zip(&self.v)) {
            out.push(format!("{prefix}.m.{name}"), m.clone());
            out.push(format!("{prefix}.v.{name}"), v.clone());
        }
        out
    }
}
