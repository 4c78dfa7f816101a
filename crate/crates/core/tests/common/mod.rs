#![allow(dead_code)]

pub mod grads;

use sagegan::graph::{Binding, Graph, Tag, Var};
use sagegan::params::ParamSet;
use sagegan::Tensor;

pub const FD_STEP: f64 = 1e-4;
const TAG: Tag = Tag(99);

/// `|a - n| / max(|a|, |n|)`, with a floor so that gradients that are zero
/// up to rounding compare on an absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f` around `x0`.
pub fn max_rel_err_tensor(x0: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    assert_eq!(x0.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let at = |d: f64| {
            let mut x = x0.clone();
            x.data_mut()[i] += d;
            f(&x)
        };
        let num = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

/// Largest relative error over every scalar of `set`, differentiating the
/// scalar node returned by `build`. `build` receives the binding to use for `set`.
pub fn max_rel_err_params(set: &ParamSet, build: impl Fn(&mut Graph, Binding, &ParamSet) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g, Binding::Train(TAG), set);
    let analytic = g.backward(out).for_set(TAG, set);
    let eval = |s: &ParamSet| {
        let mut g = Graph::new();
        let out = build(&mut g, Binding::Frozen, s);
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let at = |d: f64| {
                let mut s = set.clone();
                s.tensors_mut()[k].data_mut()[i] += d;
                eval(&s)
            };
            let num = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[i], num));
        }
    }
    worst
}

/// Parameters of `set` as tape nodes under `bind`.
pub fn leaves(g: &mut Graph, bind: Binding, set: &ParamSet) -> Vec<Var> {
    (0..set.len()).map(|i| g.param(bind, set, i)).collect()
}
