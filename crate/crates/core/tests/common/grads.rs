//! Gradient-check suites shared by the gradient tests and the acceptance run.
//! Each returns the worst relative error it saw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagegan::graph::{Binding, Graph};
use sagegan::losses::{
    cross_entropy_loss, cycle_consistency_loss, focal_cross_entropy_grad, focal_cross_entropy_loss,
    focal_tversky_grad, focal_tversky_loss, l1_grad, l1_loss, l1_term, mse_to_target, mse_to_target_grad,
    seg_loss_term, SegLossWeights, TverskyParams,
};
use sagegan::params::{Conv, ParamSet};
use sagegan::style::ADAIN_EPS;
use sagegan::unet::{gate_graph, AttentionGateParams};
use sagegan::Tensor;

use super::{leaves, max_rel_err_params, max_rel_err_tensor};

fn t2(v: [f64; 4]) -> Tensor {
    Tensor::from_vec(&[2, 2], v.to_vec()).unwrap()
}

fn pred() -> Tensor {
    t2([0.9, 0.8, 0.3, 0.1])
}

fn target() -> Tensor {
    t2([1.0, 0.0, 1.0, 0.0])
}

pub fn cross_entropy() -> f64 {
    let (p, t) = (pred(), target());
    let plain = max_rel_err_tensor(&p, &focal_cross_entropy_grad(&p, &t, 0.0).unwrap(), |x| {
        cross_entropy_loss(x, &t).unwrap()
    });
    let focal = max_rel_err_tensor(&p, &focal_cross_entropy_grad(&p, &t, 2.0).unwrap(), |x| {
        focal_cross_entropy_loss(x, &t, 2.0).unwrap()
    });
    plain.max(focal)
}

pub fn focal_tversky() -> f64 {
    let (p, t) = (pred(), target());
    let mut worst = 0.0f64;
    for params in [
        TverskyParams::default(),
        TverskyParams {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            smooth: 1e-6,
        },
    ] {
        let a = focal_tversky_grad(&p, &t, &params).unwrap();
        worst = worst.max(max_rel_err_tensor(&p, &a, |x| focal_tversky_loss(x, &t, &params).unwrap()));
    }
    worst
}

pub fn l1() -> f64 {
    let (a, b) = (pred(), t2([0.2, 0.5, 0.6, 0.4]));
    max_rel_err_tensor(&a, &l1_grad(&a, &b).unwrap(), |x| l1_loss(x, &b).unwrap())
}

pub fn mse_adversarial() -> f64 {
    let s = t2([0.7, -0.2, 1.4, 0.3]);
    [0.0, 1.0]
        .into_iter()
        .map(|target| max_rel_err_tensor(&s, &mse_to_target_grad(&s, target), |x| mse_to_target(x, target)))
        .fold(0.0, f64::max)
}

/// Both reconstruction directions on the tape against the closed-form loss.
pub fn cycle() -> f64 {
    let mask = target();
    let image = t2([0.8, 0.2, 0.7, 0.1]);
    let mut set = ParamSet::default();
    set.push("f_of_g_x", t2([0.6, 0.3, 0.9, 0.2]));
    set.push("g_of_f_y", t2([0.5, 0.4, 0.3, 0.35]));
    let taped = max_rel_err_params(&set, |g, bind, s| {
        let v = leaves(g, bind, s);
        let a = l1_term(g, v[0], &mask).unwrap();
        let b = l1_term(g, v[1], &image).unwrap();
        g.weighted_sum(&[(a, 1.0), (b, 1.0)])
    });
    // the tape value must be the closed form
    let mut g = Graph::new();
    let v = leaves(&mut g, Binding::Frozen, &set);
    let a = l1_term(&mut g, v[0], &mask).unwrap();
    let b = l1_term(&mut g, v[1], &image).unwrap();
    let total = g.weighted_sum(&[(a, 1.0), (b, 1.0)]);
    let closed = cycle_consistency_loss(&mask, &set.tensors()[0], &image, &set.tensors()[1]).unwrap();
    assert!((g.scalar(total) - closed).abs() < 1e-15);
    taped
}

/// One attention gate, a 1x1 head and the segmentation loss; every gate
/// coefficient and head weight is checked (19 scalars).
pub fn gate_micro_network() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gate = AttentionGateParams::random(2, 2, 2, &mut rng);
    let (mut set, layout) = gate.to_param_set().unwrap();
    let head = Conv::pointwise(&mut set, "head", 2, 1, true, &mut rng);
    assert!(set.num_scalars() <= 64, "{} scalars", set.num_scalars());
    let x = Tensor::randn(&[1, 2, 4, 4], &mut rng);
    let gating = Tensor::randn(&[1, 2, 2, 2], &mut rng);
    let mask = Tensor::from_vec(
        &[1, 1, 4, 4],
        (0..16).map(|i| f64::from(u8::from(i % 3 == 0))).collect(),
    )
    .unwrap();
    let weights = SegLossWeights::default();
    let tversky = TverskyParams::default();
    max_rel_err_params(&set, |g, bind, s| {
        let xv = g.input(x.clone());
        let gv = g.input(gating.clone());
        let (xhat, _) = gate_graph(g, bind, s, &layout, xv, gv).unwrap();
        let logits = head.forward(g, bind, s, xhat);
        let prob = g.sigmoid(logits);
        seg_loss_term(g, prob, &mask, &tversky, &weights).unwrap().0
    })
}

/// AdaIN on a 2-channel 3x3 fixture: derivatives with respect to the input,
/// the per-channel scale and the per-channel shift.
pub fn adain() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let readout = Tensor::randn(&[1, 2, 3, 3], &mut rng);
    let mut set = ParamSet::default();
    set.push("x", Tensor::randn(&[1, 2, 3, 3], &mut rng));
    set.push("scale", Tensor::from_vec(&[1, 2], vec![1.3, -0.7]).unwrap());
    set.push("shift", Tensor::from_vec(&[1, 2], vec![0.2, -0.4]).unwrap());
    max_rel_err_params(&set, |g, bind, s| {
        let v = leaves(g, bind, s);
        let y = g.adain(v[0], v[1], v[2], ADAIN_EPS);
        let value: f64 = g.value(y).data().iter().zip(readout.data()).map(|(a, b)| a * b).sum();
        g.loss(value, vec![(y, readout.clone())])
    })
}
