//! Segmentation, adversarial, cycle, perceptual and pixel losses.
//!
//! Each loss has a value function and, where training needs it, a matching
//! gradient function with respect to its first (prediction) argument. The
//! `*_term` helpers record a loss on a [`Graph`] using those gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::perceptual::FeatureExtractor;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TverskyParams {
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams {
            alpha: 0.3,
            beta: 0.7,
            gamma: 1.5,
            smooth: 1e-6,
        }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::param("tversky.alpha/beta", "must be >= 0 with a positive sum"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::param("tversky.gamma", "must be > 0"));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::param("tversky.smooth", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Optional focusing exponent on the cross-entropy term; 0 gives plain `-log(p_t)`.
    pub ce_focusing: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        SegLossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            ce_focusing: 0.0,
        }
    }
}

impl SegLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 == 0.0 {
            return Err(Error::param("seg_weights", "lambda1, lambda2 must be >= 0 and not both 0"));
        }
        if self.ce_focusing < 0.0 {
            return Err(Error::param("seg_weights.ce_focusing", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanLossWeights {
    pub lambda_cyc: f64,
    pub lambda_perc: f64,
    pub lambda_l1: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        GanLossWeights {
            lambda_cyc: 10.0,
            lambda_perc: 1.0,
            lambda_l1: 10.0,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_perc", self.lambda_perc),
            ("lambda_l1", self.lambda_l1),
        ] {
            if !(v >= 0.0) {
                return Err(Error::param(name, "must be >= 0"));
            }
        }
        Ok(())
    }
}

/// One value per loss term. Used both for the raw parts and for their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub ce: f64,
    pub focal_tversky: f64,
    /// Generator `G` (mask to image) least-squares adversarial term.
    pub adv_g: f64,
    /// Segmenter `F` (image to mask) least-squares adversarial term.
    pub adv_f: f64,
    pub adv_d_image: f64,
    pub adv_d_mask: f64,
    pub cyc: f64,
    pub perc: f64,
    pub l1: f64,
    /// Segmentation loss of `F(G(mask))` against `mask`.
    pub seg_feedback: f64,
}

impl Terms {
    pub fn named(&self) -> [(&'static str, f64); 10] {
        [
            ("ce", self.ce),
            ("focal_tversky", self.focal_tversky),
            ("adv_g", self.adv_g),
            ("adv_f", self.adv_f),
            ("adv_d_image", self.adv_d_image),
            ("adv_d_mask", self.adv_d_mask),
            ("cyc", self.cyc),
            ("perc", self.perc),
            ("l1", self.l1),
            ("seg_feedback", self.seg_feedback),
        ]
    }

    pub fn dot(&self, weights: &Terms) -> f64 {
        self.named()
            .iter()
            .zip(weights.named())
            .map(|((_, p), (_, w))| p * w)
            .sum()
    }

    fn zip_with(&self, other: &Terms, f: impl Fn(f64, f64) -> f64) -> Terms {
        Terms {
            ce: f(self.ce, other.ce),
            focal_tversky: f(self.focal_tversky, other.focal_tversky),
            adv_g: f(self.adv_g, other.adv_g),
            adv_f: f(self.adv_f, other.adv_f),
            adv_d_image: f(self.adv_d_image, other.adv_d_image),
            adv_d_mask: f(self.adv_d_mask, other.adv_d_mask),
            cyc: f(self.cyc, other.cyc),
            perc: f(self.perc, other.perc),
            l1: f(self.l1, other.l1),
            seg_feedback: f(self.seg_feedback, other.seg_feedback),
        }
    }
}

/// Per-term record of a loss evaluation. `total` is always `parts · weights`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: Terms,
    pub weights: Terms,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(parts: Terms, weights: Terms) -> Self {
        LossBreakdown {
            parts,
            weights,
            total: parts.dot(&weights),
        }
    }

    /// Fails naming the first non-finite term.
    pub fn ensure_finite(&self, at: &str) -> Result<()> {
        for (name, v) in self.parts.named() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: name.into(),
                    at: at.into(),
                });
            }
        }
        if !self.total.is_finite() {
            return Err(Error::NonFinite {
                term: "total".into(),
                at: at.into(),
            });
        }
        Ok(())
    }

    /// Element-wise mean of several breakdowns sharing the same weights.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let sum = items
            .iter()
            .skip(1)
            .fold(first.parts, |acc, b| acc.zip_with(&b.parts, |x, y| x + y));
        let parts = sum.zip_with(&Terms::default(), |x, _| x / n);
        Some(LossBreakdown::new(parts, first.weights))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, context: &str) -> Result<()> {
    b.expect_shape(a.shape(), context)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean `-log(p_t)` with `p_t = p` on foreground and `1 - p` on background.
pub fn cross_entropy_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    focal_cross_entropy_loss(pred, target, 0.0)
}

/// Mean `-(1 - p_t)^focusing · log(p_t)`.
pub fn focal_cross_entropy_loss(pred: &Tensor, target: &Tensor, focusing: f64) -> Result<f64> {
    same_shape(pred, target, "cross_entropy_loss")?;
    let n = pred.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            let pt = t * p + (1.0 - t) * (1.0 - p);
            -(1.0 - pt).powf(focusing) * pt.ln()
        })
        .sum();
    Ok(total / n)
}

pub fn focal_cross_entropy_grad(pred: &Tensor, target: &Tensor, focusing: f64) -> Result<Tensor> {
    same_shape(pred, target, "cross_entropy_grad")?;
    let n = pred.len() as f64;
    pred.zip_map(target, |p, t| {
        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            return 0.0;
        }
        let pt = t * p + (1.0 - t) * (1.0 - p);
        let dpt_dp = 2.0 * t - 1.0;
        let dl_dpt = if focusing == 0.0 {
            -1.0 / pt
        } else {
            let q = 1.0 - pt;
            focusing * q.powf(focusing - 1.0) * pt.ln() - q.powf(focusing) / pt
        };
        dl_dpt * dpt_dp / n
    })
}

struct SoftCounts {
    tp: f64,
    fp: f64,
    fn_: f64,
}

fn soft_counts(pred: &Tensor, target: &Tensor) -> SoftCounts {
    let mut c = SoftCounts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        c.tp += p * g;
        c.fp += p * (1.0 - g);
        c.fn_ += (1.0 - p) * g;
    }
    c
}

/// Tversky index from (soft) counts.
pub fn tversky_from_counts(tp: f64, fp: f64, fn_: f64, p: &TverskyParams) -> f64 {
    (tp + p.smooth) / (tp + p.alpha * fp + p.beta * fn_ + p.smooth)
}

pub fn tversky_index(pred: &Tensor, target: &Tensor, p: &TverskyParams) -> Result<f64> {
    same_shape(pred, target, "tversky_index")?;
    let c = soft_counts(pred, target);
    Ok(tversky_from_counts(c.tp, c.fp, c.fn_, p))
}

/// `(1 - TI)^gamma`.
pub fn focal_tversky_from_index(ti: f64, gamma: f64) -> f64 {
    (1.0 - ti).max(0.0).powf(gamma)
}

pub fn focal_tversky_loss(pred: &Tensor, target: &Tensor, p: &TverskyParams) -> Result<f64> {
    Ok(focal_tversky_from_index(tversky_index(pred, target, p)?, p.gamma))
}

pub fn focal_tversky_grad(pred: &Tensor, target: &Tensor, p: &TverskyParams) -> Result<Tensor> {
    same_shape(pred, target, "focal_tversky_grad")?;
    let c = soft_counts(pred, target);
    let num = c.tp + p.smooth;
    let den = c.tp + p.alpha * c.fp + p.beta * c.fn_ + p.smooth;
    let ti = num / den;
    let base = (1.0 - ti).max(0.0);
    let dl_dti = if base == 0.0 {
        0.0
    } else {
        -p.gamma * base.powf(p.gamma - 1.0)
    };
    pred.zip_map(target, |_, g| {
        let dnum = g;
        let dden = g + p.alpha * (1.0 - g) - p.beta * g;
        dl_dti * (dnum * den - num * dden) / (den * den)
    })
}

/// `λ1·CE + λ2·FTV` for one prediction/target pair.
pub fn total_seg_loss(
    pred: &Tensor,
    target: &Tensor,
    p: &TverskyParams,
    w: &SegLossWeights,
) -> Result<LossBreakdown> {
    let parts = Terms {
        ce: focal_cross_entropy_loss(pred, target, w.ce_focusing)?,
        focal_tversky: focal_tversky_loss(pred, target, p)?,
        ..Terms::default()
    };
    let weights = Terms {
        ce: w.lambda1,
        focal_tversky: w.lambda2,
        ..Terms::default()
    };
    Ok(LossBreakdown::new(parts, weights))
}

/// Least-squares adversarial terms: `(gen_term, disc_term)` with targets 1 for
/// real and 0 for fake.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> (f64, f64) {
    let disc = mse_to_target(d_real, 1.0) + mse_to_target(d_fake, 0.0);
    let gen = mse_to_target(d_fake, 1.0);
    (gen, disc)
}

/// `mean((scores - target)^2)`.
pub fn mse_to_target(scores: &Tensor, target: f64) -> f64 {
    scores.data().iter().map(|d| (d - target).powi(2)).sum::<f64>() / scores.len() as f64
}

pub fn mse_to_target_grad(scores: &Tensor, target: f64) -> Tensor {
    let n = scores.len() as f64;
    scores.map(|d| 2.0 * (d - target) / n)
}

/// Mean absolute difference.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "l1_loss")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Gradient of [`l1_loss`] with respect to `a` (subgradient 0 at ties).
pub fn l1_grad(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "l1_grad")?;
    let n = a.len() as f64;
    a.zip_map(b, |x, y| {
        let d = x - y;
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`.
pub fn cycle_consistency_loss(
    x: &Tensor,
    f_of_g_x: &Tensor,
    y: &Tensor,
    g_of_f_y: &Tensor,
) -> Result<f64> {
    Ok(l1_loss(f_of_g_x, x)? + l1_loss(g_of_f_y, y)?)
}

/// Mean over configured layers of the mean absolute feature difference.
pub fn perceptual_loss(a: &Tensor, b: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    same_shape(a, b, "perceptual_loss")?;
    let fa = extractor.extract(&as_batch(a))?;
    let fb = extractor.extract(&as_batch(b))?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        total += l1_loss(x, y)?;
    }
    Ok(total / fa.len() as f64)
}

fn as_batch(t: &Tensor) -> Tensor {
    match t.shape().len() {
        2 => {
            let (h, w) = t.dims2();
            t.clone().reshape(&[1, 1, h, w]).unwrap()
        }
        3 => {
            let s = t.shape();
            t.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap()
        }
        _ => t.clone(),
    }
}

/// Inputs to [`total_gan_objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GanParts {
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_d_image: f64,
    pub adv_d_mask: f64,
    pub cyc: f64,
    pub perc: f64,
    pub l1: f64,
    pub seg_feedback: f64,
    pub ce: f64,
    pub focal_tversky: f64,
}

/// Adversarial terms at unit weight, plus `λ_cyc·cyc + λ_perc·perc + λ_l1·l1`,
/// plus the weighted segmentation terms.
pub fn total_gan_objective(
    parts: &GanParts,
    w: &GanLossWeights,
    seg: &SegLossWeights,
    seg_feedback_weight: f64,
) -> Result<LossBreakdown> {
    let terms = Terms {
        ce: parts.ce,
        focal_tversky: parts.focal_tversky,
        adv_g: parts.adv_g,
        adv_f: parts.adv_f,
        adv_d_image: parts.adv_d_image,
        adv_d_mask: parts.adv_d_mask,
        cyc: parts.cyc,
        perc: parts.perc,
        l1: parts.l1,
        seg_feedback: parts.seg_feedback,
    };
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                at: "total_gan_objective".into(),
            });
        }
    }
    let weights = Terms {
        ce: seg.lambda1,
        focal_tversky: seg.lambda2,
        adv_g: 1.0,
        adv_f: 1.0,
        adv_d_image: 1.0,
        adv_d_mask: 1.0,
        cyc: w.lambda_cyc,
        perc: w.lambda_perc,
        l1: w.lambda_l1,
        seg_feedback: seg_feedback_weight,
    };
    Ok(LossBreakdown::new(terms, weights))
}

/// Batched segmentation loss on the tape: per-sample CE and focal Tversky,
/// averaged over the batch. Returns the loss node and the unweighted means.
pub fn seg_loss_term(
    g: &mut Graph,
    prob: Var,
    target: &Tensor,
    p: &TverskyParams,
    w: &SegLossWeights,
) -> Result<(Var, f64, f64)> {
    let pv = g.value(prob).clone();
    same_shape(&pv, target, "seg_loss_term")?;
    let n = pv.shape()[0];
    let per = pv.len() / n;
    let mut ce_sum = 0.0;
    let mut ft_sum = 0.0;
    let mut grad = Vec::with_capacity(pv.len());
    for b in 0..n {
        let ps = Tensor::from_vec(&[per], pv.data()[b * per..(b + 1) * per].to_vec())?;
        let ts = Tensor::from_vec(&[per], target.data()[b * per..(b + 1) * per].to_vec())?;
        ce_sum += focal_cross_entropy_loss(&ps, &ts, w.ce_focusing)?;
        ft_sum += focal_tversky_loss(&ps, &ts, p)?;
        let gce = focal_cross_entropy_grad(&ps, &ts, w.ce_focusing)?;
        let gft = focal_tversky_grad(&ps, &ts, p)?;
        grad.extend(
            gce.data()
                .iter()
                .zip(gft.data())
                .map(|(a, c)| (w.lambda1 * a + w.lambda2 * c) / n as f64),
        );
    }
    let (ce, ft) = (ce_sum / n as f64, ft_sum / n as f64);
    let value = w.lambda1 * ce + w.lambda2 * ft;
    let grad = Tensor::from_vec(pv.shape(), grad)?;
    Ok((g.loss(value, vec![(prob, grad)]), ce, ft))
}

/// `mean((scores - target)^2)` on the tape.
pub fn mse_term(g: &mut Graph, scores: Var, target: f64) -> Var {
    let s = g.value(scores).clone();
    let value = mse_to_target(&s, target);
    g.loss(value, vec![(scores, mse_to_target_grad(&s, target))])
}

/// `mean|a - b|` on the tape for a graph value `a` and a constant `b`.
pub fn l1_term(g: &mut Graph, a: Var, b: &Tensor) -> Result<Var> {
    let av = g.value(a).clone();
    let value = l1_loss(&av, b)?;
    let grad = l1_grad(&av, b)?;
    Ok(g.loss(value, vec![(a, grad)]))
}

/// Perceptual loss of a graph value against a constant reference image.
pub fn perceptual_term(
    g: &mut Graph,
    extractor: &dyn FeatureExtractor,
    fake: Var,
    real: &Tensor,
) -> Result<Var> {
    let fake_feats = extractor.features(g, fake)?;
    let real_feats = extractor.extract(real)?;
    let layers = fake_feats.len() as f64;
    let mut terms = Vec::with_capacity(fake_feats.len());
    for (f, r) in fake_feats.iter().zip(&real_feats) {
        let node = l1_term(g, *f, r)?;
        terms.push((node, 1.0 / layers));
    }
    Ok(g.weighted_sum(&terms))
}
