//! Attention-gated U-Net segmenter and its supervised pretraining loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::config::{stream_rng, stream_seed, Stream, TrainConfig};
use crate::data::{augment, preprocess, DatasetSplit, SamplePair};
use crate::error::{Error, Result};
use crate::graph::{Binding, Graph, Tag, Var};
use crate::losses::{seg_loss_term, LossBreakdown, Terms};
use crate::metrics::evaluate_dataset;
use crate::params::{Adam, Conv, ParamSet};
use crate::tensor::Tensor;

pub const SEG_KIND: &str = "segmenter";
pub const SEG_VERSION: u32 = 1;
pub const SEG_TAG: Tag = Tag(0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub f_int_ratio: f64,
    pub input_size: (usize, usize),
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 32,
            f_int_ratio: 0.5,
            input_size: (256, 256),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::param("unet.depth", format!("{} must be >= 2", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::param("unet.base_channels", "must be >= 1"));
        }
        if !(self.f_int_ratio > 0.0 && self.f_int_ratio.is_finite()) {
            return Err(Error::param("unet.f_int_ratio", "must be positive"));
        }
        let m = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::param(
                "unet.input_size",
                format!("{h}x{w} must be positive multiples of 2^depth = {m}"),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn f_int(&self, f_l: usize) -> usize {
        ((f_l as f64 * self.f_int_ratio).round() as usize).max(1)
    }
}

/// The coefficients of one attention gate.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGateParams {
    /// `[F_int, F_l]`
    pub w_x: Tensor,
    /// `[F_int, F_g]`
    pub w_g: Tensor,
    /// `[F_int]`
    pub psi: Tensor,
    pub b_psi: f64,
}

impl AttentionGateParams {
    pub fn random<R: rand::Rng + ?Sized>(f_l: usize, f_g: usize, f_int: usize, rng: &mut R) -> Self {
        AttentionGateParams {
            w_x: Tensor::randn(&[f_int, f_l], rng),
            w_g: Tensor::randn(&[f_int, f_g], rng),
            psi: Tensor::randn(&[f_int], rng),
            b_psi: rng.random_range(-1.0..1.0),
        }
    }

    /// Packs the coefficients into a parameter set laid out like a gate
    /// inside the network, returning the layout too.
    pub fn to_param_set(&self) -> Result<(ParamSet, GateLayout)> {
        let (fi, fl) = self.w_x.dims2();
        let (fi2, fg) = self.w_g.dims2();
        if fi2 != fi || self.psi.shape() != [fi] {
            return Err(Error::shape(
                "attention gate parameters (F_int)",
                &[fi],
                &[fi2, self.psi.len()],
            ));
        }
        let mut set = ParamSet::default();
        let wx = set.push("wx.weight", self.w_x.clone().reshape(&[fi, fl, 1, 1])?);
        let wg = set.push("wg.weight", self.w_g.clone().reshape(&[fi, fg, 1, 1])?);
        let psi = set.push("psi.weight", self.psi.clone().reshape(&[1, fi, 1, 1])?);
        let b = set.push("psi.bias", Tensor::from_vec(&[1], vec![self.b_psi])?);
        let pw = |weight, bias| Conv {
            weight,
            bias,
            geom: crate::params::ConvGeomDef { stride: 1, pad: 0 },
        };
        Ok((
            set,
            GateLayout {
                wx: pw(wx, None),
                wg: pw(wg, None),
                psi: pw(psi, Some(b)),
            },
        ))
    }
}

/// Per-pixel attention coefficients of one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `[H, W]`, values in `[0, 1]`.
    pub alpha: Tensor,
    /// Skip level the gate sits on; 0 is the finest.
    pub gate_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateLayout {
    pub wx: Conv,
    pub wg: Conv,
    pub psi: Conv,
}

/// Records one attention gate: returns `(x̂, α)` with `α` shaped `[N, 1, H, W]`.
///
/// `W_g` is applied at the gating signal's own resolution and the result is
/// bilinearly upsampled; both maps are linear, so this equals upsampling `g` first.
pub fn gate_graph(
    g: &mut Graph,
    bind: Binding,
    set: &ParamSet,
    gate: &GateLayout,
    x: Var,
    gating: Var,
) -> Result<(Var, Var)> {
    let xs = g.value(x).shape().to_vec();
    let gs = g.value(gating).shape().to_vec();
    let (n, _, h, w) = g.value(x).dims4();
    let (gn, _, gh, gw) = g.value(gating).dims4();
    let fl = set.tensors()[gate.wx.weight].shape()[1];
    let fg = set.tensors()[gate.wg.weight].shape()[1];
    let bad = gn != n || gh > h || gw > w || h % gh != 0 || w % gw != 0 || xs[1] != fl || gs[1] != fg;
    if bad {
        return Err(Error::shape("attention gate (encoder features vs gating signal)", &xs, &gs));
    }
    let theta = gate.wx.forward(g, bind, set, x);
    let phi = gate.wg.forward(g, bind, set, gating);
    let phi = g.resize_bilinear(phi, h, w);
    let f = g.add(theta, phi);
    let f = g.relu(f);
    let logits = gate.psi.forward(g, bind, set, f);
    let alpha = g.sigmoid(logits);
    let xhat = g.channel_broadcast_mul(x, alpha);
    Ok((xhat, alpha))
}

/// One attention gate on single images: `x` is `[F_l, H, W]`, `g` is `[F_g, H', W']`.
pub fn attention_gate(x: &Tensor, gating: &Tensor, params: &AttentionGateParams) -> Result<(Tensor, AttentionMap)> {
    if x.shape().len() != 3 || gating.shape().len() != 3 {
        return Err(Error::shape("attention gate inputs", x.shape(), gating.shape()));
    }
    let (set, layout) = params.to_param_set()?;
    let mut g = Graph::new();
    let xs = x.shape();
    let gs = gating.shape();
    let xv = g.input(x.clone().reshape(&[1, xs[0], xs[1], xs[2]])?);
    let gv = g.input(gating.clone().reshape(&[1, gs[0], gs[1], gs[2]])?);
    let (xhat, alpha) = gate_graph(&mut g, Binding::Frozen, &set, &layout, xv, gv)?;
    Ok((
        g.value(xhat).clone().reshape(xs)?,
        AttentionMap {
            alpha: g.value(alpha).clone().reshape(&[xs[1], xs[2]])?,
            gate_index: 0,
        },
    ))
}

/// How skip connections are gated in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    /// `α ≡ 1`: every skip passes unchanged.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DoubleConv {
    a: Conv,
    b: Conv,
}

impl DoubleConv {
    fn new(set: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            a: Conv::same3(set, &format!("{name}.a"), cin, cout, rng),
            b: Conv::same3(set, &format!("{name}.b"), cout, cout, rng),
        }
    }

    fn forward(&self, g: &mut Graph, bind: Binding, set: &ParamSet, x: Var) -> Var {
        let y = self.a.forward(g, bind, set, x);
        let y = g.relu(y);
        let y = self.b.forward(g, bind, set, y);
        g.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UNetLayout {
    enc: Vec<DoubleConv>,
    /// Indexed by target level.
    up: Vec<Conv>,
    gates: Vec<GateLayout>,
    dec: Vec<DoubleConv>,
    head: Conv,
}

/// Segmenter parameters plus the config that fixes their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModelState {
    pub config: UNetConfig,
    pub params: ParamSet,
    layout: UNetLayout,
}

impl SegModelState {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let set = &mut params;
        let mut enc = Vec::new();
        for l in 0..config.depth {
            let cin = if l == 0 { 1 } else { config.channels(l - 1) };
            enc.push(DoubleConv::new(set, &format!("enc{l}"), cin, config.channels(l), &mut rng));
        }
        let mut up = Vec::new();
        let mut gates = Vec::new();
        let mut dec = Vec::new();
        for l in 0..config.depth - 1 {
            let (fl, fg) = (config.channels(l), config.channels(l + 1));
            let fi = config.f_int(fl);
            up.push(Conv::same3(set, &format!("up{l}"), fg, fl, &mut rng));
            gates.push(GateLayout {
                wx: Conv::pointwise(set, &format!("gate{l}.wx"), fl, fi, false, &mut rng),
                wg: Conv::pointwise(set, &format!("gate{l}.wg"), fg, fi, false, &mut rng),
                psi: Conv::pointwise(set, &format!("gate{l}.psi"), fi, 1, true, &mut rng),
            });
            dec.push(DoubleConv::new(set, &format!("dec{l}"), 2 * fl, fl, &mut rng));
        }
        let head = Conv::pointwise(set, "head", config.base_channels, 1, true, &mut rng);
        Ok(SegModelState {
            config,
            params,
            layout: UNetLayout {
                enc,
                up,
                gates,
                dec,
                head,
            },
        })
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            let n = shape.first().copied().unwrap_or(1);
            return Err(Error::shape("segmenter input", &[n, 1, h, w], shape));
        }
        Ok(())
    }

    /// Records the network on `g`. Returns logits `[N, 1, H, W]` and one
    /// `[N, 1, H_l, W_l]` attention map per skip, finest first.
    pub fn forward_graph(&self, g: &mut Graph, bind: Binding, x: Var, mode: GateMode) -> Result<(Var, Vec<Var>)> {
        self.check_batch(g.value(x).shape())?;
        let set = &self.params;
        let l = &self.layout;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (i, block) in l.enc.iter().enumerate() {
            if i > 0 {
                h = g.maxpool2(h);
            }
            h = block.forward(g, bind, set, h);
            skips.push(h);
        }
        let mut d = skips.pop().expect("depth >= 2");
        let mut alphas = vec![None; self.config.depth - 1];
        for i in (0..self.config.depth - 1).rev() {
            let skip = skips[i];
            let (n, _, sh, sw) = g.value(skip).dims4();
            let (xhat, alpha) = match mode {
                GateMode::Learned => gate_graph(g, bind, set, &l.gates[i], skip, d)?,
                GateMode::Identity => {
                    let ones = g.input(Tensor::full(&[n, 1, sh, sw], 1.0));
                    (g.channel_broadcast_mul(skip, ones), ones)
                }
            };
            alphas[i] = Some(alpha);
            let up = g.resize_bilinear(d, sh, sw);
            let up = l.up[i].forward(g, bind, set, up);
            let up = g.relu(up);
            let cat = g.concat_channels(&[xhat, up]);
            d = l.dec[i].forward(g, bind, set, cat);
        }
        let logits = l.head.forward(g, bind, set, d);
        Ok((logits, alphas.into_iter().map(|a| a.expect("every level gated")).collect()))
    }

    /// Gate-free reference: skips are concatenated directly.
    pub fn forward_plain_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_batch(g.value(x).shape())?;
        let set = &self.params;
        let l = &self.layout;
        let bind = Binding::Frozen;
        let mut skips = Vec::new();
        let mut h = x;
        for (i, block) in l.enc.iter().enumerate() {
            if i > 0 {
                h = g.maxpool2(h);
            }
            h = block.forward(g, bind, set, h);
            skips.push(h);
        }
        let mut d = skips.pop().expect("depth >= 2");
        for i in (0..self.config.depth - 1).rev() {
            let (_, _, sh, sw) = g.value(skips[i]).dims4();
            let up = g.resize_bilinear(d, sh, sw);
            let up = l.up[i].forward(g, bind, set, up);
            let up = g.relu(up);
            let cat = g.concat_channels(&[skips[i], up]);
            d = l.dec[i].forward(g, bind, set, cat);
        }
        Ok(l.head.forward(g, bind, set, d))
    }

    /// Logits for a `[N, 1, H, W]` batch, no gradients.
    pub fn logits_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let (logits, _) = self.forward_graph(&mut g, Binding::Frozen, x, GateMode::Learned)?;
        Ok(g.value(logits).clone())
    }

    /// Single-image inference on `[H, W]` or `[1, H, W]`.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Vec<AttentionMap>)> {
        self.forward_with_mode(image, GateMode::Learned)
    }

    pub fn forward_with_mode(&self, image: &Tensor, mode: GateMode) -> Result<(Tensor, Vec<AttentionMap>)> {
        let (h, w) = plane_dims(image)?;
        let mut g = Graph::new();
        let x = g.input(image.clone().reshape(&[1, 1, h, w])?);
        let (logits, alphas) = self.forward_graph(&mut g, Binding::Frozen, x, mode)?;
        let maps = alphas
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let (_, _, ah, aw) = g.value(*a).dims4();
                Ok(AttentionMap {
                    alpha: g.value(*a).clone().reshape(&[ah, aw])?,
                    gate_index: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(logits).clone().reshape(&[h, w])?, maps))
    }

    pub fn forward_plain(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = plane_dims(image)?;
        let mut g = Graph::new();
        let x = g.input(image.clone().reshape(&[1, 1, h, w])?);
        let logits = self.forward_plain_graph(&mut g, x)?;
        g.value(logits).clone().reshape(&[h, w])
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "version": SEG_VERSION, "config": self.config });
        let mut c = Container::new(SEG_KIND, meta.to_string());
        c.push_set("", &self.params);
        c
    }

    pub fn config_of(c: &Container, path: &Path) -> Result<UNetConfig> {
        c.expect_kind(&[SEG_KIND], path)?;
        let meta: serde_json::Value = serde_json::from_str(&c.meta)?;
        let version = meta["version"].as_u64().unwrap_or(0) as u32;
        if version != SEG_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                expected: SEG_VERSION,
                found: version,
            });
        }
        Ok(serde_json::from_value(meta["config"].clone())?)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let config = Self::config_of(c, path)?;
        Self::from_container_with(c, config, path)
    }

    /// Loads the parameter arrays into a model built from `config`; any
    /// disagreement fails with a shape error naming the array.
    pub fn from_container_with(c: &Container, config: UNetConfig, path: &Path) -> Result<Self> {
        c.expect_kind(&[SEG_KIND], path)?;
        let mut state = SegModelState::new(config, 0)?;
        c.fill_set("", &mut state.params)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

fn plane_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        other => Err(Error::shape("single-channel image", &[1, 0, 0], other)),
    }
}

/// `sigmoid(logits) ≥ threshold`, evaluated in logit space so that
/// threshold 1 yields all zeros even where the sigmoid rounds to 1.
pub fn threshold_logits(logits: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::param("threshold", format!("{threshold} outside [0, 1]")));
    }
    let cut = (threshold / (1.0 - threshold)).ln();
    Ok(logits.map(|z| if z >= cut { 1.0 } else { 0.0 }))
}

pub fn predict_mask(image: &Tensor, state: &SegModelState, threshold: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::param("threshold", format!("{threshold} outside [0, 1]")));
    }
    let (logits, _) = state.forward(image)?;
    threshold_logits(&logits, threshold)
}

/// Stacks images and masks of `pairs` into `[N, 1, H, W]` tensors.
pub fn batch_tensors(pairs: &[SamplePair]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = pairs.iter().map(|p| &p.image).collect();
    let masks: Vec<&Tensor> = pairs.iter().map(|p| &p.mask).collect();
    let (h, w) = pairs
        .first()
        .ok_or_else(|| Error::param("batch", "empty batch"))?
        .size();
    let n = pairs.len();
    Ok((
        Tensor::stack(&images)?.reshape(&[n, 1, h, w])?,
        Tensor::stack(&masks)?.reshape(&[n, 1, h, w])?,
    ))
}

/// Brings every pair to `size`, leaving matching pairs untouched.
pub fn fit_pairs(pairs: &[SamplePair], size: (usize, usize)) -> Result<Vec<SamplePair>> {
    pairs
        .iter()
        .map(|p| if p.size() == size { Ok(p.clone()) } else { preprocess(p, size) })
        .collect()
}

/// One Phase-1 epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub val_dice: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Best state by validation Dice (by training loss without a validation set).
    pub best: SegModelState,
    pub last: SegModelState,
    pub best_epoch: Option<usize>,
    pub history: Vec<SegEpochRecord>,
}

/// A single optimization step on one batch; returns the batch loss breakdown.
pub fn seg_train_step(
    state: &mut SegModelState,
    opt: &mut Adam,
    batch: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (images, masks) = batch_tensors(batch)?;
    let mut g = Graph::new();
    let x = g.input(images);
    let (logits, _) = state.forward_graph(&mut g, Binding::Train(SEG_TAG), x, GateMode::Learned)?;
    let prob = g.sigmoid(logits);
    let (loss, ce, ft) = seg_loss_term(&mut g, prob, &masks, &cfg.tversky, &cfg.seg_loss)?;
    let breakdown = LossBreakdown::new(
        Terms {
            ce,
            focal_tversky: ft,
            ..Default::default()
        },
        Terms {
            ce: cfg.seg_loss.lambda1,
            focal_tversky: cfg.seg_loss.lambda2,
            ..Default::default()
        },
    );
    if !breakdown.total.is_finite() || !ce.is_finite() || !ft.is_finite() {
        return Ok(breakdown);
    }
    let grads = g.backward(loss).for_set(SEG_TAG, &state.params);
    opt.update(&mut state.params, &grads);
    Ok(breakdown)
}

/// Phase 1 from a fresh model seeded by `cfg.seed`.
pub fn pretrain_segmenter(split: &DatasetSplit, cfg: &TrainConfig) -> Result<Pretrained> {
    let init = SegModelState::new(cfg.unet.clone(), stream_seed(cfg.seed, Stream::SegInit))?;
    pretrain_from(init, split, cfg, &mut |_, _| Ok(()))
}

/// Phase 1 from `init`, calling `on_epoch` after every epoch.
pub fn pretrain_from(
    init: SegModelState,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&SegEpochRecord, &SegModelState) -> Result<()>,
) -> Result<Pretrained> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::param("split.train", "training set is empty"));
    }
    let size = init.config.input_size;
    let train = fit_pairs(&split.train, size)?;
    let val = fit_pairs(&split.val, size)?;
    let mut state = init;
    let mut opt = Adam::new(cfg.adam(cfg.lr_seg), &state.params);
    let mut rng = stream_rng(cfg.seed, Stream::Pretrain);
    let mut best = state.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(cfg.epochs_pretrain);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs_pretrain {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SamplePair> = chunk.iter().map(|&i| augment(&train[i], &cfg.augment, &mut rng)).collect();
            let b = seg_train_step(&mut state, &mut opt, &batch, cfg)?;
            b.ensure_finite(&format!("epoch {epoch}"))?;
            losses.push(b);
        }
        let loss = LossBreakdown::mean(&losses).expect("at least one batch");
        let (val_dice, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate_dataset(&state, &val, cfg.threshold)?;
            (Some(r.aggregate.dice), Some(r.aggregate.f1))
        };
        let score = val_dice.unwrap_or(-loss.total);
        if score > best_score {
            best_score = score;
            best = state.clone();
            best_epoch = Some(epoch);
        }
        let record = SegEpochRecord {
            epoch,
            steps: losses.len(),
            loss,
            val_dice,
            val_f1,
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.5} val dice {:?}",
            record.loss.total,
            record.val_dice
        );
        on_epoch(&record, &state)?;
        history.push(record);
    }
    Ok(Pretrained {
        best,
        last: state,
        best_epoch,
        history,
    })
}
