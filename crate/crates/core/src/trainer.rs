//! Phase 2: cycle-consistent adversarial training with online synthetic augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::config::{stream_rng, stream_seed, Stream, TrainConfig};
use crate::data::{augment, DatasetSplit, PairSource, SamplePair};
use crate::disc::{DiscConfig, PatchDiscriminator};
use crate::error::{Error, Result};
use crate::graph::{Binding, Graph, Tag};
use crate::losses::{l1_term, mse_term, perceptual_term, seg_loss_term, total_gan_objective, GanParts, LossBreakdown};
use crate::metrics::evaluate_dataset;
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::perceptual::FeatureExtractor;
use crate::style::{GenConfig, GenModelState, NoiseMode};
use crate::tensor::Tensor;
use crate::unet::{batch_tensors, fit_pairs, GateMode, SegModelState, UNetConfig, SEG_TAG};

pub const GEN_TAG: Tag = Tag(1);
pub const DISC_IMAGE_TAG: Tag = Tag(2);
pub const DISC_MASK_TAG: Tag = Tag(3);
pub const CYCLE_KIND: &str = "cycle";
pub const CYCLE_VERSION: u32 = 1;

/// Every network and optimizer of Phase 2.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleState {
    /// Mask to image.
    pub gen: GenModelState,
    /// Image to mask.
    pub seg: SegModelState,
    pub disc_image: PatchDiscriminator,
    pub disc_mask: PatchDiscriminator,
    pub opt_gen: Adam,
    pub opt_seg: Adam,
    pub opt_disc_image: Adam,
    pub opt_disc_mask: Adam,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct CycleMeta {
    version: u32,
    iteration: u64,
    unet: UNetConfig,
    generator: GenConfig,
    disc: DiscConfig,
    adam: [AdamConfig; 4],
}

const OPT_PREFIXES: [&str; 4] = ["opt_gen", "opt_seg", "opt_disc_image", "opt_disc_mask"];

impl CycleState {
    /// Fresh generator and discriminators around a pretrained segmenter.
    pub fn new(seg: SegModelState, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = GenModelState::new(cfg.generator.clone(), stream_seed(cfg.seed, Stream::GenInit))?;
        let (h, w) = seg.config.input_size;
        gen.check_size(h, w)?;
        let disc_image = PatchDiscriminator::new(cfg.disc.clone(), stream_seed(cfg.seed, Stream::DiscImageInit))?;
        let disc_mask = PatchDiscriminator::new(cfg.disc.clone(), stream_seed(cfg.seed, Stream::DiscMaskInit))?;
        Ok(CycleState {
            opt_gen: Adam::new(cfg.adam(cfg.lr_gen), &gen.params),
            opt_seg: Adam::new(cfg.adam(cfg.seg_finetune_lr()), &seg.params),
            opt_disc_image: Adam::new(cfg.adam(cfg.lr_disc), &disc_image.params),
            opt_disc_mask: Adam::new(cfg.adam(cfg.lr_disc), &disc_mask.params),
            gen,
            seg,
            disc_image,
            disc_mask,
            iteration: 0,
        })
    }

    fn nets(&self) -> [(&str, &ParamSet, &Adam); 4] {
        [
            ("gen.", &self.gen.params, &self.opt_gen),
            ("seg.", &self.seg.params, &self.opt_seg),
            ("disc_image.", &self.disc_image.params, &self.opt_disc_image),
            ("disc_mask.", &self.disc_mask.params, &self.opt_disc_mask),
        ]
    }

    /// Digest of each network's parameters: generator, segmenter, image and mask discriminators.
    pub fn checksums(&self) -> [u64; 4] {
        [
            self.gen.params.checksum(),
            self.seg.params.checksum(),
            self.disc_image.params.checksum(),
            self.disc_mask.params.checksum(),
        ]
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CycleMeta {
            version: CYCLE_VERSION,
            iteration: self.iteration,
            unet: self.seg.config.clone(),
            generator: self.gen.config.clone(),
            disc: self.disc_image.config.clone(),
            adam: [
                self.opt_gen.config,
                self.opt_seg.config,
                self.opt_disc_image.config,
                self.opt_disc_mask.config,
            ],
        };
        let mut c = Container::new(CYCLE_KIND, serde_json::to_string(&meta)?);
        for ((prefix, set, opt), opt_prefix) in self.nets().into_iter().zip(OPT_PREFIXES) {
            c.push_set(prefix, set);
            c.push_set("", &opt.to_params(opt_prefix, set));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind(&[CYCLE_KIND], path)?;
        let meta: CycleMeta = serde_json::from_str(&c.meta)?;
        if meta.version != CYCLE_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                expected: CYCLE_VERSION,
                found: meta.version,
            });
        }
        let mut gen = GenModelState::new(meta.generator, 0)?;
        let mut seg = SegModelState::new(meta.unet, 0)?;
        let mut disc_image = PatchDiscriminator::new(meta.disc.clone(), 0)?;
        let mut disc_mask = PatchDiscriminator::new(meta.disc, 0)?;
        c.fill_set("gen.", &mut gen.params)?;
        c.fill_set("seg.", &mut seg.params)?;
        disc_image.fill_from(c, "disc_image.", path)?;
        disc_mask.fill_from(c, "disc_mask.", path)?;
        let restore = |cfg: AdamConfig, prefix: &str, set: &ParamSet| -> Result<Adam> {
            let mut opt = Adam::new(cfg, set);
            let mut saved = opt.to_params(prefix, set);
            c.fill_set("", &mut saved)?;
            opt.step = saved.tensors()[0].data()[0] as u64;
            for (i, pair) in saved.tensors()[1..].chunks(2).enumerate() {
                opt.m[i] = pair[0].clone();
                opt.v[i] = pair[1].clone();
            }
            Ok(opt)
        };
        Ok(CycleState {
            opt_gen: restore(meta.adam[0], OPT_PREFIXES[0], &gen.params)?,
            opt_seg: restore(meta.adam[1], OPT_PREFIXES[1], &seg.params)?,
            opt_disc_image: restore(meta.adam[2], OPT_PREFIXES[2], &disc_image.params)?,
            opt_disc_mask: restore(meta.adam[3], OPT_PREFIXES[3], &disc_mask.params)?,
            gen,
            seg,
            disc_image,
            disc_mask,
            iteration: meta.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// Generator outputs paired with the masks they were generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub pairs: Vec<SamplePair>,
    pub iteration: u64,
}

/// One generated image per mask, each with a fresh latent code.
pub fn make_synthetic_batch<R: RngCore + ?Sized>(
    masks: &[Tensor],
    gen: &GenModelState,
    rng: &mut R,
    iteration: u64,
) -> Result<SyntheticBatch> {
    if masks.is_empty() {
        return Ok(SyntheticBatch {
            pairs: Vec::new(),
            iteration,
        });
    }
    let (h, w) = masks[0].dims2();
    let n = masks.len();
    let refs: Vec<&Tensor> = masks.iter().collect();
    let stacked = Tensor::stack(&refs)?.reshape(&[n, 1, h, w])?;
    let z = Tensor::randn(&[n, gen.config.d_z], rng);
    let images = gen.generate_batch(&stacked, &z, NoiseMode::Seeded(rng.next_u64()))?;
    let pairs = masks
        .iter()
        .enumerate()
        .map(|(i, m)| SamplePair {
            id: format!("synthetic-{iteration}-{i}"),
            image: images.batch_item(i).reshape(&[h, w]).expect("same size"),
            mask: m.clone(),
            source: PairSource::Synthetic { iteration },
        })
        .collect();
    Ok(SyntheticBatch { pairs, iteration })
}

/// Real pairs plus synthetic pairs, each exactly once, in seeded order.
pub fn effective_batch<R: RngCore + ?Sized>(real: &[SamplePair], synth: &SyntheticBatch, rng: &mut R) -> Vec<SamplePair> {
    let mut out: Vec<SamplePair> = real.iter().chain(&synth.pairs).cloned().collect();
    if !synth.pairs.is_empty() {
        out.shuffle(rng);
    }
    out
}

/// What one call to [`GanTrainer::train_step`] did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    /// Composition of the segmenter's effective batch (zero when not fine-tuning).
    pub seg_batch_real: usize,
    pub seg_batch_synthetic: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub adv_g: f64,
    pub cyc: f64,
    pub perc: f64,
    pub l1: f64,
    pub seg_feedback: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmenterTerms {
    pub ce: f64,
    pub focal_tversky: f64,
    pub adv_f: f64,
    pub real: usize,
    pub synthetic: usize,
}

fn finite(v: f64, term: &str, at: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            at: at.into(),
        })
    }
}

/// Runs Phase-2 steps under a fixed configuration.
pub struct GanTrainer {
    pub cfg: TrainConfig,
    extractor: Option<Box<dyn FeatureExtractor>>,
}

impl GanTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let extractor = if cfg.gan_loss.lambda_perc > 0.0 {
            cfg.perceptual.build(cfg.gan_loss.lambda_perc)?
        } else {
            None
        };
        Ok(GanTrainer { cfg, extractor })
    }

    fn disc_update(
        disc: &PatchDiscriminator,
        opt: &mut Adam,
        tag: Tag,
        real: &Tensor,
        fake: &Tensor,
        term: &str,
        at: &str,
    ) -> Result<(ParamSet, f64)> {
        let mut g = Graph::new();
        let r = g.input(real.clone());
        let f = g.input(fake.clone());
        let sr = disc.forward_graph(&mut g, Binding::Train(tag), r)?;
        let sf = disc.forward_graph(&mut g, Binding::Train(tag), f)?;
        let lr = mse_term(&mut g, sr, 1.0);
        let lf = mse_term(&mut g, sf, 0.0);
        let total = g.weighted_sum(&[(lr, 1.0), (lf, 1.0)]);
        let value = finite(g.scalar(total), term, at)?;
        let mut params = disc.params.clone();
        let grads = g.backward(total).for_set(tag, &params);
        opt.update(&mut params, &grads);
        Ok((params, value))
    }

    /// LSGAN update of the image discriminator on real images vs generated ones.
    pub fn disc_image_phase(&self, state: &mut CycleState, images: &Tensor, fake: &Tensor, at: &str) -> Result<f64> {
        let (params, v) = Self::disc_update(
            &state.disc_image,
            &mut state.opt_disc_image,
            DISC_IMAGE_TAG,
            images,
            fake,
            "adv_d_image",
            at,
        )?;
        state.disc_image.params = params;
        Ok(v)
    }

    /// LSGAN update of the mask discriminator on real masks vs segmenter probabilities.
    pub fn disc_mask_phase(&self, state: &mut CycleState, masks: &Tensor, fake: &Tensor, at: &str) -> Result<f64> {
        let (params, v) = Self::disc_update(
            &state.disc_mask,
            &mut state.opt_disc_mask,
            DISC_MASK_TAG,
            masks,
            fake,
            "adv_d_mask",
            at,
        )?;
        state.disc_mask.params = params;
        Ok(v)
    }

    /// Generator update: adversarial, cycle, perceptual, L1 and segmentation
    /// feedback. The segmenter is frozen but passes gradients through.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_phase(
        &self,
        state: &mut CycleState,
        images: &Tensor,
        masks: &Tensor,
        z: &Tensor,
        noise_seed: u64,
        seg_prob: &Tensor,
        at: &str,
    ) -> Result<GeneratorTerms> {
        let w = &self.cfg.gan_loss;
        let mut g = Graph::new();
        let m = g.input(masks.clone());
        let mut nrng = rand::SeedableRng::seed_from_u64(noise_seed);
        let fake = state
            .gen
            .forward_graph(&mut g, Binding::Train(GEN_TAG), m, z, Some(&mut nrng))?;
        let score = state.disc_image.forward_graph(&mut g, Binding::Frozen, fake)?;
        let adv = mse_term(&mut g, score, 1.0);
        let mut terms = vec![(adv, 1.0)];
        let mut out = GeneratorTerms {
            adv_g: g.scalar(adv),
            ..Default::default()
        };

        let need_rec = w.lambda_cyc > 0.0 || self.cfg.seg_feedback;
        let rec = if need_rec {
            let (logits, _) = state.seg.forward_graph(&mut g, Binding::Frozen, fake, GateMode::Learned)?;
            Some(g.sigmoid(logits))
        } else {
            None
        };
        if let (true, Some(rec)) = (w.lambda_cyc > 0.0, rec) {
            // mask -> image -> mask
            let c1 = l1_term(&mut g, rec, masks)?;
            // image -> mask -> image, same latent and noise
            let fm = g.input(seg_prob.clone());
            let mut nrng2: ChaCha8Rng = rand::SeedableRng::seed_from_u64(noise_seed);
            let rec_img = state
                .gen
                .forward_graph(&mut g, Binding::Train(GEN_TAG), fm, z, Some(&mut nrng2))?;
            let c2 = l1_term(&mut g, rec_img, images)?;
            out.cyc = g.scalar(c1) + g.scalar(c2);
            terms.push((c1, w.lambda_cyc));
            terms.push((c2, w.lambda_cyc));
        }
        if let (true, Some(ex)) = (w.lambda_perc > 0.0, self.extractor.as_deref()) {
            let p = perceptual_term(&mut g, ex, fake, images)?;
            out.perc = g.scalar(p);
            terms.push((p, w.lambda_perc));
        }
        if w.lambda_l1 > 0.0 {
            let l = l1_term(&mut g, fake, images)?;
            out.l1 = g.scalar(l);
            terms.push((l, w.lambda_l1));
        }
        if let (true, Some(rec)) = (self.cfg.seg_feedback, rec) {
            let (fb, _, _) = seg_loss_term(&mut g, rec, masks, &self.cfg.tversky, &self.cfg.seg_loss)?;
            out.seg_feedback = g.scalar(fb);
            terms.push((fb, 1.0));
        }
        let total = g.weighted_sum(&terms);
        for (name, v) in [
            ("adv_g", out.adv_g),
            ("cyc", out.cyc),
            ("perc", out.perc),
            ("l1", out.l1),
            ("seg_feedback", out.seg_feedback),
        ] {
            finite(v, name, at)?;
        }
        let grads = g.backward(total).for_set(GEN_TAG, &state.gen.params);
        state.opt_gen.update(&mut state.gen.params, &grads);
        Ok(out)
    }

    /// Segmenter update on real ∪ synthetic pairs, plus its adversarial term
    /// against the mask discriminator on real images.
    pub fn segmenter_phase<R: RngCore + ?Sized>(
        &self,
        state: &mut CycleState,
        real: &[SamplePair],
        rng: &mut R,
        at: &str,
    ) -> Result<SegmenterTerms> {
        let masks: Vec<Tensor> = real.iter().map(|p| p.mask.clone()).collect();
        let synth = make_synthetic_batch(&masks, &state.gen, rng, state.iteration)?;
        let eff = effective_batch(real, &synth, rng);
        let (x_eff, m_eff) = batch_tensors(&eff)?;
        let (x_real, _) = batch_tensors(real)?;
        let bind = Binding::Train(SEG_TAG);

        let mut g = Graph::new();
        let x = g.input(x_eff);
        let (logits, _) = state.seg.forward_graph(&mut g, bind, x, GateMode::Learned)?;
        let prob = g.sigmoid(logits);
        let (seg_loss, ce, ft) = seg_loss_term(&mut g, prob, &m_eff, &self.cfg.tversky, &self.cfg.seg_loss)?;
        let xr = g.input(x_real);
        let (lr, _) = state.seg.forward_graph(&mut g, bind, xr, GateMode::Learned)?;
        let pr = g.sigmoid(lr);
        let score = state.disc_mask.forward_graph(&mut g, Binding::Frozen, pr)?;
        let adv = mse_term(&mut g, score, 1.0);
        let total = g.weighted_sum(&[(seg_loss, 1.0), (adv, 1.0)]);
        let out = SegmenterTerms {
            ce: finite(ce, "ce", at)?,
            focal_tversky: finite(ft, "focal_tversky", at)?,
            adv_f: finite(g.scalar(adv), "adv_f", at)?,
            real: eff.iter().filter(|p| p.source == PairSource::Real).count(),
            synthetic: eff.iter().filter(|p| p.source != PairSource::Real).count(),
        };
        let grads = g.backward(total).for_set(SEG_TAG, &state.seg.params);
        state.opt_seg.update(&mut state.seg.params, &grads);
        Ok(out)
    }

    /// Image discriminator, mask discriminator, generator, then (optionally) segmenter.
    pub fn train_step<R: RngCore + ?Sized>(
        &self,
        state: &mut CycleState,
        batch: &[SamplePair],
        rng: &mut R,
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::param("batch", "training batch is empty"));
        }
        let at = format!("iteration {}", state.iteration);
        let (images, masks) = batch_tensors(batch)?;
        let z = Tensor::randn(&[batch.len(), state.gen.config.d_z], rng);
        let noise_seed = rng.next_u64();
        let fake = state.gen.generate_batch(&masks, &z, NoiseMode::Seeded(noise_seed))?;
        let seg_prob = state.seg.logits_batch(&images)?.map(crate::tensor::sigmoid);

        let adv_d_image = self.disc_image_phase(state, &images, &fake, &at)?;
        let adv_d_mask = self.disc_mask_phase(state, &masks, &seg_prob, &at)?;
        let gen = self.generator_phase(state, &images, &masks, &z, noise_seed, &seg_prob, &at)?;
        let seg = if self.cfg.seg_finetune {
            self.segmenter_phase(state, batch, rng, &at)?
        } else {
            SegmenterTerms::default()
        };

        let parts = GanParts {
            adv_g: gen.adv_g,
            adv_f: seg.adv_f,
            adv_d_image,
            adv_d_mask,
            cyc: gen.cyc,
            perc: gen.perc,
            l1: gen.l1,
            seg_feedback: gen.seg_feedback,
            ce: seg.ce,
            focal_tversky: seg.focal_tversky,
        };
        let feedback_weight = if self.cfg.seg_feedback { 1.0 } else { 0.0 };
        let loss = total_gan_objective(&parts, &self.cfg.gan_loss, &self.cfg.seg_loss, feedback_weight)?;
        let record = StepRecord {
            iteration: state.iteration,
            loss,
            seg_batch_real: seg.real,
            seg_batch_synthetic: seg.synthetic,
        };
        state.iteration += 1;
        Ok(record)
    }
}

/// One training step with a trainer built from `cfg`.
pub fn train_step<R: RngCore + ?Sized>(
    state: &mut CycleState,
    batch: &[SamplePair],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    GanTrainer::new(cfg.clone())?.train_step(state, batch, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub val_dice: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub state: CycleState,
    /// Segmenter with the best validation Dice seen at an epoch boundary.
    pub best_seg: SegModelState,
    pub best_epoch: Option<usize>,
    pub steps: Vec<StepRecord>,
    pub history: Vec<GanEpochRecord>,
}

pub fn train_sagegan(split: &DatasetSplit, seg: SegModelState, cfg: &TrainConfig) -> Result<GanOutcome> {
    let state = CycleState::new(seg, cfg)?;
    train_sagegan_with(state, split, cfg, &mut |_, _, _| Ok(()))
}

/// Called after each Phase-2 epoch with its summary, its steps and the current state.
pub type GanEpochHook<'a> = dyn FnMut(&GanEpochRecord, &[StepRecord], &CycleState) -> Result<()> + 'a;

/// Runs `cfg.epochs_gan` epochs from `state`, calling `on_epoch` after each
/// with the epoch summary and that epoch's step records.
pub fn train_sagegan_with(
    state: CycleState,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    on_epoch: &mut GanEpochHook<'_>,
) -> Result<GanOutcome> {
    let trainer = GanTrainer::new(cfg.clone())?;
    if split.train.is_empty() {
        return Err(Error::param("split.train", "training set is empty"));
    }
    let size = state.seg.config.input_size;
    let train = fit_pairs(&split.train, size)?;
    let val = fit_pairs(&split.val, size)?;
    // without a validation set, model selection falls back to the training pairs
    let select_on = if val.is_empty() { &train } else { &val };
    let mut rng = stream_rng(cfg.seed, Stream::Gan);
    let mut state = state;
    let mut best_seg = state.seg.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut steps = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs_gan);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs_gan {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        let first_step = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SamplePair> = chunk.iter().map(|&i| augment(&train[i], &cfg.augment, &mut rng)).collect();
            let rec = trainer.train_step(&mut state, &batch, &mut rng)?;
            epoch_losses.push(rec.loss);
            steps.push(rec);
        }
        let loss = LossBreakdown::mean(&epoch_losses).expect("at least one batch");
        let report = evaluate_dataset(&state.seg, select_on, cfg.threshold)?;
        if report.aggregate.dice > best_score {
            best_score = report.aggregate.dice;
            best_seg = state.seg.clone();
            best_epoch = Some(epoch);
        }
        let (val_dice, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            (Some(report.aggregate.dice), Some(report.aggregate.f1))
        };
        let record = GanEpochRecord {
            epoch,
            steps: epoch_losses.len(),
            loss,
            val_dice,
            val_f1,
        };
        log::info!("gan epoch {epoch}: total {:.5} val dice {:?}", loss.total, val_dice);
        on_epoch(&record, &steps[first_step..], &state)?;
        history.push(record);
    }
    Ok(GanOutcome {
        state,
        best_seg,
        best_epoch,
        steps,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::disc_pairs;
    use rand::SeedableRng;

    pub(crate) fn toy_cfg() -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        cfg.unet = UNetConfig {
            depth: 2,
            base_channels: 2,
            f_int_ratio: 0.5,
            input_size: (16, 16),
        };
        cfg.generator = GenConfig {
            depth: 2,
            base_channels: 2,
            d_z: 4,
            d_w: 4,
            ..Default::default()
        };
        cfg.disc = DiscConfig { base_channels: 2 };
        cfg
    }

    #[test]
    fn synthetic_batch_pairs_and_determinism() {
        let cfg = toy_cfg();
        let gen = GenModelState::new(cfg.generator.clone(), 1).unwrap();
        let masks: Vec<Tensor> = disc_pairs(3, 16, 5).into_iter().map(|p| p.mask).collect();
        let a = make_synthetic_batch(&masks, &gen, &mut ChaCha8Rng::seed_from_u64(1), 0).unwrap();
        let b = make_synthetic_batch(&masks, &gen, &mut ChaCha8Rng::seed_from_u64(1), 0).unwrap();
        let c = make_synthetic_batch(&masks, &gen, &mut ChaCha8Rng::seed_from_u64(2), 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 3);
        for (p, m) in a.pairs.iter().zip(&masks) {
            assert_eq!(&p.mask, m);
        }
        assert_ne!(a.pairs[0].image, c.pairs[0].image);
    }

    #[test]
    fn effective_batch_union() {
        let real = disc_pairs(4, 16, 1);
        let synth = SyntheticBatch {
            pairs: disc_pairs(4, 16, 2)
                .into_iter()
                .map(|p| SamplePair {
                    source: PairSource::Synthetic { iteration: 0 },
                    ..p
                })
                .collect(),
            iteration: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eff = effective_batch(&real, &synth, &mut rng);
        assert_eq!(eff.len(), 8);
        assert_eq!(eff.iter().filter(|p| p.source == PairSource::Real).count(), 4);
        let empty = SyntheticBatch {
            pairs: vec![],
            iteration: 0,
        };
        assert_eq!(effective_batch(&real, &empty, &mut rng), real);
    }

    #[test]
    fn disabled_terms_record_zero() {
        let mut cfg = toy_cfg();
        cfg.gan_loss.lambda_cyc = 0.0;
        cfg.gan_loss.lambda_perc = 0.0;
        cfg.gan_loss.lambda_l1 = 0.0;
        cfg.seg_feedback = false;
        cfg.seg_finetune = false;
        let seg = SegModelState::new(cfg.unet.clone(), 0).unwrap();
        let mut state = CycleState::new(seg, &cfg).unwrap();
        let before = state.checksums();
        let rec = train_step(&mut state, &disc_pairs(2, 16, 3), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = rec.loss.parts;
        assert_eq!((p.cyc, p.perc, p.l1, p.seg_feedback, p.ce, p.focal_tversky), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(p.adv_g > 0.0);
        let after = state.checksums();
        assert_eq!(before[1], after[1], "frozen segmenter must not move");
        assert_ne!(before[0], after[0]);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn cycle_checkpoint_round_trip() {
        let cfg = toy_cfg();
        let seg = SegModelState::new(cfg.unet.clone(), 0).unwrap();
        let mut state = CycleState::new(seg, &cfg).unwrap();
        train_step(&mut state, &disc_pairs(2, 16, 3), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = state.to_container().unwrap().to_bytes();
        let c = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        let back = CycleState::from_container(&c, Path::new("mem")).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }
}
