//! Phase-1 and Phase-2 training behaviour on toy data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagegan::data::{AugmentConfig, DatasetSplit, SamplePair};
use sagegan::disc::DiscConfig;
use sagegan::losses::l1_loss;
use sagegan::metrics::evaluate_dataset;
use sagegan::style::NoiseMode;
use sagegan::tensor::sigmoid;
use sagegan::toy::disc_pairs;
use sagegan::trainer::{train_sagegan, train_step, CycleState};
use sagegan::unet::{batch_tensors, pretrain_segmenter, SegModelState, UNetConfig};
use sagegan::{split_dataset, GenConfig, Tensor, TrainConfig};

fn small_cfg(size: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr_seg: 3e-3,
        lr_seg_finetune: Some(1e-3),
        lr_gen: 1e-3,
        lr_disc: 1e-3,
        beta1: 0.9,
        augment: AugmentConfig::none(),
        unet: UNetConfig {
            depth: 3,
            base_channels: 8,
            input_size: (size, size),
            ..UNetConfig::default()
        },
        generator: GenConfig {
            depth: 3,
            base_channels: 8,
            d_z: 16,
            d_w: 16,
            ..GenConfig::default()
        },
        disc: DiscConfig { base_channels: 8 },
        ..TrainConfig::default()
    }
}

fn train_only(pairs: &[SamplePair]) -> DatasetSplit {
    DatasetSplit {
        train: pairs.to_vec(),
        val: Vec::new(),
        seed: 0,
        ratio: 1.0,
    }
}

#[test]
fn phase2_finetuning_memorizes_four_pairs() {
    let pairs = disc_pairs(4, 64, 7);
    let split = train_only(&pairs);
    let cfg = TrainConfig {
        epochs_pretrain: 40,
        epochs_gan: 100,
        ..small_cfg(64)
    };
    let pre = pretrain_segmenter(&split, &cfg).unwrap();
    let out = train_sagegan(&split, pre.last, &cfg).unwrap();
    assert!(out.steps.len() >= 100);
    let dice = evaluate_dataset(&out.state.seg, &pairs, cfg.threshold).unwrap().aggregate.dice;
    assert!(dice >= 0.9, "training dice {dice}");
}

#[test]
fn two_epochs_record_full_breakdowns_and_val_metrics() {
    let pairs = disc_pairs(8, 32, 2);
    let cfg = TrainConfig {
        epochs_gan: 2,
        batch_size: 2,
        augment: AugmentConfig::default(),
        ..small_cfg(32)
    };
    let split = split_dataset(&pairs, 0.75, cfg.seed).unwrap();
    let seg = SegModelState::new(cfg.unet.clone(), 1).unwrap();
    let out = train_sagegan(&split, seg, &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    for r in &out.history {
        assert_eq!(r.steps, 3);
        assert!(r.val_dice.is_some() && r.val_f1.is_some());
        r.loss.ensure_finite("epoch").unwrap();
        assert!(r.loss.parts.named().iter().all(|(_, v)| *v >= 0.0));
    }
    assert_eq!(out.state.iteration, 6);
    assert!(out.best_epoch.is_some());
}

#[test]
fn zero_epochs_returns_the_initialized_state() {
    let pairs = disc_pairs(4, 32, 2);
    let cfg = TrainConfig {
        epochs_gan: 0,
        ..small_cfg(32)
    };
    let seg = SegModelState::new(cfg.unet.clone(), 1).unwrap();
    let fresh = CycleState::new(seg.clone(), &cfg).unwrap();
    let out = train_sagegan(&train_only(&pairs), seg, &cfg).unwrap();
    assert!(out.history.is_empty() && out.steps.is_empty());
    assert_eq!(out.state, fresh);
}

#[test]
fn phase2_is_deterministic() {
    let pairs = disc_pairs(4, 32, 2);
    let cfg = TrainConfig {
        epochs_gan: 2,
        batch_size: 2,
        augment: AugmentConfig::default(),
        ..small_cfg(32)
    };
    let run = || {
        let seg = SegModelState::new(cfg.unet.clone(), 1).unwrap();
        train_sagegan(&train_only(&pairs), seg, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.state, b.state);
}

/// The recorded cycle term equals the two reconstructions recomputed from
/// the pre-step networks with the step's latent code and noise seed.
#[test]
fn cycle_term_wires_both_directions() {
    let pairs = disc_pairs(2, 32, 4);
    let mut cfg = small_cfg(32);
    cfg.seg_finetune = false;
    let seg = SegModelState::new(cfg.unet.clone(), 1).unwrap();
    let mut state = CycleState::new(seg, &cfg).unwrap();
    let before = state.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut replay = rng.clone();
    let rec = train_step(&mut state, &pairs, &cfg, &mut rng).unwrap();

    let z = Tensor::randn(&[2, cfg.generator.d_z], &mut replay);
    let seed = rand::RngCore::next_u64(&mut replay);
    let (images, masks) = batch_tensors(&pairs).unwrap();
    let fake = before.gen.generate_batch(&masks, &z, NoiseMode::Seeded(seed)).unwrap();
    let rec_mask = before.seg.logits_batch(&fake).unwrap().map(sigmoid);
    let seg_prob = before.seg.logits_batch(&images).unwrap().map(sigmoid);
    let rec_image = before.gen.generate_batch(&seg_prob, &z, NoiseMode::Seeded(seed)).unwrap();
    let expected = l1_loss(&rec_mask, &masks).unwrap() + l1_loss(&rec_image, &images).unwrap();
    assert!((rec.loss.parts.cyc - expected).abs() < 1e-12, "{} vs {expected}", rec.loss.parts.cyc);
}
