//! Phase 1 on four memorizable disc pairs: overfit a small attention U-Net
//! and report the training-set Dice.
//!
//! cargo run --release --example pretrain

use sagegan::data::{AugmentConfig, DatasetSplit};
use sagegan::metrics::evaluate_dataset;
use sagegan::toy::disc_pairs;
use sagegan::unet::{pretrain_segmenter, UNetConfig};
use sagegan::TrainConfig;

fn main() -> anyhow::Result<()> {
    let pairs = disc_pairs(4, 64, 7);
    let split = DatasetSplit {
        train: pairs.clone(),
        val: Vec::new(),
        seed: 0,
        ratio: 1.0,
    };
    let cfg = TrainConfig {
        epochs_pretrain: 200,
        batch_size: 4,
        lr_seg: 3e-3,
        beta1: 0.9,
        augment: AugmentConfig::none(),
        unet: UNetConfig {
            depth: 3,
            base_channels: 8,
            input_size: (64, 64),
            ..UNetConfig::default()
        },
        ..TrainConfig::default()
    };
    let t = std::time::Instant::now();
    let out = pretrain_segmenter(&split, &cfg)?;
    for r in out.history.iter().step_by(20) {
        println!("epoch {:3}  loss {:.4}", r.epoch, r.loss.total);
    }
    let report = evaluate_dataset(&out.last, &pairs, cfg.threshold)?;
    println!(
        "{} steps in {:.1?}; training dice {:.4}, f1 {:.4}",
        out.history.iter().map(|r| r.steps).sum::<usize>(),
        t.elapsed(),
        report.aggregate.dice,
        report.aggregate.f1
    );
    Ok(())
}
