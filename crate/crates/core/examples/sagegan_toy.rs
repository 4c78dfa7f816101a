//! Both training phases on four memorizable disc pairs: a short Phase-1
//! pretraining, then Phase 2 with segmenter fine-tuning on real plus
//! synthetic pairs.
//!
//! cargo run --release --example sagegan_toy

use sagegan::data::{AugmentConfig, DatasetSplit};
use sagegan::disc::DiscConfig;
use sagegan::metrics::evaluate_dataset;
use sagegan::toy::disc_pairs;
use sagegan::trainer::train_sagegan;
use sagegan::unet::{pretrain_segmenter, UNetConfig};
use sagegan::{GenConfig, TrainConfig};

fn main() -> anyhow::Result<()> {
    let pairs = disc_pairs(4, 64, 7);
    let split = DatasetSplit {
        train: pairs.clone(),
        val: Vec::new(),
        seed: 0,
        ratio: 1.0,
    };
    // a deliberately short pretraining leaves room for Phase 2 to improve
    let cfg = TrainConfig {
        epochs_pretrain: 40,
        epochs_gan: 100,
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
            input_size: (64, 64),
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
    };
    cfg.validate()?;

    let t = std::time::Instant::now();
    let pre = pretrain_segmenter(&split, &cfg)?;
    let before = evaluate_dataset(&pre.last, &pairs, cfg.threshold)?.aggregate.dice;
    println!("phase 1: {} steps, training dice {before:.4} ({:.1?})", pre.history.len(), t.elapsed());

    let t = std::time::Instant::now();
    let out = train_sagegan(&split, pre.last, &cfg)?;
    for s in out.steps.iter().step_by(10) {
        let p = &s.loss.parts;
        println!(
            "step {:3}  D_img {:.3}  D_mask {:.3}  G {:.3}  cyc {:.3}  ce {:.3}  ftv {:.3}  batch {}+{}",
            s.iteration, p.adv_d_image, p.adv_d_mask, p.adv_g, p.cyc, p.ce, p.focal_tversky, s.seg_batch_real, s.seg_batch_synthetic
        );
    }
    let after = evaluate_dataset(&out.state.seg, &pairs, cfg.threshold)?.aggregate.dice;
    println!("phase 2: {} steps, training dice {after:.4} ({:.1?})", out.steps.len(), t.elapsed());
    Ok(())
}
