//! Attention heatmaps and overlays for a briefly trained segmenter, written
//! as PNGs into a directory given on the command line (default `overlays`).
//!
//! cargo run --release --example attention_overlay -- /tmp/overlays

use std::path::PathBuf;

use sagegan::data::{AugmentConfig, DatasetSplit};
use sagegan::toy::disc_pairs;
use sagegan::unet::pretrain_segmenter;
use sagegan::viz::{render_attention_overlay, render_heatmap, Colormap, DEFAULT_ALPHA};
use sagegan::{TrainConfig, UNetConfig};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "overlays".into()));
    std::fs::create_dir_all(&out)?;
    let pairs = disc_pairs(4, 64, 7);
    let cfg = TrainConfig {
        epochs_pretrain: 60,
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
    let split = DatasetSplit {
        train: pairs.clone(),
        val: Vec::new(),
        seed: 0,
        ratio: 1.0,
    };
    let seg = pretrain_segmenter(&split, &cfg)?.last;

    let image = &pairs[0].image;
    let (_, maps) = seg.forward(image)?;
    for map in &maps {
        let o = render_attention_overlay(image, &maps, map.gate_index, Colormap::CoolWarm, DEFAULT_ALPHA)?;
        o.blend.save(out.join(format!("gate{}_overlay.png", map.gate_index)))?;
        render_heatmap(&o.heat, Colormap::Jet).save(out.join(format!("gate{}_heat.png", map.gate_index)))?;
        println!(
            "gate {} at {:?}: alpha in [{:.3}, {:.3}]",
            map.gate_index,
            map.alpha.shape(),
            map.alpha.min(),
            map.alpha.max()
        );
    }
    println!("wrote overlays to {}", out.display());
    Ok(())
}
