//! Dice, precision, recall and F1 on hand-made masks, then a dataset report.
//!
//! cargo run --release --example metrics

use sagegan::metrics::{confusion_counts, dice_from_counts, evaluate_dataset, f1_score, precision_recall, relative_improvement_pct};
use sagegan::toy::disc_pairs;
use sagegan::{SegModelState, Tensor, UNetConfig};

fn main() -> anyhow::Result<()> {
    let pred = Tensor::from_vec(&[2, 4], vec![1., 1., 1., 1., 1., 0., 0., 0.])?;
    let gt = Tensor::from_vec(&[2, 4], vec![1., 1., 1., 0., 1., 1., 0., 0.])?;
    let c = confusion_counts(&pred, &gt)?;
    let (p, r) = precision_recall(&c);
    println!("{c:?}");
    println!("dice {:.4}  f1 {:.4}  precision {p:.4}  recall {r:.4}", dice_from_counts(&c, 0.0), f1_score(&c, 1.0)?);

    let empty = Tensor::zeros(&[2, 2]);
    println!("empty vs empty dice: {}", dice_from_counts(&confusion_counts(&empty, &empty)?, 0.0));

    // an untrained model on toy data, to show the report layout
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 4,
        input_size: (32, 32),
        ..UNetConfig::default()
    };
    let report = evaluate_dataset(&SegModelState::new(cfg, 0)?, &disc_pairs(3, 32, 1), 0.5)?;
    println!("{}", report.to_json()?);

    println!(
        "headline improvements: dice {:.2}%, f1 {:.2}%",
        relative_improvement_pct(0.869, 0.932),
        relative_improvement_pct(0.875, 0.956)
    );
    Ok(())
}
