//! Segmentation and adversarial losses on small hand-checkable inputs.
//!
//! cargo run --example losses

use sagegan::losses::{
    adversarial_losses, cross_entropy_loss, cycle_consistency_loss, focal_tversky_loss, l1_loss, total_gan_objective,
    total_seg_loss, tversky_index, GanLossWeights, GanParts, SegLossWeights, TverskyParams,
};
use sagegan::Tensor;

fn main() -> anyhow::Result<()> {
    let pred = Tensor::from_vec(&[2, 2], vec![0.9, 0.8, 0.3, 0.1])?;
    let target = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0])?;
    let tv = TverskyParams::default();
    println!("cross entropy   {:.5}", cross_entropy_loss(&pred, &target)?);
    println!("tversky index   {:.5}", tversky_index(&pred, &target, &tv)?);
    println!("focal tversky   {:.5}", focal_tversky_loss(&pred, &target, &tv)?);
    let seg = total_seg_loss(&pred, &target, &tv, &SegLossWeights::default())?;
    println!("seg total       {:.5} = {:?}", seg.total, (seg.parts.ce, seg.parts.focal_tversky));

    let (g, d) = adversarial_losses(&Tensor::full(&[4], 0.8), &Tensor::full(&[4], 0.3));
    println!("lsgan           D {d:.4}, G {g:.4}");

    let rec = Tensor::from_vec(&[2, 2], vec![0.8, 0.9, 0.2, 0.0])?;
    println!("cycle           {:.4}", cycle_consistency_loss(&target, &rec, &pred, &pred)?);
    println!("l1              {:.4}", l1_loss(&pred, &target)?);

    let parts = GanParts {
        adv_g: 0.4,
        adv_d_image: 0.5,
        cyc: 0.2,
        perc: 0.1,
        l1: 0.05,
        ..Default::default()
    };
    let b = total_gan_objective(&parts, &GanLossWeights::default(), &SegLossWeights::default(), 1.0)?;
    for (name, v) in b.parts.named() {
        println!("  {name:<14}{v:.3}");
    }
    println!("gan total       {:.4}", b.total);
    Ok(())
}
