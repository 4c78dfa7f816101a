//! A single additive attention gate: coefficients, the gated skip features,
//! and the degenerate cases.
//!
//! cargo run --example attention_gate

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagegan::unet::{attention_gate, AttentionGateParams, GateMode, SegModelState, UNetConfig};
use sagegan::Tensor;

fn main() -> anyhow::Result<()> {
    // scalar case: f = relu(0.5 * 4 + 1 * 1) = 3, alpha = sigmoid(3)
    let p = AttentionGateParams {
        w_x: Tensor::from_vec(&[1, 1], vec![0.5])?,
        w_g: Tensor::from_vec(&[1, 1], vec![1.0])?,
        psi: Tensor::from_vec(&[1], vec![1.0])?,
        b_psi: 0.0,
    };
    let x = Tensor::from_vec(&[1, 1, 1], vec![4.0])?;
    let g = Tensor::from_vec(&[1, 1, 1], vec![1.0])?;
    let (xhat, map) = attention_gate(&x, &g, &p)?;
    println!("scalar gate: alpha {:.5}, xhat {:.5}", map.alpha.data()[0], xhat.data()[0]);

    // encoder features at 8x8 gated by a coarser 4x4 signal
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = AttentionGateParams::random(4, 8, 2, &mut rng);
    let x = Tensor::randn(&[4, 8, 8], &mut rng);
    let g = Tensor::randn(&[8, 4, 4], &mut rng);
    let (_, map) = attention_gate(&x, &g, &p)?;
    println!("random gate: alpha in [{:.3}, {:.3}], mean {:.3}", map.alpha.min(), map.alpha.max(), map.alpha.mean());

    // an identity gate reduces the network to a plain skip-connection U-Net
    let cfg = UNetConfig {
        depth: 3,
        base_channels: 4,
        input_size: (32, 32),
        ..UNetConfig::default()
    };
    let net = SegModelState::new(cfg, 1)?;
    let image = Tensor::uniform(&[32, 32], 1.0, &mut rng).map(f64::abs);
    let (gated, maps) = net.forward_with_mode(&image, GateMode::Identity)?;
    let plain = net.forward_plain(&image)?;
    println!(
        "identity gates match the gate-free network: {} ({} gates)",
        gated == plain,
        maps.len()
    );
    Ok(())
}
