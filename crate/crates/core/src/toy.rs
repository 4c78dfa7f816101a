//! Synthetic disc fixtures: a memorizable stand-in for SEM image/mask pairs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_gray_png, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n` pairs of `size × size` images with one to three bright discs on a
/// darker noisy background; the mask marks the disc pixels.
pub fn disc_pairs(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| disc_pair(&format!("disc{i:03}"), size, &mut rng)).collect()
}

fn disc_pair(id: &str, size: usize, rng: &mut ChaCha8Rng) -> SamplePair {
    let s = size as f64;
    let count = rng.random_range(1..=3);
    let discs: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            let r = rng.random_range(0.12 * s..0.25 * s);
            (rng.random_range(r..s - r), rng.random_range(r..s - r), r)
        })
        .collect();
    let noise = Tensor::randn(&[size, size], rng);
    let mut image = Tensor::zeros(&[size, size]);
    let mut mask = Tensor::zeros(&[size, size]);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = discs
                .iter()
                .any(|(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r);
            let base = if inside { 0.75 } else { 0.25 };
            image.set2(y, x, (base + 0.05 * noise.get2(y, x)).clamp(0.0, 1.0));
            mask.set2(y, x, f64::from(u8::from(inside)));
        }
    }
    SamplePair::new(id, image, mask).expect("fixture satisfies pair invariants")
}

/// Writes `pairs` in the on-disk dataset layout under `root`.
pub fn write_dataset(root: &Path, pairs: &[SamplePair]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for p in pairs {
        save_gray_png(&root.join("images").join(format!("{}.png", p.id)), &p.image)?;
        save_gray_png(&root.join("masks").join(format!("{}.png", p.id)), &p.mask)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid_and_seeded() {
        let a = disc_pairs(3, 32, 1);
        assert_eq!(a, disc_pairs(3, 32, 1));
        for p in &a {
            p.validate().unwrap();
            let fg = p.mask.sum();
            assert!(fg > 0.0 && fg < 32.0 * 32.0);
        }
    }
}
