//! Dataset ingestion: write a toy `images/` + `masks/` layout, load it back,
//! split it reproducibly, persist the manifest and run the augmentations.
//!
//! cargo run --example data_pipeline

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagegan::data::{augment, load_dataset, preprocess, split_dataset, AugmentConfig, SplitManifest};
use sagegan::toy::{disc_pairs, write_dataset};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let root = dir.path().join("dataset");
    write_dataset(&root, &disc_pairs(10, 48, 1))?;

    let pairs = load_dataset(&root)?;
    println!("loaded {} pairs of {:?}", pairs.len(), pairs[0].size());

    let split = split_dataset(&pairs, 0.8, 42)?;
    println!("split 0.8 -> {} train / {} val", split.train.len(), split.val.len());
    let manifest_path = dir.path().join("split.txt");
    split.manifest().save(&manifest_path)?;
    print!("{}", std::fs::read_to_string(&manifest_path)?);
    let again = SplitManifest::load(&manifest_path)?.apply(&pairs)?;
    assert_eq!(again.train, split.train);

    let small = preprocess(&pairs[0], (32, 32))?;
    println!("preprocessed to {:?}, mask foreground {}", small.size(), small.mask.sum());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AugmentConfig::default();
    for i in 0..3 {
        let a = augment(&small, &cfg, &mut rng);
        a.validate()?;
        println!(
            "augmented #{i}: image mean {:.3} (was {:.3}), mask foreground {}",
            a.image.mean(),
            small.image.mean(),
            a.mask.sum()
        );
    }
    Ok(())
}
