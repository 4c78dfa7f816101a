//! Property tests for the data, loss, metric, gate and style invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagegan::data::{augment, binarize, PairSource, crop_and_resize, flip_horizontal, flip_vertical, split_dataset, AugmentConfig, SamplePair};
use sagegan::losses::{
    cross_entropy_loss, focal_tversky_from_index, focal_tversky_loss, l1_loss, mse_to_target, total_gan_objective,
    tversky_index, GanLossWeights, GanParts, SegLossWeights, TverskyParams,
};
use sagegan::metrics::{confusion_counts, dice_from_counts, dice_score, f1_score, precision_recall, ConfusionCounts, ImageScores, SegReport};
use sagegan::style::{adain, inject_noise};
use sagegan::unet::{attention_gate, AttentionGateParams};
use sagegan::Tensor;

fn plane(h: usize, w: usize, values: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[h, w], values).unwrap()
}

/// Two same-shaped binary masks.
fn mask_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(prop::bool::ANY, h * w),
            prop::collection::vec(prop::bool::ANY, h * w),
        )
            .prop_map(move |(a, b)| {
                let t = |v: Vec<bool>| plane(h, w, v.into_iter().map(|x| f64::from(u8::from(x))).collect());
                (t(a), t(b))
            })
    })
}

/// An image in [0, 1] with a soft (unbinarized) mask of the same size.
fn soft_pair() -> impl Strategy<Value = SamplePair> {
    (2usize..20, 2usize..20).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..=1.0, h * w),
            prop::collection::vec(0.0f64..=1.0, h * w),
        )
            .prop_map(move |(img, m)| SamplePair {
                id: "p".into(),
                image: plane(h, w, img),
                mask: plane(h, w, m),
                source: PairSource::Real,
            })
    })
}

fn binarized(p: &SamplePair) -> SamplePair {
    SamplePair {
        mask: binarize(&p.mask),
        ..p.clone()
    }
}

fn dummy_pairs(n: usize) -> Vec<SamplePair> {
    (0..n)
        .map(|i| SamplePair::new(format!("p{i:03}"), Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_deterministic_partition(n in 2usize..80, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let pairs = dummy_pairs(n);
        let s = split_dataset(&pairs, ratio, seed).unwrap();
        prop_assert_eq!(s.train.len(), (ratio * n as f64 + 1e-9).floor() as usize);
        let mut ids: Vec<String> = s.train.iter().chain(&s.val).map(|p| p.id.clone()).collect();
        ids.sort();
        let expected: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        prop_assert_eq!(ids, expected);
        prop_assert_eq!(split_dataset(&pairs, ratio, seed).unwrap(), s);
    }

    #[test]
    fn flips_and_crops_commute_with_binarization(
        p in soft_pair(),
        frac in 0.3f64..=1.0,
        corner in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        prop_assert_eq!(binarize(&flip_horizontal(&p).mask), flip_horizontal(&binarized(&p)).mask);
        prop_assert_eq!(binarize(&flip_vertical(&p).mask), flip_vertical(&binarized(&p)).mask);
        let (h, w) = p.size();
        let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
        let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
        let top = ((h - ch) as f64 * corner.0) as usize;
        let left = ((w - cw) as f64 * corner.1) as usize;
        prop_assert_eq!(
            crop_and_resize(&p, top, left, ch, cw).mask,
            crop_and_resize(&binarized(&p), top, left, ch, cw).mask
        );
    }

    #[test]
    fn augment_keeps_pairs_valid(
        p in soft_pair(),
        seed in any::<u64>(),
        flip in 0.0f64..=1.0,
        clahe_p in 0.0f64..=1.0,
        crop in 0.5f64..=1.0,
    ) {
        let p = binarized(&p);
        let mut cfg = AugmentConfig { flip_h: flip, flip_v: flip, ..AugmentConfig::default() };
        cfg.clahe.probability = clahe_p;
        cfg.random_crop.fraction = crop;
        let out = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(out.validate().is_ok());
        prop_assert_eq!(out.size(), p.size());
    }

    #[test]
    fn dice_equals_f1_and_is_symmetric((a, b) in mask_pair()) {
        let c = confusion_counts(&a, &b).unwrap();
        let d = dice_from_counts(&c, 0.0);
        prop_assert!((d - f1_score(&c, 1.0).unwrap()).abs() < 1e-12);
        prop_assert_eq!(d, dice_score(&b, &a, 0.0).unwrap());
        let (pr, re) = precision_recall(&c);
        for v in [d, pr, re] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn removing_a_false_positive_never_lowers_dice((a, b) in mask_pair()) {
        let c = confusion_counts(&a, &b).unwrap();
        prop_assume!(c.fp > 0);
        let fixed = ConfusionCounts { fp: c.fp - 1, tn: c.tn + 1, ..c };
        prop_assert!(dice_from_counts(&fixed, 0.0) >= dice_from_counts(&c, 0.0));
    }

    #[test]
    fn report_aggregate_is_row_mean(pairs in prop::collection::vec(mask_pair(), 1..8)) {
        let rows: Vec<ImageScores> = pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ImageScores::from_counts(&i.to_string(), &confusion_counts(a, b).unwrap()))
            .collect();
        let n = rows.len() as f64;
        let r = SegReport::from_rows(rows.clone(), serde_json::Value::Null).unwrap();
        prop_assert!((r.aggregate.dice - rows.iter().map(|x| x.dice).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!((r.aggregate.f1 - rows.iter().map(|x| x.f1).sum::<f64>() / n).abs() < 1e-12);
    }

    #[test]
    fn tversky_at_half_is_dice((a, b) in mask_pair(), smooth in 1e-9f64..1.0) {
        let p = TverskyParams { alpha: 0.5, beta: 0.5, gamma: 1.0, smooth };
        // the Tversky smoothing enters at the tp scale, Dice's at the 2tp scale
        let dice = dice_score(&a, &b, 2.0 * smooth).unwrap();
        prop_assert!((tversky_index(&a, &b, &p).unwrap() - dice).abs() < 1e-9);
    }

    #[test]
    fn focal_tversky_decreases_in_ti(t1 in 0.0f64..1.0, dt in 1e-6f64..1.0, gamma in 0.1f64..4.0) {
        let t2 = (t1 + dt).min(1.0);
        prop_assume!(t2 > t1);
        prop_assert!(focal_tversky_from_index(t2, gamma) < focal_tversky_from_index(t1, gamma));
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_perfect((a, b) in mask_pair(), soft in prop::collection::vec(0.0f64..=1.0, 144)) {
        let (h, w) = a.dims2();
        let p = plane(h, w, soft[..h * w].to_vec());
        let ft = TverskyParams::default();
        prop_assert!(cross_entropy_loss(&p, &b).unwrap() >= 0.0);
        prop_assert!(focal_tversky_loss(&p, &b, &ft).unwrap() >= 0.0);
        prop_assert!(l1_loss(&p, &a).unwrap() >= 0.0);
        prop_assert!(mse_to_target(&p, 1.0) >= 0.0);
        prop_assert!(focal_tversky_loss(&b, &b, &ft).unwrap() < 1e-12);
        prop_assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(mse_to_target(&Tensor::full(&[2, 2], 1.0), 1.0), 0.0);
        // clamped log keeps the perfect-case CE at -ln(1 - eps)
        prop_assert!(cross_entropy_loss(&b, &b).unwrap() < 1e-6);
    }

    #[test]
    fn breakdown_total_is_weighted_sum(
        v in prop::collection::vec(0.0f64..10.0, 10),
        w in prop::collection::vec(0.0f64..5.0, 6),
    ) {
        let parts = GanParts {
            adv_g: v[0], adv_f: v[1], adv_d_image: v[2], adv_d_mask: v[3], cyc: v[4],
            perc: v[5], l1: v[6], seg_feedback: v[7], ce: v[8], focal_tversky: v[9],
        };
        let gw = GanLossWeights { lambda_cyc: w[0], lambda_perc: w[1], lambda_l1: w[2] };
        let sw = SegLossWeights { lambda1: w[3], lambda2: w[4], ..Default::default() };
        let b = total_gan_objective(&parts, &gw, &sw, w[5]).unwrap();
        let expected = v[0] + v[1] + v[2] + v[3] + w[0] * v[4] + w[1] * v[5] + w[2] * v[6] + w[5] * v[7] + w[3] * v[8] + w[4] * v[9];
        prop_assert!((b.total - expected).abs() < 1e-6);
    }

    #[test]
    fn gate_coefficients_lie_in_unit_interval_and_scale_x(seed in any::<u64>(), fl in 1usize..4, fg in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionGateParams::random(fl, fg, 2, &mut rng);
        let x = Tensor::randn(&[fl, 4, 4], &mut rng);
        let g = Tensor::randn(&[fg, 2, 2], &mut rng);
        let (xhat, map) = attention_gate(&x, &g, &params).unwrap();
        prop_assert!(map.alpha.data().iter().all(|a| (0.0..=1.0).contains(a)));
        for c in 0..fl {
            for i in 0..16 {
                let k = c * 16 + i;
                prop_assert_eq!(xhat.data()[k], map.alpha.data()[i] * x.data()[k]);
            }
        }
    }

    #[test]
    fn adain_is_idempotent_at_unit_style(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[3, 5, 5], &mut rng);
        let once = adain(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        let twice = adain(&once, &[1.0; 3], &[0.0; 3]).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-4);
        }
        prop_assert_eq!(inject_noise(&x, &[0.0; 3], &mut rng).unwrap(), x);
    }
}
