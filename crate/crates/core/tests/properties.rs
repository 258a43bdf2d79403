mod common;

use cddsa::datagen::{generate_sample, DomainStyleSpec};
use cddsa::losses::{build_contrastive_pairs, dsct_loss, kl_loss, total_loss, LossComponents, LossWeights};
use cddsa::metrics::{assd, dice_score, BinaryMask};
use cddsa::model::{adain, StyleDistribution};
use cddsa::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..=10, 1usize..=10).prop_flat_map(|(h, w)| {
        (prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w))
            .prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

fn style_spec() -> impl Strategy<Value = DomainStyleSpec> {
    (0.3f64..3.0, prop::array::uniform3(0.5f64..1.5), 0.0f64..0.2, 0.0f64..2.0, 0.0f64..1.0).prop_map(
        |(gamma, tint, noise, blur, bg)| DomainStyleSpec {
            domain_id: 0,
            intensity_gamma: gamma,
            channel_tint: tint,
            noise_sigma: noise,
            blur_radius: blur,
            background_level: bg,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_matches_brute_force_and_is_symmetric((a, b) in mask_pair()) {
        let d = dice_score(&a, &b).unwrap();
        prop_assert_eq!(d, common::brute_dice(&a, &b));
        prop_assert_eq!(d, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=100.0).contains(&d));
    }

    #[test]
    fn assd_matches_brute_force((a, b) in mask_pair(), sy in 0.2f64..3.0, sx in 0.2f64..3.0) {
        let got = assd(&a, &b, (sy, sx)).unwrap();
        match (got, common::brute_assd(&a, &b, (sy, sx))) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y),
            (None, None) => {}
            other => prop_assert!(false, "definedness differs: {:?}", other),
        }
        prop_assert_eq!(got, assd(&b, &a, (sy, sx)).unwrap());
    }

    #[test]
    fn assd_scales_with_spacing((a, b) in mask_pair(), sy in 0.2f64..3.0, sx in 0.2f64..3.0) {
        let base = assd(&a, &b, (sy, sx)).unwrap();
        prop_assert_eq!(assd(&a, &b, (2.0 * sy, 2.0 * sx)).unwrap(), base.map(|v| 2.0 * v));
    }

    #[test]
    fn kl_is_non_negative(params in prop::collection::vec((-5.0f64..5.0, 1e-3f64..50.0), 1..16)) {
        let dist = StyleDistribution { mean: params.iter().map(|p| p.0).collect(), variance: params.iter().map(|p| p.1).collect() };
        let kl = kl_loss(&dist).unwrap();
        prop_assert!(kl >= 0.0);
        let oracle: f64 = params.iter().map(|&(u, v)| common::gaussian_kl(u, v)).sum();
        prop_assert!((kl - oracle).abs() < 1e-9 * (1.0 + oracle));
    }

    #[test]
    fn masks_do_not_depend_on_style(seed in any::<u64>(), a in style_spec(), b in style_spec()) {
        let sa = generate_sample::<f64>(&a, seed, 24, 3).unwrap();
        let sb = generate_sample::<f64>(&b, seed, 24, 3).unwrap();
        prop_assert_eq!(sa.mask, sb.mask);
    }

    #[test]
    fn adain_sets_channel_moments(
        seed in any::<u64>(),
        gamma in prop::collection::vec(0.1f64..3.0, 4),
        beta in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::from_fn(&[4, 8, 8], |_| rng.random_range(-3.0..3.0f64));
        let y = adain(&f, &gamma, &beta, 1e-8).unwrap();
        for c in 0..4 {
            let v = &y.data()[c * 64..(c + 1) * 64];
            let m = v.iter().sum::<f64>() / 64.0;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0).sqrt();
            prop_assert!((m - beta[c]).abs() < 1e-6);
            prop_assert!((sd - gamma[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn dsct_ignores_negative_order(seed in any::<u64>(), d in 2usize..4, b in 2usize..4, tau in 0.05f64..1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domains: Vec<usize> = (0..d).flat_map(|k| std::iter::repeat_n(k, b)).collect();
        let codes: Vec<Vec<f64>> = (0..d * b).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let cb = build_contrastive_pairs(&domains, b, tau, false, &mut rng).unwrap();
        let mut shuffled = cb.clone();
        for negs in &mut shuffled.negatives {
            negs.shuffle(&mut rng);
        }
        let (x, y) = (dsct_loss(&codes, &cb).unwrap(), dsct_loss(&codes, &shuffled).unwrap());
        prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        prop_assert!(x >= 0.0);
    }

    #[test]
    fn total_loss_is_the_weighted_sum(c in prop::array::uniform5(0.0f64..10.0), w in prop::array::uniform4(0.0f64..2.0)) {
        let comps = LossComponents { seg: c[0], kl: c[1], rec: c[2], dsct: c[3], saac: c[4] };
        let weights = LossWeights { lambda1: w[0], lambda2: w[1], lambda3: w[2], lambda4: w[3], ..LossWeights::default() };
        let expected = c[0] + w[0] * c[1] + w[1] * c[2] + w[2] * c[3] + w[3] * c[4];
        prop_assert!((total_loss(&comps, &weights).unwrap() - expected).abs() < 1e-12);
    }
}
