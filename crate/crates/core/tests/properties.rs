use proptest::prelude::*;

use pqlabel_core::clustering::{generate_labels, kmeans_fit, KMeansModel, KMeansParams};
use pqlabel_core::model::entropy;
use pqlabel_core::pool::{build_pool, disagreement_rate, replicate, MultiLabelDataset, PoolConfig, Provenance};
use pqlabel_core::quality::{fit_aggd, fit_ggd, rank_by_scores};
use pqlabel_core::shifts::{apply_shift, build_suite, rotate, Corruption, ShiftSpec, SuiteKind};
use pqlabel_core::synthetic::{synthetic_dataset, SyntheticSpec};
use pqlabel_core::{RgbImage, Sample};

fn image_strategy(side: usize) -> impl Strategy<Value = RgbImage> {
    proptest::collection::vec(any::<u8>(), side * side * 3).prop_map(move |d| RgbImage::new(side, side, d).unwrap())
}

fn samples_from_labels(labels: &[u8]) -> Vec<Sample> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Sample::new(i, RgbImage::filled(8, 8, [l, l, l]), Some(l)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_within_bounds(raw in proptest::collection::vec(1e-9f64..1.0, 2..16)) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let h = entropy(&p);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).log2() + 1e-12);
    }

    #[test]
    fn ranking_is_a_permutation_independent_of_input_order(
        scores in proptest::collection::vec(0u32..20, 1..60),
        seed in any::<u64>(),
    ) {
        let pairs: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| (i, f64::from(s))).collect();
        let ranked = rank_by_scores(&pairs);
        let mut sorted = ranked.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..pairs.len()).collect::<Vec<_>>());
        // descending score, ties by ascending id
        for w in ranked.windows(2) {
            let (a, b) = (pairs[w[0]].1, pairs[w[1]].1);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        let mut shuffled = pairs.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(rank_by_scores(&shuffled), ranked);
    }

    #[test]
    fn aggd_sign_flip_mirrors(xs in proptest::collection::vec(-5.0f64..5.0, 50..200)) {
        prop_assume!(xs.iter().any(|&v| v < 0.0) && xs.iter().any(|&v| v > 0.0));
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (fit_aggd(&xs), fit_aggd(&neg)) {
            // zeros count as right-side samples, so exactness needs none
            if xs.iter().all(|&v| v != 0.0) {
                prop_assert_eq!(a.nu, b.nu);
                prop_assert_eq!(a.eta, -b.eta);
                prop_assert_eq!(a.sigma_l2, b.sigma_r2);
            }
        }
    }

    #[test]
    fn ggd_shape_is_scale_invariant(xs in proptest::collection::vec(-3.0f64..3.0, 50..200), scale in 0.5f64..8.0) {
        prop_assume!(xs.iter().any(|&v| v != 0.0));
        let scaled: Vec<f64> = xs.iter().map(|v| v * scale).collect();
        let (a, b) = (fit_ggd(&xs).unwrap(), fit_ggd(&scaled).unwrap());
        prop_assert!((a.alpha - b.alpha).abs() < 1e-6);
    }

    #[test]
    fn replicate_count_is_total_of_label_lists(lists in proptest::collection::vec(proptest::collection::vec(0u8..10, 1..4), 1..50)) {
        let n = lists.len();
        let mld = MultiLabelDataset { classes: 10, labels: lists.clone(), provenance: vec![Provenance::Clean; n] };
        let pairs = replicate(&mld);
        prop_assert_eq!(pairs.len(), lists.iter().map(Vec::len).sum::<usize>());
        for p in &pairs {
            prop_assert_eq!(lists[p.id][p.replica], p.label);
        }
    }

    #[test]
    fn pool_keeps_clean_labels_outside_and_respects_sizes(
        labels in proptest::collection::vec(0u8..5, 10..120),
        pool_frac in 0.1f64..1.0,
        seed in any::<u64>(),
    ) {
        let n = labels.len();
        let samples = samples_from_labels(&labels);
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.rotate_left((seed as usize) % n);
        let cfg = PoolConfig { pool_frac, ..Default::default() };
        let plan = cfg.plan(n);
        let labeler = |id: usize, m: usize| Ok(vec![((id + 1) % 5) as u8; m]);
        let mld = build_pool(&samples, &ranking, &cfg, 5, &labeler).unwrap();
        let pooled: std::collections::BTreeSet<usize> = ranking[..plan.pool].iter().copied().collect();
        for id in 0..n {
            if pooled.contains(&id) {
                prop_assert_eq!(mld.provenance[id], Provenance::Generated);
            } else {
                prop_assert_eq!(&mld.labels[id], &vec![labels[id]]);
            }
        }
        prop_assert_eq!(mld.pair_count(), n + 2 * plan.triple + plan.double);
        let d = disagreement_rate(&mld, &labels);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn shifts_preserve_dims(img in image_strategy(9), angle in 0.0f64..360.0, sev in 1u8..=5, k in 0usize..7, seed in any::<u64>()) {
        let r = rotate(&img, angle);
        prop_assert_eq!((r.height(), r.width()), (9, 9));
        let spec = ShiftSpec::Corruption { kind: Corruption::ALL[k], severity: sev };
        let c = apply_shift(&img, &spec, seed).unwrap();
        prop_assert_eq!(c.data().len(), img.data().len());
        prop_assert_eq!(apply_shift(&img, &spec, seed).unwrap(), c);
    }

    #[test]
    fn generate_labels_are_distinct_and_nearest_first(
        x in proptest::collection::vec(-4.0f64..4.0, 2),
        m in 1usize..=4,
    ) {
        let centroids: Vec<Vec<f64>> = (0..4).map(|i| vec![f64::from(i) * 2.0 - 3.0, 0.5 * f64::from(i)]).collect();
        let model = KMeansModel { centroids, centroid_class: Some(vec![2, 0, 3, 1]), inertia: 0.0 };
        let out = generate_labels(&x, &model, m).unwrap();
        prop_assert_eq!(out.len(), m);
        let mut dedup = out.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), m);
        // the first label belongs to the nearest centroid
        let nearest = model.nearest(&x);
        prop_assert_eq!(out[0], model.centroid_class.as_ref().unwrap()[nearest]);
    }

    #[test]
    fn kmeans_inertia_never_increases(pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 6..40), seed in any::<u64>()) {
        let fit = kmeans_fit(&pts, &KMeansParams::new(3, seed)).unwrap();
        for w in fit.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
    }
}

#[test]
fn suite_sets_keep_dims_and_labels() {
    let test = synthetic_dataset(&SyntheticSpec { seed: 4, samples: 20, classes: 10, side: 16 }).unwrap();
    for kind in [SuiteKind::Rotation, SuiteKind::Corruption] {
        for (spec, set) in build_suite(&test, kind, 3).unwrap() {
            assert_eq!(set.len(), test.len());
            for (a, b) in set.iter().zip(&test) {
                assert_eq!((a.id, a.clean_label), (b.id, b.clean_label));
                assert_eq!((a.image.height(), a.image.width()), (16, 16));
            }
            let l2: f64 = set[0]
                .image
                .data()
                .iter()
                .zip(test[0].image.data())
                .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
                .sum();
            assert!(l2 > 0.0, "{} left sample 0 unchanged", spec.label());
        }
    }
}
