use proptest::prelude::*;
use vitfiqa::eval::*;

fn comparisons(min: usize, max: usize, levels: u32) -> impl Strategy<Value = Vec<Comparison>> {
    // Quantized values produce ties in both similarity and quality.
    let q = move |v: f64| (v * levels as f64).round() / levels as f64;
    proptest::collection::vec((-1.0f64..1.0, -3.0f64..3.0), min..max).prop_map(move |v| {
        v.into_iter()
            .map(|(s, quality)| Comparison {
                similarity: q(s),
                quality: q(quality),
            })
            .collect()
    })
}

fn sets() -> impl Strategy<Value = ComparisonSet> {
    (1u32..40).prop_flat_map(|levels| {
        (comparisons(1, 60, levels), comparisons(1, 200, levels))
            .prop_map(|(genuine, impostor)| ComparisonSet { genuine, impostor })
    })
}

proptest! {
    #[test]
    fn threshold_is_tight(set in sets(), target in 0.001f64..0.9) {
        let imp = set.impostor_similarities();
        let t = fmr_threshold(&imp, target).unwrap();
        let fmr = |tau: f64| imp.iter().filter(|&&v| v >= tau).count() as f64 / imp.len() as f64;
        prop_assert!(t.achieved_fmr <= target);
        prop_assert_eq!(t.achieved_fmr, fmr(t.tau));
        let below = imp.iter().cloned().filter(|&v| v < t.tau).fold(f64::NEG_INFINITY, f64::max);
        if below.is_finite() {
            prop_assert!(fmr(below) > target);
        }
        prop_assert_eq!(t.unsaturated, t.tau > imp.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn curve_follows_the_discard_protocol(set in sets(), target in 0.01f64..0.5) {
        let grid = default_grid(DEFAULT_DMAX);
        let t = fmr_threshold(&set.impostor_similarities(), target).unwrap();
        let curve = edc_compute(&set, t.tau, &grid).unwrap();
        let total = set.len();
        prop_assert_eq!(curve.fnmr[0], fnmr_at(&set.genuine_similarities(), t.tau).unwrap());
        for (i, &d) in grid.iter().enumerate() {
            let kept = curve.retained_genuine[i] + curve.retained_impostor[i];
            prop_assert_eq!(total - kept, discard_count(d, total));
            prop_assert!(curve.fnmr[i].is_finite());
            if i > 0 {
                prop_assert!(curve.retained_genuine[i] <= curve.retained_genuine[i - 1]);
                prop_assert!(curve.retained_impostor[i] <= curve.retained_impostor[i - 1]);
            }
        }
        let (a, p) = (auc(&curve, DEFAULT_DMAX).unwrap(), pauc(&curve).unwrap());
        prop_assert!(0.0 <= p && p <= a);
    }

    #[test]
    fn curve_ignores_monotone_quality_maps(set in sets(), target in 0.01f64..0.5) {
        let grid = default_grid(DEFAULT_DMAX);
        let base = evaluate(&set, target, &grid, DEFAULT_DMAX, PairQuality::Min).unwrap();
        let expected = curve_to_csv(&base.0).unwrap();
        for g in [|x: f64| 2.0 * x + 1.0, f64::tanh, f64::exp] {
            let other = evaluate(&set.map_quality(g), target, &grid, DEFAULT_DMAX, PairQuality::Min).unwrap();
            prop_assert_eq!(&curve_to_csv(&other.0).unwrap(), &expected);
            prop_assert_eq!(other.1.auc, base.1.auc);
        }
    }

    #[test]
    fn discard_count_is_floor(d in 0u32..100, total in 1usize..5000) {
        let frac = d as f64 / 100.0;
        prop_assert_eq!(discard_count(frac, total), d as usize * total / 100);
    }
}
