use proptest::prelude::*;
use sticker_core::evaluator::{
    average_precision, mean_average_precision, rank, recall_at_k, MetricsReport, RankedSlate,
};

fn slate_of(n: usize) -> impl Strategy<Value = RankedSlate> {
    (prop::collection::vec(-3i32..3, n), 0..n).prop_map(|(raw, pos)| {
        let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / 2.0).collect();
        let mut labels = vec![0u8; scores.len()];
        labels[pos] = 1;
        RankedSlate::new(0, scores, &labels).unwrap()
    })
}

fn slate_strategy() -> impl Strategy<Value = RankedSlate> {
    (2usize..12).prop_flat_map(slate_of)
}

proptest! {
    #[test]
    fn recall_is_monotone_and_reaches_one(
        slates in (2usize..12).prop_flat_map(|n| prop::collection::vec(slate_of(n), 1..20))
    ) {
        let n = slates[0].scores.len();
        let mut prev = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&slates, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn ap_is_reciprocal_rank(s in slate_strategy()) {
        let ap = average_precision(&s);
        prop_assert_eq!(ap, 1.0 / s.positive_rank() as f64);
        prop_assert!(ap >= 1.0 / s.scores.len() as f64 && ap <= 1.0);
    }

    #[test]
    fn ranking_ignores_monotone_rescaling(s in slate_strategy(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let moved: Vec<f64> = s.scores.iter().map(|x| a * x + b).collect();
        prop_assert_eq!(rank(&moved), rank(&s.scores));
    }

    #[test]
    fn rank_is_a_permutation(scores in prop::collection::vec(-1.0f64..1.0, 1..15)) {
        let mut r = rank(&scores);
        for w in r.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
        r.sort_unstable();
        prop_assert_eq!(r, (0..scores.len()).collect::<Vec<_>>());
    }

    #[test]
    fn report_agrees_with_the_metric_functions(slates in prop::collection::vec(slate_strategy(), 1..10)) {
        let r = MetricsReport::from_slates(&slates).unwrap();
        prop_assert_eq!(r.map, mean_average_precision(&slates).unwrap());
        prop_assert_eq!(r.r_at_1, recall_at_k(&slates, 1).unwrap());
        prop_assert!(r.r_at_1 <= r.r_at_2 && r.r_at_2 <= r.r_at_5);
        prop_assert_eq!(r.n_samples, slates.len());
    }
}

#[test]
fn empty_input_is_rejected() {
    assert!(mean_average_precision(&[]).is_err());
    assert!(recall_at_k(&[], 1).is_err());
}
