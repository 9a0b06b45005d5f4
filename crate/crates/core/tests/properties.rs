//! Property tests over the numeric invariants.

use ndarray::Array2;
use proptest::prelude::*;

use zrspeech_core::frontend::{cmvn, concat_features, stack};
use zrspeech_core::matching::{feature_dtw, token_dtw, FrameMetric};
use zrspeech_core::mdnn::{gradient_check, MultiTargetNet, NetConfig};
use zrspeech_core::oracle;
use zrspeech_core::types::FeatureSequence;

fn feature_seq(t: usize, d: usize) -> impl Strategy<Value = FeatureSequence> {
    proptest::collection::vec(-10.0f32..10.0, t * d).prop_map(move |v| {
        FeatureSequence::new("p", 10, Array2::from_shape_vec((t, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cmvn_idempotence(seq in (2usize..12, 1usize..5).prop_flat_map(|(t, d)| feature_seq(t, d))) {
        let once = cmvn(&seq).unwrap();
        let twice = cmvn(&once).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn stack_shape_and_edge_clamping(
        seq in (1usize..8, 1usize..4).prop_flat_map(|(t, d)| feature_seq(t, d)),
        context in 0usize..4,
    ) {
        let stacked = stack(&seq, context, None);
        prop_assert_eq!(stacked.len(), seq.len());
        prop_assert_eq!(stacked.dim(), seq.dim() * (2 * context + 1));
        // First row's left context slots all equal frame 0.
        for c in 0..context {
            for j in 0..seq.dim() {
                prop_assert_eq!(stacked.data[[0, c * seq.dim() + j]], seq.data[[0, j]] as f64);
            }
        }
    }

    #[test]
    fn concat_width_is_associative(
        a in (3usize..6, 1usize..4).prop_flat_map(|(t, d)| feature_seq(t, d)),
        b in (3usize..6, 1usize..4).prop_flat_map(|(t, d)| feature_seq(t, d)),
        c in (3usize..6, 1usize..4).prop_flat_map(|(t, d)| feature_seq(t, d)),
    ) {
        // Reshape to a common frame count.
        let t = a.len().min(b.len()).min(c.len());
        let a = a.slice_frames(0, t);
        let b = b.slice_frames(0, t);
        let c = c.slice_frames(0, t);
        let left = concat_features(&concat_features(&a, &b).unwrap(), &c).unwrap();
        let right = concat_features(&a, &concat_features(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left.data, right.data);
    }

    #[test]
    fn dtw_agrees_with_enumeration(
        doc in proptest::collection::vec(0usize..3, 1..=6),
        query in proptest::collection::vec(0usize..3, 1..=6),
        upper in proptest::collection::vec(0.0f64..5.0, 3),
    ) {
        let mut s = Array2::zeros((3, 3));
        let mut k = 0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                s[[i, j]] = upper[k];
                s[[j, i]] = upper[k];
                k += 1;
            }
        }
        let fast = token_dtw(&doc, &query, &s).unwrap();
        let slow = oracle::token_dtw_brute(&doc, &query, &s);
        prop_assert!((fast.normalized - slow.normalized).abs() <= 1e-12);
    }

    #[test]
    fn dtw_degenerate_cases(
        seq in (1usize..6, 1usize..3).prop_flat_map(|(t, d)| feature_seq(t, d)),
    ) {
        // Self-distance is zero (up to rounding) and distances are never
        // negative.
        let self_dist = feature_dtw(&seq, &seq, FrameMetric::Euclidean).unwrap();
        prop_assert!(self_dist.normalized.abs() < 1e-9);
        prop_assert!(self_dist.cost >= 0.0);
    }
}

#[test]
fn gradient_check_over_seeded_nets() {
    for seed in 0..5u64 {
        let config = NetConfig {
            input: 3,
            hidden: vec![4],
            bottleneck: 3,
            groups: vec![2, 3],
            learning_rate: 0.1,
            minibatch: 8,
            epochs: 1,
            seed,
        };
        let net = MultiTargetNet::new(config).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 7 + j * 3 + seed as usize) % 9) as f64 * 0.2 - 0.8);
        let targets = vec![vec![0, 1, 1, 0], vec![2, 0, 1, 2]];
        let err = gradient_check(&net, &x, &targets).unwrap();
        assert!(err < 1e-5, "seed {seed}: gradient check error {err}");
    }
}
