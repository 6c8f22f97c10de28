//! Property tests for packing, quantizers, distances and rankings.

mod common;

use common::{naive_angle, naive_euclid, sign};
use proptest::prelude::*;
use qprune::metrics::{binary_cosine, cosine_similarity, euclidean_distance, DistanceKind};
use qprune::quant::{dequantize, quantize_weights, quantize_weights_real, QuantScheme, DOREFA2_WEIGHT_LEVELS};
use qprune::ranking::{prune_first_order, rank_filters_interaction, rank_filters_own, rank_kernels};
use qprune::tensor::{pack, popcount_dot, PackedTensor, TensorF};

fn schemes() -> impl Strategy<Value = QuantScheme> {
    prop_oneof![
        Just(QuantScheme::binary_connect()),
        Just(QuantScheme::bnn()),
        Just(QuantScheme::xnor()),
        Just(QuantScheme::dorefa2()),
    ]
}

fn sign_schemes() -> impl Strategy<Value = QuantScheme> {
    prop_oneof![Just(QuantScheme::bnn()), Just(QuantScheme::xnor())]
}

/// A `K×C×h×w` tensor with entries in `(-2, 2)`.
fn weights(max_k: usize, max_c: usize) -> impl Strategy<Value = TensorF> {
    (1..=max_k, 1..=max_c, 1..=3usize).prop_flat_map(|(k, c, s)| {
        prop::collection::vec(-2.0f32..2.0, k * c * s * s).prop_map(move |d| TensorF::new(vec![k, c, s, s], d).unwrap())
    })
}

fn nonzero_vec(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..=max).prop_filter("non-zero", |v| v.iter().any(|&x| x != 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pack_unpack_round_trip(bits in 1u8..=2, codes in prop::collection::vec(0u8..4, 0..300)) {
        let codes: Vec<u8> = codes.into_iter().map(|c| c & ((1 << bits) - 1)).collect();
        let p = pack(&codes, &[codes.len()], bits).unwrap();
        prop_assert_eq!(p.unpack(), codes.clone());
        let again = PackedTensor::from_words(p.shape().to_vec(), bits, p.words().to_vec(), None).unwrap();
        prop_assert_eq!(again.unpack(), codes);
    }

    #[test]
    fn padding_is_zero_and_ignored(n in 1usize..200, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let a: Vec<u8> = (0..n).map(|_| rand::Rng::gen_range(&mut r, 0..2)).collect();
        let b: Vec<u8> = (0..n).map(|_| rand::Rng::gen_range(&mut r, 0..2)).collect();
        let (pa, pb) = (pack(&a, &[n], 1).unwrap(), pack(&b, &[n], 1).unwrap());
        if n % 64 != 0 {
            prop_assert_eq!(pa.words().last().unwrap() >> (n % 64), 0);
            let mut dirty = pa.words().to_vec();
            *dirty.last_mut().unwrap() |= 1u64 << 63;
            prop_assert!(PackedTensor::from_words(vec![n], 1, dirty, None).is_err());
        }
        let real: i64 = a.iter().zip(&b).map(|(&x, &y)| (2 * x as i64 - 1) * (2 * y as i64 - 1)).sum();
        prop_assert_eq!(popcount_dot(&pa, &pb).unwrap(), real);
    }

    #[test]
    fn quantizer_is_idempotent_on_its_image(w in weights(4, 4), scheme in schemes()) {
        prop_assume!(w.data().iter().any(|&v| v != 0.0));
        let q = quantize_weights_real(&w, &scheme, None);
        prop_assert_eq!(quantize_weights_real(&q, &scheme, None), q.clone());
        prop_assert_eq!(dequantize(&quantize_weights(&w, &scheme).unwrap()), q);
    }

    #[test]
    fn xnor_scales_are_mean_abs(w in weights(6, 3), zero_filter in 0usize..6) {
        let mut w = w;
        let k = zero_filter % w.filters();
        let len = w.filter_len();
        w.set_filter(k, &vec![0.0; len]).unwrap();
        let p = quantize_weights(&w, &QuantScheme::xnor()).unwrap();
        let scales = p.scales().unwrap();
        for (f, &a) in scales.iter().enumerate() {
            prop_assert!(a >= 0.0);
            let all_zero = w.filter(f).unwrap().iter().all(|&v| v == 0.0);
            prop_assert_eq!(a == 0.0, all_zero);
        }
    }

    #[test]
    fn dorefa_outputs_lie_on_level_set(w in weights(4, 4)) {
        let q = quantize_weights_real(&w, &QuantScheme::dorefa2(), None);
        for v in q.data() {
            prop_assert!(DOREFA2_WEIGHT_LEVELS.contains(v), "{}", v);
        }
    }

    #[test]
    fn binary_cosine_matches_general_form(v in nonzero_vec(64)) {
        let s: Vec<f64> = v.iter().map(|&x| sign(x as f32) as f64).collect();
        let general = cosine_similarity(&v, &s).unwrap();
        prop_assert!((binary_cosine(&v).unwrap() - general).abs() <= 1e-6);
    }

    #[test]
    fn angle_is_scale_invariant(v in nonzero_vec(64), t in 1e-3f64..1e3) {
        let s: Vec<f64> = v.iter().map(|&x| sign(x as f32) as f64).collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * t).collect();
        let a = DistanceKind::Angle.distance(&v, &s).unwrap();
        let b = DistanceKind::Angle.distance(&scaled, &s).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn euclid_is_zero_exactly_on_the_codebook(signs in prop::collection::vec(any::<bool>(), 1..40), alpha in 0.1f32..3.0, nudge in 0usize..40) {
        let n = signs.len();
        let on: Vec<f32> = signs.iter().map(|&s| if s { alpha } else { -alpha }).collect();
        let w = TensorF::new(vec![1, n, 1, 1], on.clone()).unwrap();
        let q = quantize_weights_real(&w, &QuantScheme::xnor(), None);
        let as64 = |x: &[f32]| x.iter().map(|&v| v as f64).collect::<Vec<_>>();
        prop_assert_eq!(euclidean_distance(&as64(&on), &as64(q.data())).unwrap(), 0.0);

        // With one entry every vector is some α·sign(v).
        prop_assume!(n >= 2);
        let mut off = on;
        off[nudge % n] *= 1.5;
        let w = TensorF::new(vec![1, n, 1, 1], off.clone()).unwrap();
        let q = quantize_weights_real(&w, &QuantScheme::xnor(), None);
        prop_assert!(euclidean_distance(&as64(&off), &as64(q.data())).unwrap() > 0.0);
    }

    #[test]
    fn distances_ignore_a_shared_permutation(v in nonzero_vec(32), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let q: Vec<f64> = v.iter().map(|&x| sign(x as f32) as f64).collect();
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut common::rng(seed));
        let pv: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let pq: Vec<f64> = idx.iter().map(|&i| q[i]).collect();
        for kind in [DistanceKind::Angle, DistanceKind::Euclidean] {
            let a = kind.distance(&v, &q).unwrap();
            let b = kind.distance(&pv, &pq).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
        }
        prop_assert!((naive_angle(&v, &q) - naive_angle(&pv, &pq)).abs() <= 1e-9);
        prop_assert!((naive_euclid(&v, &q) - naive_euclid(&pv, &pq)).abs() <= 1e-9);
    }

    #[test]
    fn prune_order_is_descending_resort(scores in prop::collection::vec(prop_oneof![Just(0.5f64), 0.0f64..1.0], 0..50)) {
        let order = prune_first_order(&scores);
        let mut expected: Vec<usize> = (0..scores.len()).collect();
        expected.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        prop_assert_eq!(order, expected);
    }

    #[test]
    fn kernel_and_own_rankings_are_ordered(w in weights(5, 4), scheme in schemes(), euclid in any::<bool>()) {
        prop_assume!(w.data().iter().all(|&v| v != 0.0));
        let metric = if euclid { DistanceKind::Euclidean } else { DistanceKind::Angle };
        for r in [
            rank_kernels(0, &w, Some(&scheme), metric).unwrap(),
            rank_filters_own(0, &w, Some(&scheme), metric).unwrap(),
        ] {
            prop_assert_eq!(&r.order, &prune_first_order(&r.scores));
            prop_assert!(r.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
        }
    }

    #[test]
    fn interaction_ignores_next_filter_order(next in weights(6, 5), scheme in sign_schemes(), seed in any::<u64>(), euclid in any::<bool>()) {
        use rand::seq::SliceRandom;
        prop_assume!(next.data().iter().all(|&v| v != 0.0));
        let metric = if euclid { DistanceKind::Euclidean } else { DistanceKind::Angle };
        let base = rank_filters_interaction(0, &next, Some(&scheme), metric).unwrap();
        let mut perm: Vec<usize> = (0..next.filters()).collect();
        perm.shuffle(&mut common::rng(seed));
        let shuffled = next.gather(&perm, None).unwrap();
        let other = rank_filters_interaction(0, &shuffled, Some(&scheme), metric).unwrap();
        for (a, b) in base.scores.iter().zip(&other.scores) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn interaction_angle_order_survives_positive_scaling(next in weights(6, 5), scheme in sign_schemes(), t in 0.01f32..100.0) {
        prop_assume!(next.data().iter().all(|&v| v.abs() > 1e-3));
        let base = rank_filters_interaction(0, &next, Some(&scheme), DistanceKind::Angle).unwrap();
        let scaled = TensorF::new(next.shape().to_vec(), next.data().iter().map(|v| v * t).collect()).unwrap();
        let other = rank_filters_interaction(0, &scaled, Some(&scheme), DistanceKind::Angle).unwrap();
        for (a, b) in base.scores.iter().zip(&other.scores) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        // Orders may only differ between scores that are equal up to rounding.
        for (x, y) in base.order.iter().zip(&other.order) {
            prop_assert!(x == y || (base.scores[*x] - base.scores[*y]).abs() <= 1e-6);
        }
    }
}
