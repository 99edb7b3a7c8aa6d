use cdal::attention::*;
use cdal::rng::{standard_normal, stream_rng};
use ndarray::{Array3, Array4, Axis};
use proptest::prelude::*;

fn brute_force_mean(f: &Array4<f64>) -> Array3<f64> {
    let (n, c, h, w) = f.dim();
    let mut out = Array3::zeros((n, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for k in 0..c {
                    acc += f[[i, k, y, x]];
                }
                out[[i, y, x]] = acc / c as f64;
            }
        }
    }
    out
}

fn features(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    standard_normal(&mut stream_rng(seed, 0), shape)
}

#[test]
fn random_features_match_the_brute_force_mean() {
    for seed in 0..20 {
        let f = features((2, 8, 16, 16), seed);
        assert_eq!(attention_map(&f).unwrap().weights, brute_force_mean(&f));
    }
}

#[test]
fn empty_channel_axis_is_rejected() {
    assert!(attention_map(&Array4::<f64>::zeros((1, 0, 4, 4))).is_err());
}

#[test]
fn ones_map_is_the_identity() {
    let x0 = features((3, 2, 8, 8), 1);
    assert_eq!(apply_attention(&x0, &AttentionMap::ones(3, 8, 8)).unwrap(), x0);
}

#[test]
fn mismatched_map_is_rejected() {
    let x0 = features((1, 1, 8, 8), 1);
    assert!(apply_attention(&x0, &AttentionMap::ones(1, 4, 4)).is_err());
    let map = attention_map(&features((1, 2, 3, 3), 2)).unwrap();
    assert!(upsample_bilinear(&map, 8, 8).is_err());
}

#[test]
fn upsampled_maps_reach_every_model_resolution() {
    for size in [16, 32, 64] {
        let map = attention_map(&features((1, 4, size, size), 3)).unwrap();
        let up = normalize_and_upsample(&map, 64, 64).unwrap();
        assert_eq!(up.weights.dim(), (1, 64, 64));
        assert_eq!(up.source_scale, size);
    }
}

proptest! {
    #[test]
    fn channel_order_does_not_matter(seed in 0u64..1000, shift in 1usize..8) {
        let f = features((1, 8, 4, 4), seed);
        let mut order: Vec<usize> = (0..8).collect();
        order.rotate_left(shift);
        let permuted = f.select(Axis(1), &order);
        let a = attention_map(&f).unwrap().weights;
        let b = attention_map(&permuted).unwrap().weights;
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn normalized_maps_lie_in_the_unit_interval(seed in 0u64..1000, scale in 0.0f64..100.0) {
        let f = features((2, 3, 8, 8), seed) * scale;
        let map = normalize_and_upsample(&attention_map(&f).unwrap(), 32, 32).unwrap();
        prop_assert!(map.weights.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn upsampling_stays_within_the_source_range(seed in 0u64..1000, factor in 1usize..5) {
        let map = attention_map(&features((1, 2, 4, 4), seed)).unwrap();
        let lo = map.weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let up = upsample_bilinear(&map, 4 * factor, 4 * factor).unwrap();
        prop_assert!(up.weights.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn weighting_is_monotone_for_non_negative_labels(seed in 0u64..1000, bump in 0.0f64..2.0) {
        let x0 = features((1, 1, 8, 8), seed).mapv(f64::abs);
        let a = AttentionMap { weights: features((1, 1, 8, 8), seed + 1).index_axis(Axis(1), 0).mapv(f64::abs), ..AttentionMap::ones(1, 8, 8) };
        let b = AttentionMap { weights: &a.weights + bump, ..a.clone() };
        let lo = apply_attention(&x0, &a).unwrap();
        let hi = apply_attention(&x0, &b).unwrap();
        prop_assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h));
    }
}
