use cdal::metrics::*;
use cdal::rng::stream_rng;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Independent per-pixel oracle: (tp, fp, fn, tn) for label `class`.
fn oracle_counts(pred: &Array2<u8>, gt: &Array2<u8>, class: u8) -> (u64, u64, u64, u64) {
    let (h, w) = pred.dim();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let p = pred[[y, x]] == class;
            let g = gt[[y, x]] == class;
            if p && g {
                tp += 1;
            } else if p {
                fp += 1;
            } else if g {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    (tp, fp, fn_, tn)
}

fn oracle_scores((tp, fp, fn_, _): (u64, u64, u64, u64)) -> [f64; 4] {
    if tp + fp + fn_ == 0 {
        return [100.0; 4];
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let r = |n: f64, d: f64| if d > 0.0 { 100.0 * n / d } else { 0.0 };
    [r(2.0 * tp, 2.0 * tp + fp + fn_), r(tp, tp + fp + fn_), r(tp, tp + fp), r(tp, tp + fn_)]
}

fn random_mask(rng: &mut impl Rng, max: u8) -> Array2<u8> {
    let density: f64 = rng.random();
    Array2::from_shape_simple_fn((16, 16), || {
        if rng.random_bool(density) {
            rng.random_range(1..=max)
        } else {
            0
        }
    })
}

#[test]
fn binary_pairs_match_the_oracle() {
    let mut rng = stream_rng(42, 0);
    for _ in 0..1000 {
        let pred = random_mask(&mut rng, 1);
        let gt = random_mask(&mut rng, 1);
        let counts = confusion_from_classes(&pred, &gt, 1).unwrap();
        let c = counts.classes[0];
        let o = oracle_counts(&pred, &gt, 1);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), o);
        let s = Scores::from_counts(&c);
        assert_eq!([s.dice, s.iou, s.precision, s.recall], oracle_scores(o));
        assert!((s.dice - 200.0 * s.iou / (100.0 + s.iou)).abs() < 1e-12);
    }
}

#[test]
fn multi_class_pairs_match_the_oracle() {
    let mut rng = stream_rng(43, 0);
    for _ in 0..200 {
        let pred = random_mask(&mut rng, 3);
        let gt = random_mask(&mut rng, 3);
        let counts = confusion_from_classes(&pred, &gt, 3).unwrap();
        assert_eq!(counts.classes.len(), 4);
        for (k, c) in counts.classes.iter().enumerate() {
            assert_eq!((c.tp, c.fp, c.fn_, c.tn), oracle_counts(&pred, &gt, k as u8));
            assert_eq!(c.total(), 256);
        }
        let report = compute_metrics(&counts);
        let fg: Vec<f64> = report.classes[1..].iter().map(|c| c.scores.dice).collect();
        assert!((report.mean.dice - fg.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
}

#[test]
fn identity_and_complement() {
    let mut rng = stream_rng(44, 0);
    let gt = random_mask(&mut rng, 1);
    let same = confusion_from_classes(&gt, &gt, 1).unwrap().classes[0];
    assert_eq!((same.fp, same.fn_), (0, 0));
    let flipped = gt.mapv(|v| 1 - v);
    let inv = confusion_from_classes(&flipped, &gt, 1).unwrap().classes[0];
    assert_eq!((inv.tp, inv.tn), (0, 0));
}

#[test]
fn disjoint_masks_score_zero() {
    let mut pred = Array2::zeros((4, 4));
    let mut gt = Array2::zeros((4, 4));
    pred[[0, 0]] = 1;
    gt[[3, 3]] = 1;
    let s = Scores::from_counts(&confusion_from_classes(&pred, &gt, 1).unwrap().classes[0]);
    assert_eq!((s.dice, s.iou), (0.0, 0.0));
}

#[test]
fn four_reports_match_hand_statistics() {
    let mut rng = stream_rng(45, 0);
    let reports: Vec<MetricsReport> = (0..4)
        .map(|_| compute_metrics(&confusion_from_classes(&random_mask(&mut rng, 1), &random_mask(&mut rng, 1), 1).unwrap()))
        .collect();
    let dice: Vec<f64> = reports.iter().map(|r| r.dice()).collect();
    let mean = (dice[0] + dice[1] + dice[2] + dice[3]) / 4.0;
    let var = dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 4.0;
    let agg = aggregate_folds(&reports).unwrap();
    assert!((agg.mean.dice - mean).abs() < 1e-9);
    assert!((agg.mean_sd.dice - var.sqrt()).abs() < 1e-9);
    assert_eq!(agg.aggregated, 4);
}

#[test]
fn single_report_has_zero_spread() {
    let mut rng = stream_rng(46, 0);
    let r = compute_metrics(&confusion_from_classes(&random_mask(&mut rng, 1), &random_mask(&mut rng, 1), 1).unwrap());
    let agg = aggregate_folds(std::slice::from_ref(&r)).unwrap();
    assert_eq!(agg.mean, r.mean);
    assert_eq!(agg.mean_sd, Scores::default());
}

#[test]
fn pooled_and_per_image_agree_on_one_image() {
    let mut rng = stream_rng(47, 0);
    let c = confusion_from_classes(&random_mask(&mut rng, 1), &random_mask(&mut rng, 1), 1).unwrap();
    let a = evaluate_counts(std::slice::from_ref(&c), Aggregation::PerImage).unwrap();
    let b = evaluate_counts(std::slice::from_ref(&c), Aggregation::Pooled).unwrap();
    assert_eq!(a.mean, b.mean);
}

proptest! {
    #[test]
    fn dice_and_iou_are_linked(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let s = Scores::from_counts(&ClassCounts { tp, fp, fn_, tn: 0 });
        prop_assert!((s.dice - 200.0 * s.iou / (100.0 + s.iou)).abs() < 1e-10);
        for v in [s.dice, s.iou, s.precision, s.recall] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn relabeling_classes_permutes_scores(seed in 0u64..500, swap in 1u8..3) {
        let mut rng = stream_rng(seed, 1);
        let pred = random_mask(&mut rng, 3);
        let gt = random_mask(&mut rng, 3);
        let relabel = |m: &Array2<u8>| m.mapv(|v| if v == swap { 3 } else if v == 3 { swap } else { v });
        let a = compute_metrics(&confusion_from_classes(&pred, &gt, 3).unwrap());
        let b = compute_metrics(&confusion_from_classes(&relabel(&pred), &relabel(&gt), 3).unwrap());
        prop_assert_eq!(a.classes[swap as usize].scores, b.classes[3].scores);
        prop_assert_eq!(a.classes[3].scores, b.classes[swap as usize].scores);
        prop_assert!((a.mean.dice - b.mean.dice).abs() < 1e-9);
    }

    #[test]
    fn swapping_prediction_and_truth_keeps_overlap(seed in 0u64..500) {
        let mut rng = stream_rng(seed, 2);
        let pred = random_mask(&mut rng, 1);
        let gt = random_mask(&mut rng, 1);
        let a = Scores::from_counts(&confusion_from_classes(&pred, &gt, 1).unwrap().classes[0]);
        let b = Scores::from_counts(&confusion_from_classes(&gt, &pred, 1).unwrap().classes[0]);
        prop_assert_eq!((a.dice, a.iou), (b.dice, b.iou));
        prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
    }
}
