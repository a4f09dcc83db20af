use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinseg_core::dataset::Sample;
use skinseg_core::metrics::*;
use skinseg_core::{MaskMap, PortraitImage, ProbMap};

fn counts(pred: &MaskMap, gt: &MaskMap) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(x, y), gt.get(x, y)) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

#[test]
fn metrics_match_nested_loop_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let density = rng.random_range(0.0..1.0);
        let a = MaskMap::from_fn(16, 16, |_, _| u8::from(rng.random_bool(density)));
        let b = MaskMap::from_fn(16, 16, |_, _| u8::from(rng.random_bool(density)));
        let (tp, fp, fn_) = counts(&a, &b);
        let want_iou = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        let want_p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let want_r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        assert_eq!(iou(&a, &b).unwrap(), want_iou);
        assert_eq!(precision_recall(&a, &b).unwrap(), (want_p, want_r));
    }
}

#[test]
fn top1_hand_enumerated() {
    // Winners per sample: s0 A, s1 B and C tie, s2 C, s3 all three tie.
    let table = vec![vec![0.9, 0.5, 0.2, 0.7], vec![0.8, 0.6, 0.3, 0.7], vec![0.1, 0.6, 0.4, 0.7]];
    assert_eq!(iou_top1(&table).unwrap(), vec![50.0, 50.0, 75.0]);
    assert_eq!(iou_top1(&[vec![0.9, 0.9], vec![0.1, 0.2]]).unwrap(), vec![100.0, 0.0]);
    assert_eq!(iou_top1(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap(), vec![100.0, 100.0]);
    assert!(iou_top1(&[vec![0.3], vec![0.3, 0.4]]).is_err());
}

#[test]
fn sweep_of_perfect_and_constant_maps() {
    let gt = MaskMap::from_fn(8, 8, |x, _| u8::from(x < 3));
    let perfect = gt.to_prob();
    let rows = sweep(&[&perfect], &[&gt], &default_thresholds()).unwrap();
    for r in &rows[1..rows.len() - 1] {
        assert_eq!(r.mean_iou, 1.0);
    }
    let half = ProbMap::filled(8, 8, 0.5);
    let rows = sweep(&[&half], &[&gt], &[0.45, 0.5, 0.55]).unwrap();
    assert_eq!(rows[0].recall, 1.0);
    assert_eq!(rows[1].recall, 0.0);
    assert_eq!(rows[2].recall, 0.0);
    assert_eq!(binarize(&ProbMap::filled(2, 2, 0.3), 0.0).count(), 4);
    assert_eq!(binarize(&ProbMap::filled(2, 2, 1.0), 1.0).count(), 0);
}

fn validation_set(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let body = MaskMap::from_fn(8, 8, |_, _| u8::from(rng.random_bool(0.6)));
            let skin = MaskMap::from_fn(8, 8, |x, y| body.get(x, y) & u8::from(rng.random_bool(0.5)));
            Sample::new(format!("v{i}"), PortraitImage::filled(8, 8, [0.5; 3]), Some(skin), Some(body)).unwrap()
        })
        .collect()
}

#[test]
fn ground_truth_scores_perfectly_and_aggregates_recompute() {
    let val = validation_set(5, 3);
    let preds: Vec<Prediction> = val
        .iter()
        .map(|s| Prediction {
            id: s.id.clone(),
            skin: s.skin_mask.as_ref().map(MaskMap::to_prob),
            body: s.body_mask.as_ref().map(MaskMap::to_prob),
        })
        .collect();
    let r = evaluate_method("gt", "v", &preds, &val, &default_thresholds()).unwrap();
    let skin = r.skin.as_ref().unwrap();
    assert_eq!(skin.mean_iou, 1.0);
    assert_eq!(r.body.as_ref().unwrap().mean_iou, 1.0);
    assert!(skin.aggregates_consistent());
    let manual = skin.records.iter().map(|x| x.iou).sum::<f64>() / skin.records.len() as f64;
    assert_eq!(manual, skin.mean_iou);

    let missing = &preds[1..];
    let err = evaluate_method("gt", "v", missing, &val, &default_thresholds()).unwrap_err();
    assert!(format!("{err}").contains("v0"));

    let rows = compare(&[r.clone(), r], true).unwrap();
    assert!(rows.iter().all(|row| row.top1_percent == 100.0));
}

#[test]
fn noisy_predictions_keep_aggregates_consistent() {
    let val = validation_set(6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds: Vec<Prediction> =
        val.iter().map(|s| Prediction { id: s.id.clone(), skin: Some(ProbMap::from_fn(8, 8, |_, _| rng.random())), body: None }).collect();
    let r = evaluate_method("noise", "v", &preds, &val, &default_thresholds()).unwrap();
    assert!(r.body.is_none());
    let skin = r.skin.unwrap();
    assert!(skin.aggregates_consistent());
    assert_eq!(skin.curve.len(), default_thresholds().len());
}

fn mask(n: usize) -> impl Strategy<Value = MaskMap> {
    prop::collection::vec(0u8..=1, n * n).prop_map(move |d| MaskMap::new_mask(n, n, d).unwrap())
}

proptest! {
    #[test]
    fn metric_ranges_and_symmetry(a in mask(8), b in mask(8)) {
        let v = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let (p, r) = precision_recall(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
    }

    #[test]
    fn nested_masks(a in mask(8), b in mask(8)) {
        let inner = MaskMap::from_fn(8, 8, |x, y| a.get(x, y) & b.get(x, y));
        prop_assert_eq!(precision_recall(&inner, &b).unwrap().0, 1.0);
        prop_assert_eq!(precision_recall(&b, &inner).unwrap().1, 1.0);
    }

    #[test]
    fn top1_bounds(table in prop::collection::vec(prop::collection::vec(0u8..4, 5), 1..4)) {
        let table: Vec<Vec<f64>> = table.into_iter().map(|r| r.into_iter().map(|v| f64::from(v) / 4.0).collect()).collect();
        let shared = iou_top1(&table).unwrap();
        for (m, pct) in shared.iter().enumerate() {
            prop_assert!((0.0..=100.0).contains(pct));
            let strict = (0..5)
                .filter(|&s| table.iter().enumerate().all(|(o, row)| o == m || row[s] < table[m][s]))
                .count() as f64 / 5.0 * 100.0;
            prop_assert!(*pct >= strict);
        }
    }
}
