use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinseg_core::dataset::LabelFlags;
use skinseg_core::losses::*;
use skinseg_core::network::ForwardTrace;
use skinseg_core::{MaskMap, PortraitImage, ProbMap};

const STEP: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn random_prob(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ProbMap {
    // Away from the clamp so central differences stay on the smooth branch.
    ProbMap::from_fn(w, h, |_, _| rng.random_range(0.02..0.98))
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PortraitImage {
    let data = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0f32)).collect();
    PortraitImage::new(w, h, data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> MaskMap {
    MaskMap::from_fn(w, h, |_, _| u8::from(rng.random_bool(0.5)))
}

fn perturbed(p: &ProbMap, i: usize, d: f64) -> ProbMap {
    let mut q = p.clone();
    q.data_mut()[i] += d;
    q
}

/// Max relative error; entries whose reference magnitude is below 1e-8 are compared absolutely.
fn check(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let err = if n.abs() < 1e-8 {
            assert!((a - n).abs() < 1e-6, "absolute mismatch {a} vs {n}");
            0.0
        } else {
            (a - n).abs() / n.abs()
        };
        worst = worst.max(err);
    }
    worst
}

fn numeric(p: &ProbMap, f: impl Fn(&ProbMap) -> f64) -> Vec<f64> {
    (0..p.len()).map(|i| (f(&perturbed(p, i, STEP)) - f(&perturbed(p, i, -STEP))) / (2.0 * STEP)).collect()
}

#[test]
fn ce_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p = random_prob(&mut rng, 8, 8);
        let m = random_mask(&mut rng, 8, 8);
        let (_, g) = ce_loss_grad(&p, &m, EPS).unwrap();
        let n = numeric(&p, |q| ce_loss(q, &m, EPS).unwrap());
        assert!(check(&g, &n) < 1e-3);
    }
}

#[test]
fn crf_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let img = random_image(&mut rng, 8, 8);
        let w = affinity(&img, &cfg);
        let p = random_prob(&mut rng, 8, 8);
        let (_, g) = crf_loss_grad(&p, &w).unwrap();
        let n = numeric(&p, |q| crf_loss(q, &w).unwrap());
        assert!(check(&g, &n) < 1e-3);
    }
}

#[test]
fn wce_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random_prob(&mut rng, 8, 8);
        let y = random_prob(&mut rng, 8, 8);
        let (_, gx, gy) = wce_loss_grad(&x, &y, EPS).unwrap();
        let nx = numeric(&x, |q| wce_loss(q, &y, EPS).unwrap());
        let ny = numeric(&y, |q| wce_loss(&x, q, EPS).unwrap());
        assert!(check(&gx, &nx) < 1e-3);
        assert!(check(&gy, &ny) < 1e-3);
    }
}

fn brute_force_crf(img: &PortraitImage, p: &ProbMap, cfg: &LossConfig) -> f64 {
    let (w, h) = (img.width(), img.height());
    let r = cfg.crf_radius as i64;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..w * h {
        for j in (i + 1)..w * h {
            let (xi, yi) = ((i % w) as i64, (i / w) as i64);
            let (xj, yj) = ((j % w) as i64, (j / w) as i64);
            if (xi - xj).abs() > r || (yi - yj).abs() > r {
                continue;
            }
            let ci = img.pixel(xi as usize, yi as usize);
            let cj = img.pixel(xj as usize, yj as usize);
            let dc: f64 = (0..3).map(|k| (f64::from(ci[k]) - f64::from(cj[k])).powi(2)).sum();
            let dp = ((xi - xj).pow(2) + (yi - yj).pow(2)) as f64;
            let wij = (-dc / (2.0 * cfg.crf_sigma_color.powi(2)) - dp / (2.0 * cfg.crf_sigma_pos.powi(2))).exp();
            let d = p.data()[i] - p.data()[j];
            sum += wij * d * d;
            pairs += 1;
        }
    }
    sum / pairs as f64
}

#[test]
fn crf_matches_brute_force_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let img = random_image(&mut rng, 8, 8);
        let p = random_prob(&mut rng, 8, 8);
        let fast = crf_loss(&p, &affinity(&img, &cfg)).unwrap();
        let slow = brute_force_crf(&img, &p, &cfg);
        assert!((fast - slow).abs() <= 1e-10 * slow.abs(), "{fast} vs {slow}");
    }
}

#[test]
fn affinity_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 6, 5);
    let w = affinity(&img, &LossConfig::default());
    for i in 0..30 {
        assert_eq!(w.weight(i, i), 0.0);
        for j in 0..30 {
            let v = w.weight(i, j);
            assert_eq!(v, w.weight(j, i));
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn shape_mismatches_are_rejected() {
    let p = ProbMap::filled(4, 4, 0.5);
    let q = ProbMap::filled(4, 3, 0.5);
    assert!(wce_loss(&p, &q, EPS).is_err());
    assert!(ce_loss(&p, &MaskMap::filled(3, 4, 0), EPS).is_err());
    let w = affinity(&PortraitImage::filled(4, 3, [0.1; 3]), &LossConfig::default());
    assert!(crf_loss(&p, &w).is_err());
}

#[test]
fn config_invariants() {
    assert!(LossConfig::default().validate().is_ok());
    assert!(LossConfig { lambda1: -1.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { crf_radius: 0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { epsilon: 0.5, ..LossConfig::default() }.validate().is_err());
}

fn trace_from(maps: [ProbMap; 4]) -> ForwardTrace {
    let [a, b, c, d] = maps;
    ForwardTrace { o_s: a, o_b: b, o2_s: Some(c), o2_b: Some(d), guidance_stage2: None, grad_stop: true }
}

fn prob_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #[test]
    fn losses_are_nonnegative(p in prob_strategy(36), q in prob_strategy(36), bits in prop::collection::vec(any::<bool>(), 36)) {
        let p = ProbMap::new_prob(6, 6, p).unwrap();
        let q = ProbMap::new_prob(6, 6, q).unwrap();
        let m = MaskMap::new_mask(6, 6, bits.into_iter().map(u8::from).collect()).unwrap();
        prop_assert!(ce_loss(&p, &m, EPS).unwrap() >= 0.0);
        prop_assert!(wce_loss(&p, &q, EPS).unwrap() >= 0.0);
        let img = PortraitImage::filled(6, 6, [0.3, 0.2, 0.1]);
        prop_assert!(crf_loss(&p, &affinity(&img, &LossConfig::default())).unwrap() >= 0.0);
    }

    #[test]
    fn crf_is_invariant_to_global_color_shift(seed in any::<u64>(), shift in -0.3f32..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep shifted colors inside [0, 1].
        let data: Vec<f32> = (0..6 * 6 * 3).map(|_| rng.random_range(0.3..0.7f32)).collect();
        let shifted: Vec<f32> = data.iter().map(|v| v + shift).collect();
        let a = PortraitImage::new(6, 6, data).unwrap();
        let b = PortraitImage::new(6, 6, shifted).unwrap();
        let p = random_prob(&mut rng, 6, 6);
        let cfg = LossConfig::default();
        let la = crf_loss(&p, &affinity(&a, &cfg)).unwrap();
        let lb = crf_loss(&p, &affinity(&b, &cfg)).unwrap();
        prop_assert!((la - lb).abs() <= 1e-6 * la.max(1e-12));
    }

    #[test]
    fn crf_vanishes_on_constant_maps(v in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 5, 5);
        prop_assert_eq!(crf_loss(&ProbMap::filled(5, 5, v), &affinity(&img, &LossConfig::default())).unwrap(), 0.0);
    }

    #[test]
    fn total_is_monotone_in_weights_and_recombines(seed in any::<u64>(), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, skin in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 6, 6);
        let trace = trace_from([0, 1, 2, 3].map(|_| random_prob(&mut rng, 6, 6)));
        let mask = random_mask(&mut rng, 6, 6);
        let flags = if skin { LabelFlags::SKIN } else { LabelFlags::BODY };
        let base = LossConfig { lambda1: l1, lambda2: l2, ..LossConfig::default() };
        let w = affinity(&img, &base);
        let target = LossTarget {
            flags,
            skin_mask: skin.then_some(&mask),
            body_mask: (!skin).then_some(&mask),
            affinity: Some(&w),
        };
        let lo = total_loss(&trace, &target, &base).unwrap();
        let hi = total_loss(&trace, &target, &LossConfig { lambda1: l1 + d1, lambda2: l2 + d2, ..base }).unwrap();
        prop_assert!(hi.total >= lo.total);
        prop_assert!((lo.total - lo.recombine(&base)).abs() <= 1e-12 * lo.total.abs().max(1e-300));
        let ce_only = total_loss(&trace, &target, &LossConfig { lambda1: 0.0, lambda2: 0.0, ..base }).unwrap();
        prop_assert_eq!(ce_only.total, ce_only.ce_sum());
    }
}

#[test]
fn total_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, 6, 6);
    let cfg = LossConfig { lambda1: 0.7, lambda2: 0.3, wce_pairing: WcePairing::AllPairs, ..LossConfig::default() };
    let w = affinity(&img, &cfg);
    let mask = random_mask(&mut rng, 6, 6);
    let maps = [0, 1, 2, 3].map(|_| random_prob(&mut rng, 6, 6));
    let target = LossTarget { flags: LabelFlags::BODY, skin_mask: None, body_mask: Some(&mask), affinity: Some(&w) };
    let (_, grads) = total_loss_grad(&trace_from(maps.clone()), &target, &cfg).unwrap();
    for k in 0..4 {
        let n = numeric(&maps[k], |q| {
            let mut m = maps.clone();
            m[k] = q.clone();
            total_loss(&trace_from(m), &target, &cfg).unwrap().total
        });
        assert!(check(&grads[k], &n) < 1e-3, "output {k}");
    }
}
