use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skinseg_core::dataset::*;
use skinseg_core::synth::{generate_scene, scene_rng, SceneParams};
use skinseg_core::{MaskMap, PortraitImage};

fn scene_sample(seed: u64) -> Sample {
    let params = SceneParams { image_size: 32, ..SceneParams::default() };
    let s = generate_scene(&params, &mut scene_rng(seed, 0, 0)).unwrap();
    Sample::new("s", s.image, Some(s.skin), Some(s.body)).unwrap()
}

#[test]
fn flags_follow_masks() {
    let img = PortraitImage::filled(8, 8, [0.2; 3]);
    let m = MaskMap::filled(8, 8, 1);
    let skin = Sample::new("a", img.clone(), Some(m.clone()), None).unwrap();
    let body = Sample::new("b", img.clone(), None, Some(m.clone())).unwrap();
    let both = Sample::new("c", img.clone(), Some(m.clone()), Some(m.clone())).unwrap();
    assert_eq!((skin.flags().l_s(), skin.flags().l_b()), (1.0, 0.0));
    assert_eq!((body.flags().l_s(), body.flags().l_b()), (0.0, 1.0));
    assert_eq!((both.flags().l_s(), both.flags().l_b()), (1.0, 1.0));
    assert!(Sample::new("d", img.clone(), None, None).is_err());
    assert!(Sample::new("e", img, Some(MaskMap::filled(4, 4, 0)), None).is_err());
}

#[test]
fn resize_reaches_working_size() {
    let img = PortraitImage::filled(100, 80, [0.4; 3]);
    let s = Sample::new("r", img, Some(MaskMap::filled(100, 80, 1)), None).unwrap().resized(64);
    assert_eq!((s.image.width(), s.image.height()), (64, 64));
    let m = s.skin_mask.unwrap();
    assert_eq!((m.width(), m.height()), (64, 64));
}

proptest! {
    #[test]
    fn augmentation_preserves_binarity_and_containment(seed in any::<u64>(), scene in 0u64..50, flip in 0.0f64..=1.0, smax in 1.0f64..1.5) {
        let sample = scene_sample(scene);
        let cfg = AugmentConfig { flip_probability: flip, scale_min: 1.0, scale_max: smax, crop_size: 32, seed: 0 };
        let out = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let skin = out.skin_mask.as_ref().unwrap();
        let body = out.body_mask.as_ref().unwrap();
        prop_assert!(skin.data().iter().chain(body.data()).all(|&v| v <= 1));
        prop_assert_eq!(skin.containment_violations(body), 0);
        prop_assert_eq!((out.image.width(), skin.width()), (32, 32));
        let again = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn batches_balance_over_any_window(skin_len in 1usize..40, body_len in 1usize..40, bs in 1usize..9, seed in any::<u64>(), start in 0usize..20, n in 1usize..20) {
        let batches: Vec<Batch> = AlternatingBatches::new(skin_len, body_len, bs, seed).unwrap().take(start + 2 * n).collect();
        let window = &batches[start..];
        let skin = window.iter().filter(|b| b.kind == BatchKind::Skin).count();
        prop_assert_eq!(skin, n);
        for b in &batches {
            let expected = if b.iteration % 2 == 0 { BatchKind::Skin } else { BatchKind::Body };
            prop_assert_eq!(b.kind, expected);
            let len = if b.kind == BatchKind::Skin { skin_len } else { body_len };
            prop_assert!(b.indices.iter().all(|&i| i < len));
        }
        let again: Vec<Batch> = AlternatingBatches::new(skin_len, body_len, bs, seed).unwrap().take(start + 2 * n).collect();
        prop_assert_eq!(batches, again);
    }
}

#[test]
fn each_subset_is_visited_once_per_pass() {
    let batches: Vec<Batch> = AlternatingBatches::new(12, 12, 4, 9).unwrap().take(6).collect();
    for kind in [BatchKind::Skin, BatchKind::Body] {
        let mut seen: Vec<usize> = batches.iter().filter(|b| b.kind == kind).flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }
}
