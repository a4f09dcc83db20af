use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skinseg::checkpoint::{load_checkpoint, save_checkpoint};
use skinseg::core::network::{ModelConfig, ModelParams};
use skinseg::core::training::{CheckpointMeta, Phase, TrainConfig};
use skinseg::core::{MaskMap, PortraitImage, ProbMap};
use skinseg::io::*;
use skinseg::manifest::*;
use skinseg::Error;

fn write_png_pair(dir: &Path, id: &str, w: usize, h: usize) {
    write_image(&dir.join(format!("{id}.png")), &PortraitImage::filled(w, h, [0.6, 0.4, 0.3])).unwrap();
    write_mask(&dir.join(format!("{id}_m.png")), &MaskMap::from_fn(w, h, |x, _| u8::from(x < w / 2))).unwrap();
}

#[test]
fn manifest_flags_and_dual_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_png_pair(dir.path(), "a", 8, 8);
    write_png_pair(dir.path(), "b", 8, 8);
    let path = dir.path().join("m.txt");
    fs::write(&path, "# comment\na a.png a_m.png -\nb b.png - b_m.png\nc a.png a_m.png b_m.png\n").unwrap();
    let entries = load_manifest(&path).unwrap();
    let flags: Vec<_> = entries.iter().map(|e| (e.flags().l_s(), e.flags().l_b())).collect();
    assert_eq!(flags, vec![(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    let data = load_dataset(&path, None).unwrap();
    assert_eq!(data.len(), 3);

    let copy = dir.path().join("copy.txt");
    write_manifest(&copy, &entries).unwrap();
    assert_eq!(load_manifest(&copy).unwrap(), entries);
}

#[test]
fn manifest_errors_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    write_png_pair(dir.path(), "a", 8, 8);
    let path = dir.path().join("m.txt");
    fs::write(&path, "a a.png missing.png -\n").unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    assert!(err.to_string().contains("'a'"));

    fs::write(&path, "a a.png - -\n").unwrap();
    assert!(load_manifest(&path).is_err());
    fs::write(&path, "a a.png a_m.png -\na a.png a_m.png -\n").unwrap();
    assert!(load_manifest(&path).unwrap_err().to_string().contains("duplicate"));
    fs::write(&path, "a a.png\n").unwrap();
    assert!(load_manifest(&path).is_err());
}

#[test]
fn samples_resize_to_working_size() {
    let dir = tempfile::tempdir().unwrap();
    write_png_pair(dir.path(), "r", 100, 80);
    let path = dir.path().join("m.txt");
    fs::write(&path, "r r.png r_m.png -\n").unwrap();
    let s = load_dataset(&path, Some(64)).unwrap().remove(0);
    assert_eq!((s.image.width(), s.image.height()), (64, 64));
    let m = s.skin_mask.unwrap();
    assert_eq!((m.width(), m.height()), (64, 64));
    assert!(m.data().iter().all(|&v| v <= 1));
}

#[test]
fn mismatched_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_png_pair(dir.path(), "a", 8, 8);
    write_mask(&dir.path().join("small.png"), &MaskMap::filled(4, 4, 1)).unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "a a.png small.png -\n").unwrap();
    assert!(load_dataset(&path, None).is_err());
}

#[test]
fn eight_bit_masks_binarize_and_pixels_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.png");
    image::GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap().save(&p).unwrap();
    assert_eq!(read_mask(&p).unwrap().data(), &[0, 0, 1, 1]);
    let q = dir.path().join("rgb.png");
    image::RgbImage::from_raw(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap().save(&q).unwrap();
    let img = read_image(&q).unwrap();
    assert_eq!(img.pixel(0, 0), [0.0; 3]);
    assert_eq!(img.pixel(1, 0), [1.0; 3]);
    assert!(read_mask(&q).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probability_sidecar_round_trips_exactly(values in prop::collection::vec(0.0f32..=1.0, 24)) {
        let dir = tempfile::tempdir().unwrap();
        let p = ProbMap::new_prob(6, 4, values.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let path = dir.path().join("p.png");
        write_prob(&path, &p, true).unwrap();
        prop_assert_eq!(read_prob(&path).unwrap(), p.clone());
        fs::remove_file(sidecar_path(&path)).unwrap();
        write_prob(&path, &p, false).unwrap();
        prop_assert!(!sidecar_path(&path).exists());
        // Without a sidecar the PNG quantizes to 1/255.
        let lossy = read_prob(&path).unwrap();
        for (a, b) in lossy.data().iter().zip(p.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { input_size: 16, base_channels: 4, ..ModelConfig::default() };
    let mut params = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for (i, b) in params.buffers.iter_mut().enumerate() {
        *b += i as f32 * 1e-3;
    }
    let meta = CheckpointMeta {
        epoch: 4,
        phase: Phase::Finetune,
        seed: 3,
        train: TrainConfig::default(),
        model: cfg,
        val_skin_iou: Some(0.123456789),
        val_body_iou: None,
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &params, &meta).unwrap();
    let (loaded, m) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(loaded.checksum(), params.checksum());
    assert_eq!(m, meta);

    let text = fs::read(&path).unwrap();
    fs::write(&path, &text[..text.len() - 4]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
