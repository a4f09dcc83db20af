//! Samples, label flags, augmentation and the alternating skin/body batch scheduler.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::image::{MaskMap, PortraitImage};

/// Which ground-truth masks a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFlags {
    pub skin: bool,
    pub body: bool,
}

impl LabelFlags {
    pub const SKIN: Self = Self { skin: true, body: false };
    pub const BODY: Self = Self { skin: false, body: true };
    pub const BOTH: Self = Self { skin: true, body: true };

    pub fn l_s(&self) -> f64 {
        f64::from(u8::from(self.skin))
    }

    pub fn l_b(&self) -> f64 {
        f64::from(u8::from(self.body))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: PortraitImage,
    pub skin_mask: Option<MaskMap>,
    pub body_mask: Option<MaskMap>,
}

impl Sample {
    /// Builds a sample after checking shapes; flags are derived from mask presence.
    pub fn new(id: impl Into<String>, image: PortraitImage, skin_mask: Option<MaskMap>, body_mask: Option<MaskMap>) -> Result<Self> {
        let id = id.into();
        if skin_mask.is_none() && body_mask.is_none() {
            return Err(validation(format!("sample '{id}' has neither a skin nor a body mask")));
        }
        for m in skin_mask.iter().chain(body_mask.iter()) {
            if m.width() != image.width() || m.height() != image.height() {
                return Err(validation(format!("sample '{id}': mask size differs from image size")));
            }
        }
        Ok(Self { id, image, skin_mask, body_mask })
    }

    pub fn flags(&self) -> LabelFlags {
        LabelFlags { skin: self.skin_mask.is_some(), body: self.body_mask.is_some() }
    }

    /// Skin pixels outside the body mask (0 unless both masks are present).
    pub fn containment_violations(&self) -> usize {
        match (&self.skin_mask, &self.body_mask) {
            (Some(s), Some(b)) => s.containment_violations(b),
            _ => 0,
        }
    }

    /// Resizes image (bilinear) and masks (nearest) to a square working resolution.
    pub fn resized(&self, size: usize) -> Self {
        Self {
            id: self.id.clone(),
            image: self.image.resize_bilinear(size, size),
            skin_mask: self.skin_mask.as_ref().map(|m| m.resize_nearest(size, size)),
            body_mask: self.body_mask.as_ref().map(|m| m.resize_nearest(size, size)),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            id: self.id.clone(),
            image: self.image.flip_horizontal(),
            skin_mask: self.skin_mask.as_ref().map(|m| m.flip_horizontal()),
            body_mask: self.body_mask.as_ref().map(|m| m.flip_horizontal()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_probability: 0.5, scale_min: 1.0, scale_max: 1.25, crop_size: 64, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(config("flip_probability must lie in [0, 1]"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(config("scale range must satisfy 0 < min <= max"));
        }
        if self.crop_size == 0 {
            return Err(config("crop_size must be positive"));
        }
        Ok(())
    }
}

/// Random flip, rescale and crop, applied identically to the image and every mask.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let flip = rng.random::<f64>() < cfg.flip_probability;
    let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let w = libm::round(sample.image.width() as f64 * scale) as usize;
    let h = libm::round(sample.image.height() as f64 * scale) as usize;
    if cfg.crop_size > w || cfg.crop_size > h {
        return Err(validation(format!("crop {} exceeds scaled image {}x{}", cfg.crop_size, w, h)));
    }
    let x0 = rng.random_range(0..=w - cfg.crop_size);
    let y0 = rng.random_range(0..=h - cfg.crop_size);
    let base = if flip { sample.flip_horizontal() } else { sample.clone() };
    let c = cfg.crop_size;
    let image = base.image.resize_bilinear(w, h).crop(x0, y0, c, c)?;
    let tf = |m: &MaskMap| m.resize_nearest(w, h).crop(x0, y0, c, c);
    Ok(Sample {
        id: base.id,
        image,
        skin_mask: base.skin_mask.as_ref().map(tf).transpose()?,
        body_mask: base.body_mask.as_ref().map(tf).transpose()?,
    })
}

/// Which labeled subset a batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Skin,
    Body,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub kind: BatchKind,
    /// Indices into the corresponding subset.
    pub indices: Vec<usize>,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Endless stream of batches: even iterations draw skin-labeled samples, odd
/// iterations body-labeled ones. Each subset is shuffled per pass and cycled
/// independently, so the two subsets may differ in size.
#[derive(Debug, Clone)]
pub struct AlternatingBatches {
    batch_size: usize,
    rng: ChaCha8Rng,
    skin: Cycler,
    body: Cycler,
    iteration: usize,
    skin_len: usize,
    body_len: usize,
}

impl AlternatingBatches {
    pub fn new(skin_len: usize, body_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if skin_len == 0 || body_len == 0 {
            return Err(config("alternating batches need non-empty skin and body sets"));
        }
        if batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skin = Cycler::new(skin_len, &mut rng);
        let body = Cycler::new(body_len, &mut rng);
        Ok(Self { batch_size, rng, skin, body, iteration: 0, skin_len, body_len })
    }

    /// Iterations per epoch: both subsets alternate until the larger one has been seen once.
    pub fn iterations_per_epoch(&self) -> usize {
        2 * self.skin_len.max(self.body_len).div_ceil(self.batch_size)
    }
}

impl Iterator for AlternatingBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let iteration = self.iteration;
        self.iteration += 1;
        let (kind, indices) = if iteration.is_multiple_of(2) {
            (BatchKind::Skin, self.skin.take(self.batch_size.min(self.skin_len), &mut self.rng))
        } else {
            (BatchKind::Body, self.body.take(self.batch_size.min(self.body_len), &mut self.rng))
        };
        Some(Batch { kind, indices, iteration })
    }
}

/// Splits samples into skin-labeled and body-labeled subsets by their flags.
/// Dual-labeled samples go to both.
pub fn split_by_label(samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
    let mut skin = Vec::new();
    let mut body = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let f = s.flags();
        if f.skin {
            skin.push(i);
        }
        if f.body {
            body.push(i);
        }
    }
    (skin, body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Sample {
        let size = 16;
        let img = PortraitImage::new(size, size, (0..size * size * 3).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let body = MaskMap::from_fn(size, size, |x, y| u8::from((3..13).contains(&x) && (2..14).contains(&y)));
        let skin = MaskMap::from_fn(size, size, |x, y| u8::from((5..9).contains(&x) && (2..6).contains(&y)));
        Sample::new("a", img, Some(skin), Some(body)).unwrap()
    }

    #[test]
    fn flags_follow_mask_presence() {
        let s = sample();
        assert_eq!(s.flags(), LabelFlags::BOTH);
        let only_skin = Sample::new("b", s.image.clone(), s.skin_mask.clone(), None).unwrap();
        assert_eq!(only_skin.flags(), LabelFlags::SKIN);
        assert!(Sample::new("c", s.image.clone(), None, None).is_err());
        let wrong = MaskMap::filled(8, 8, 0u8);
        assert!(Sample::new("d", s.image.clone(), Some(wrong), None).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = sample();
        assert_eq!(s.flip_horizontal().flip_horizontal(), s);
    }

    #[test]
    fn augment_is_deterministic_and_preserves_containment() {
        let s = sample();
        let cfg = AugmentConfig { crop_size: 12, scale_min: 0.8, scale_max: 1.3, ..AugmentConfig::default() };
        for seed in 0..20 {
            let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.image.width(), 12);
            assert_eq!(a.flags(), s.flags());
            assert_eq!(a.containment_violations(), 0);
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let cfg = AugmentConfig { crop_size: 40, scale_min: 1.0, scale_max: 1.0, ..AugmentConfig::default() };
        assert!(augment(&sample(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batches_alternate_and_cycle() {
        let sched = AlternatingBatches::new(5, 13, 4, 3).unwrap();
        assert_eq!(sched.iterations_per_epoch(), 8);
        let batches: Vec<Batch> = sched.take(40).collect();
        for b in &batches {
            let expect = if b.iteration % 2 == 0 { BatchKind::Skin } else { BatchKind::Body };
            assert_eq!(b.kind, expect);
            assert_eq!(b.indices.len(), 4);
            let bound = if b.kind == BatchKind::Skin { 5 } else { 13 };
            assert!(b.indices.iter().all(|&i| i < bound));
        }
        // Each skin pass covers all five samples before repeating.
        let skin: Vec<usize> = batches.iter().filter(|b| b.kind == BatchKind::Skin).flat_map(|b| b.indices.clone()).collect();
        let mut first = skin[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_subset_is_a_config_error() {
        assert!(AlternatingBatches::new(0, 3, 2, 0).is_err());
    }
}
