//! Procedural portrait scenes with exact skin and body ground truth.
//!
//! Figures are compositions of ellipses (torso, arms, neck, head, hair). Skin
//! is painted on the face, neck and hands, sometimes on bare forearms, and is
//! always a strict subset of the figure silhouette. Clothing colors overlap
//! skin tones and the background may hold skin-colored blobs, so color alone
//! does not separate the classes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::image::{MaskMap, PortraitImage};

/// Uniform per-pixel noise amplitude added to every painted region.
pub const NOISE_BOUND: f32 = 0.03;
pub const MAX_ATTEMPTS: usize = 100;

const HAIR_PALETTE: [[f32; 3]; 4] = [[0.08, 0.06, 0.05], [0.25, 0.16, 0.09], [0.55, 0.40, 0.20], [0.70, 0.68, 0.66]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub image_size: usize,
    /// Each scene holds between 1 and this many figures.
    pub n_figures: usize,
    pub skin_tone_palette: Vec<[f32; 3]>,
    pub clothing_palette: Vec<[f32; 3]>,
    pub background_distractor_rate: f64,
    pub lighting_tint_strength: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_figures: 2,
            skin_tone_palette: vec![
                [0.96, 0.80, 0.69],
                [0.89, 0.69, 0.55],
                [0.80, 0.58, 0.44],
                [0.65, 0.45, 0.33],
                [0.48, 0.32, 0.23],
                [0.33, 0.22, 0.16],
            ],
            clothing_palette: vec![
                [0.15, 0.25, 0.55],
                [0.70, 0.12, 0.12],
                [0.10, 0.10, 0.12],
                [0.92, 0.92, 0.90],
                [0.28, 0.48, 0.30],
                [0.86, 0.72, 0.58],
                [0.74, 0.55, 0.42],
            ],
            background_distractor_rate: 0.5,
            lighting_tint_strength: 0.3,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(config("image_size must be >= 32"));
        }
        if !(1..=3).contains(&self.n_figures) {
            return Err(config("n_figures must be in 1..=3"));
        }
        if self.skin_tone_palette.is_empty() || self.clothing_palette.is_empty() {
            return Err(config("palettes must be non-empty"));
        }
        let in_unit = |p: &[[f32; 3]]| p.iter().flatten().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.skin_tone_palette) || !in_unit(&self.clothing_palette) {
            return Err(config("palette colors must lie in [0, 1]"));
        }
        for (name, v) in
            [("background_distractor_rate", self.background_distractor_rate), ("lighting_tint_strength", self.lighting_tint_strength)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    /// Rotation in radians.
    pub angle: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = (libm::sinf(self.angle), libm::cosf(self.angle));
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// A skin-colored background blob and the palette weights that produced its color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub shape: Ellipse,
    pub color: [f32; 3],
    pub palette_weights: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: PortraitImage,
    pub skin: MaskMap,
    pub body: MaskMap,
    pub distractors: Vec<Distractor>,
    /// Per-channel multiplicative tint applied last.
    pub tint: [f32; 3],
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    Background,
    Body,
    Skin,
}

struct Canvas {
    size: usize,
    color: Vec<[f32; 3]>,
    label: Vec<Label>,
}

impl Canvas {
    fn paint(&mut self, e: &Ellipse, color: [f32; 3], label: Label) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                if !e.contains(fx, fy) {
                    continue;
                }
                let i = y * self.size + x;
                self.color[i] = color;
                self.label[i] = label;
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(p: &[[f32; 3]], rng: &mut R) -> [f32; 3] {
    p[rng.random_range(0..p.len())]
}

fn draw_figure<R: Rng + ?Sized>(canvas: &mut Canvas, params: &SceneParams, cx: f32, scale: f32, rng: &mut R) {
    let s = canvas.size as f32;
    let unit = s * scale;
    let tone = pick(&params.skin_tone_palette, rng);
    let shirt = pick(&params.clothing_palette, rng);
    let hair = HAIR_PALETTE[rng.random_range(0..HAIR_PALETTE.len())];
    let head_cy = s * rng.random_range(0.25..0.45);
    let head = Ellipse { cx, cy: head_cy, rx: unit * 0.16, ry: unit * 0.21, angle: rng.random_range(-0.2..0.2) };
    let neck_cy = head_cy + head.ry * 1.05;
    let torso = Ellipse { cx, cy: neck_cy + unit * 0.42, rx: unit * rng.random_range(0.30..0.38), ry: unit * 0.45, angle: 0.0 };
    let bare_arms = rng.random_bool(0.35);
    let mut arms = Vec::new();
    for side in [-1.0f32, 1.0] {
        let raised = rng.random_bool(0.3);
        let shoulder_x = cx + side * torso.rx * 0.85;
        let shoulder_y = neck_cy + unit * 0.12;
        let angle: f32 = if raised { side * -0.9 } else { side * -rng.random_range(0.2..0.55) };
        let len = unit * 0.32;
        let (dx, dy) = (-libm::sinf(angle), libm::cosf(angle));
        let dir = if raised { -1.0 } else { 1.0 };
        let arm = Ellipse { cx: shoulder_x + dx * len * dir, cy: shoulder_y + dy * len * dir, rx: unit * 0.07, ry: len, angle };
        let hand = Ellipse {
            cx: shoulder_x + dx * len * 2.0 * dir,
            cy: shoulder_y + dy * len * 2.0 * dir,
            rx: unit * 0.065,
            ry: unit * 0.08,
            angle,
        };
        arms.push((arm, hand));
    }
    let sleeve = pick(&params.clothing_palette, rng);
    for (arm, hand) in &arms {
        if bare_arms {
            canvas.paint(arm, tone, Label::Skin);
        } else {
            canvas.paint(arm, sleeve, Label::Body);
        }
        canvas.paint(hand, tone, Label::Skin);
    }
    canvas.paint(&torso, shirt, Label::Body);
    let neck = Ellipse { cx, cy: neck_cy, rx: unit * 0.07, ry: unit * 0.08, angle: 0.0 };
    canvas.paint(&neck, tone, Label::Skin);
    if rng.random_bool(0.5) {
        let collar = Ellipse { cx, cy: neck_cy + unit * 0.09, rx: unit * 0.12, ry: unit * 0.04, angle: 0.0 };
        canvas.paint(&collar, shirt, Label::Body);
    }
    canvas.paint(&head, tone, Label::Skin);
    let hair_shape = Ellipse {
        cx: head.cx,
        cy: head.cy - head.ry * rng.random_range(0.45..0.7),
        rx: head.rx * 1.08,
        ry: head.ry * rng.random_range(0.45..0.7),
        angle: head.angle,
    };
    canvas.paint(&hair_shape, hair, Label::Body);
}

fn background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<[f32; 3]> {
    let a: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.05..0.95));
    let b: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.05..0.95));
    let dir = rng.random_range(0.0..core::f32::consts::TAU);
    let (c, s) = (libm::cosf(dir), libm::sinf(dir));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 / size as f32 - 0.5) * c + (y as f32 / size as f32 - 0.5) * s + 0.5;
            let t = u.clamp(0.0, 1.0);
            out.push(core::array::from_fn(|k| a[k] * (1.0 - t) + b[k] * t));
        }
    }
    out
}

fn try_scene<R: Rng + ?Sized>(params: &SceneParams, rng: &mut R) -> Option<Scene> {
    let size = params.image_size;
    let s = size as f32;
    let mut canvas = Canvas { size, color: background(size, rng), label: vec![Label::Background; size * size] };
    let figures = rng.random_range(1..=params.n_figures);
    let scale = match figures {
        1 => rng.random_range(0.75..1.0),
        2 => rng.random_range(0.5..0.65),
        _ => rng.random_range(0.38..0.48),
    };
    let slot = s / figures as f32;
    for f in 0..figures {
        let cx = slot * (f as f32 + 0.5) + rng.random_range(-0.15..0.15) * slot;
        draw_figure(&mut canvas, params, cx, scale, rng);
    }

    let mut distractors = Vec::new();
    if rng.random_bool(params.background_distractor_rate) {
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            for _ in 0..20 {
                let r = s * rng.random_range(0.05..0.1);
                let shape = Ellipse {
                    cx: rng.random_range(0.0..s),
                    cy: rng.random_range(0.0..s),
                    rx: r * rng.random_range(0.7..1.3),
                    ry: r,
                    angle: rng.random_range(0.0..core::f32::consts::PI),
                };
                let inside: Vec<usize> =
                    (0..size * size).filter(|&i| shape.contains((i % size) as f32 + 0.5, (i / size) as f32 + 0.5)).collect();
                if inside.len() < 4 || inside.iter().any(|&i| canvas.label[i] != Label::Background) {
                    continue;
                }
                let raw: Vec<f32> = params.skin_tone_palette.iter().map(|_| rng.random_range(0.0..1.0f32)).collect();
                let total: f32 = raw.iter().sum::<f32>().max(f32::MIN_POSITIVE);
                let weights: Vec<f32> = raw.iter().map(|w| w / total).collect();
                let color: [f32; 3] = core::array::from_fn(|k| params.skin_tone_palette.iter().zip(&weights).map(|(p, w)| p[k] * w).sum());
                for &i in &inside {
                    canvas.color[i] = color;
                }
                distractors.push(Distractor { shape, color, palette_weights: weights });
                break;
            }
        }
    }

    let skin_n = canvas.label.iter().filter(|l| **l == Label::Skin).count();
    let body_n = canvas.label.iter().filter(|l| **l != Label::Background).count();
    if skin_n == 0 || body_n == skin_n {
        return None;
    }

    let strength = params.lighting_tint_strength as f32;
    let tint: [f32; 3] = core::array::from_fn(|_| 1.0 + strength * rng.random_range(-0.25..0.25));
    let mut data = Vec::with_capacity(size * size * 3);
    for c in &canvas.color {
        for k in 0..3 {
            let noisy = c[k] + rng.random_range(-NOISE_BOUND..=NOISE_BOUND);
            data.push((noisy * tint[k]).clamp(0.0, 1.0));
        }
    }
    let image = PortraitImage::new(size, size, data).ok()?;
    let skin = MaskMap::from_fn(size, size, |x, y| u8::from(canvas.label[y * size + x] == Label::Skin));
    let body = MaskMap::from_fn(size, size, |x, y| u8::from(canvas.label[y * size + x] != Label::Background));
    Some(Scene { image, skin, body, distractors, tint })
}

/// Renders one scene. Degenerate layouts are redrawn up to [`MAX_ATTEMPTS`] times.
pub fn generate_scene<R: Rng + ?Sized>(params: &SceneParams, rng: &mut R) -> Result<Scene> {
    params.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_scene(params, rng) {
            return Ok(scene);
        }
    }
    Err(Error::Numerical(format!("no non-degenerate scene after {MAX_ATTEMPTS} attempts")))
}

/// Deterministic generator for the `index`-th scene of a stream.
pub fn scene_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 40);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitRole {
    TrainSkin,
    TrainBody,
    Validation,
}

/// One entry of a generated dataset: which stream index renders it and which
/// masks it keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSample {
    pub id: String,
    pub role: SplitRole,
    pub stream: u64,
    pub index: u64,
}

/// Number of skin-labeled training samples, rounded toward skin.
pub fn skin_label_count(count: usize, skin_label_fraction: f64) -> usize {
    let exact = count as f64 * skin_label_fraction;
    let n = libm::ceil(exact - 1e-9 * exact.max(1.0)) as usize;
    n.min(count)
}

/// Lays out `count` training samples and `val_count` dual-labeled validation samples.
pub fn plan_dataset(count: usize, skin_label_fraction: f64, val_count: usize, seed: u64) -> Result<Vec<PlannedSample>> {
    if count < 2 {
        return Err(config("count must be >= 2"));
    }
    if !(skin_label_fraction > 0.0 && skin_label_fraction < 1.0) {
        return Err(config("skin_label_fraction must lie in (0, 1)"));
    }
    let n_skin = skin_label_count(count, skin_label_fraction);
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = scene_rng(seed, 2, 0);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut skin = vec![false; count];
    for &i in &order[..n_skin] {
        skin[i] = true;
    }
    let mut plan: Vec<PlannedSample> = (0..count)
        .map(|i| PlannedSample {
            id: format!("train_{i:05}"),
            role: if skin[i] { SplitRole::TrainSkin } else { SplitRole::TrainBody },
            stream: 0,
            index: i as u64,
        })
        .collect();
    plan.extend((0..val_count).map(|i| PlannedSample {
        id: format!("val_{i:05}"),
        role: SplitRole::Validation,
        stream: 1,
        index: i as u64,
    }));
    Ok(plan)
}

/// Renders one planned sample.
pub fn render_planned(params: &SceneParams, planned: &PlannedSample) -> Result<Scene> {
    generate_scene(params, &mut scene_rng(params.seed, planned.stream, planned.index))
}
