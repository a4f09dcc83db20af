//! Classical skin detectors: fixed RGB color rules and per-image Gaussian
//! mixture color models.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::image::{MaskMap, PortraitImage, ProbMap};

pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const EM_MAX_ITERS: usize = 100;
pub const EM_REL_TOL: f64 = 1e-6;
pub const DEFAULT_COMPONENTS: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Additionally require hue in [0, 50] degrees and saturation in [0.23, 0.68].
    pub hsv_clause: bool,
}

fn daylight_rule(r: i32, g: i32, b: i32) -> bool {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    r > 95 && g > 40 && b > 20 && max - min > 15 && (r - g).abs() > 15 && r > g && r > b
}

fn flash_rule(r: i32, g: i32, b: i32) -> bool {
    r > 220 && g > 210 && b > 170 && (r - g).abs() <= 15 && b < r && b < g
}

/// Hue in degrees and saturation in [0, 1].
fn hue_saturation(r: f64, g: f64, b: f64) -> (f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d == 0.0 {
        return (0.0, s);
    }
    let h = if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (if h < 0.0 { h + 360.0 } else { h }, s)
}

/// Whether one 8-bit pixel passes the color rules.
pub fn is_skin_rgb(rgb: [u8; 3], cfg: &ThresholdConfig) -> bool {
    let [r, g, b] = rgb.map(i32::from);
    let rgb_ok = daylight_rule(r, g, b) || flash_rule(r, g, b);
    if !rgb_ok || !cfg.hsv_clause {
        return rgb_ok;
    }
    let (h, s) = hue_saturation(f64::from(r), f64::from(g), f64::from(b));
    h <= 50.0 && (0.23..=0.68).contains(&s)
}

pub fn threshold_classify(image: &PortraitImage) -> MaskMap {
    threshold_classify_with(image, &ThresholdConfig::default())
}

pub fn threshold_classify_with(image: &PortraitImage, cfg: &ThresholdConfig) -> MaskMap {
    MaskMap::from_fn(image.width(), image.height(), |x, y| u8::from(is_skin_rgb(image.pixel_u8(x, y), cfg)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: [f64; 3],
    pub var: [f64; 3],
}

/// Diagonal-covariance Gaussian mixture over RGB in [0, 1] units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GMMModel {
    pub components: Vec<GmmComponent>,
    /// Log-likelihood of the data before each M-step, ending with the final model's.
    pub log_likelihood_trace: Vec<f64>,
}

const LN_2PI: f64 = 1.8378770664093453;

fn component_log_density(c: &GmmComponent, x: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for d in 0..3 {
        let diff = x[d] - c.mean[d];
        acc += LN_2PI + libm::log(c.var[d]) + diff * diff / c.var[d];
    }
    -0.5 * acc
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(v.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

impl GMMModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `log p(x)` under the mixture.
    pub fn log_density(&self, x: &[f64; 3]) -> f64 {
        let mut buf = Vec::with_capacity(self.components.len());
        self.weighted_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    fn weighted_log_densities(&self, x: &[f64; 3], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.components.iter().map(|c| {
            if c.weight > 0.0 {
                libm::log(c.weight) + component_log_density(c, x)
            } else {
                f64::NEG_INFINITY
            }
        }));
    }

    /// Total data log-likelihood.
    pub fn log_likelihood(&self, pixels: &[[f64; 3]]) -> f64 {
        pixels.iter().map(|x| self.log_density(x)).sum()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// k-means++ seeding. Returns fewer than `k` centers when the data has fewer distinct points.
fn seed_centers<R: Rng + ?Sized>(pixels: &[[f64; 3]], k: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut centers = vec![pixels[rng.random_range(0..pixels.len())]];
    let mut d2: Vec<f64> = pixels.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let Ok(dist) = WeightedIndex::new(&d2) else { break };
        let c = pixels[dist.sample(rng)];
        for (d, p) in d2.iter_mut().zip(pixels) {
            *d = d.min(dist2(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Fits a `k`-component mixture by EM.
///
/// Components that receive no responsibility keep weight 0 and are excluded
/// from the density. Variances never drop below [`VARIANCE_FLOOR`].
pub fn gmm_fit<R: Rng + ?Sized>(pixels: &[[f64; 3]], k: usize, rng: &mut R) -> Result<GMMModel> {
    if k == 0 {
        return Err(validation("GMM needs at least one component"));
    }
    if pixels.len() < k {
        return Err(validation(format!("{} pixels cannot support {k} mixture components", pixels.len())));
    }
    let n = pixels.len() as f64;
    let mut global_mean = [0.0; 3];
    for p in pixels {
        for d in 0..3 {
            global_mean[d] += p[d] / n;
        }
    }
    let mut global_var = [0.0; 3];
    for p in pixels {
        for d in 0..3 {
            global_var[d] += (p[d] - global_mean[d]) * (p[d] - global_mean[d]) / n;
        }
    }
    let var0 = global_var.map(|v| v.max(VARIANCE_FLOOR));
    let centers = seed_centers(pixels, k, rng);
    let live = centers.len() as f64;
    let mut model = GMMModel {
        components: (0..k)
            .map(|i| GmmComponent {
                weight: if i < centers.len() { 1.0 / live } else { 0.0 },
                mean: centers[i.min(centers.len() - 1)],
                var: var0,
            })
            .collect(),
        log_likelihood_trace: Vec::new(),
    };

    let mut resp = vec![0.0; pixels.len() * k];
    let mut buf = Vec::with_capacity(k);
    for _ in 0..EM_MAX_ITERS {
        let mut ll = 0.0;
        for (i, x) in pixels.iter().enumerate() {
            model.weighted_log_densities(x, &mut buf);
            let lse = log_sum_exp(&buf);
            ll += lse;
            for (j, &v) in buf.iter().enumerate() {
                resp[i * k + j] = libm::exp(v - lse);
            }
        }
        if let Some(&prev) = model.log_likelihood_trace.last() {
            let rel = (ll - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < EM_REL_TOL {
                model.log_likelihood_trace.push(ll);
                return Ok(model);
            }
        }
        model.log_likelihood_trace.push(ll);

        for (j, c) in model.components.iter_mut().enumerate() {
            let nk: f64 = (0..pixels.len()).map(|i| resp[i * k + j]).sum();
            if nk <= 0.0 {
                c.weight = 0.0;
                continue;
            }
            let mut mean = [0.0; 3];
            for (i, x) in pixels.iter().enumerate() {
                for d in 0..3 {
                    mean[d] += resp[i * k + j] * x[d];
                }
            }
            mean = mean.map(|m| m / nk);
            let mut var = [0.0; 3];
            for (i, x) in pixels.iter().enumerate() {
                for d in 0..3 {
                    var[d] += resp[i * k + j] * (x[d] - mean[d]) * (x[d] - mean[d]);
                }
            }
            c.weight = nk / n;
            c.mean = mean;
            c.var = var.map(|v| (v / nk).max(VARIANCE_FLOOR));
        }
        let total: f64 = model.components.iter().map(|c| c.weight).sum();
        for c in &mut model.components {
            c.weight /= total;
        }
    }
    let final_ll = model.log_likelihood(pixels);
    model.log_likelihood_trace.push(final_ll);
    Ok(model)
}

/// Per-pixel posterior of a two-class (skin / non-skin) GMM classifier fitted
/// on the given image, using `initial_mask` to split the training pixels.
pub fn gmm_skin_probability(image: &PortraitImage, initial_mask: &MaskMap, k: usize) -> Result<ProbMap> {
    if initial_mask.width() != image.width() || initial_mask.height() != image.height() {
        return Err(validation("initial mask and image sizes differ"));
    }
    let pixels: Vec<[f64; 3]> = image.pixels().map(|p| p.map(f64::from)).collect();
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (p, &m) in pixels.iter().zip(initial_mask.data()) {
        if m != 0 {
            inside.push(*p)
        } else {
            outside.push(*p)
        }
    }
    if inside.len() < k || outside.len() < k {
        return Err(validation(format!(
            "degenerate initial mask ({} skin / {} non-skin pixels, need >= {k} each); \
             initialize with threshold_classify",
            inside.len(),
            outside.len()
        )));
    }
    // Each class model is seeded from its own pixel count, so swapping the
    // classes reproduces the same two fits.
    let fit = |set: &[[f64; 3]]| gmm_fit(set, k, &mut ChaCha8Rng::seed_from_u64(set.len() as u64));
    let skin = fit(&inside)?;
    let other = fit(&outside)?;
    let pi = inside.len() as f64 / pixels.len() as f64;
    let (lpi, lnpi) = (libm::log(pi), libm::log(1.0 - pi));
    let post = pixels
        .iter()
        .map(|x| {
            let a = lpi + skin.log_density(x);
            let b = lnpi + other.log_density(x);
            1.0 / (1.0 + libm::exp(b - a))
        })
        .collect();
    ProbMap::new_prob(image.width(), image.height(), post)
}

/// GMM baseline initialized by the color rules.
pub fn gmm_baseline(image: &PortraitImage, k: usize) -> Result<ProbMap> {
    gmm_skin_probability(image, &threshold_classify(image), k)
}
