//! Semi-supervised loss: masked cross-entropy, a relaxed-CRF pairwise
//! regularizer, and a skin-weighted cross-entropy tying skin to body.
//!
//! Every loss has a `*_grad` twin returning the value together with its
//! gradient with respect to the probability maps. Probabilities are clamped to
//! `[eps, 1 - eps]` before logarithms; the gradient passes straight through the
//! clamp so saturated pixels still receive a training signal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelFlags;
use crate::error::{config, validation, Result};
use crate::image::{MaskMap, PortraitImage, ProbMap};
use crate::network::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WcePairing {
    /// `(O_S, O_B)` and `(O'_S, O'_B)`.
    MatchedStage,
    /// Every skin output against every body output.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub crf_sigma_color: f64,
    pub crf_sigma_pos: f64,
    pub crf_radius: usize,
    pub wce_pairing: WcePairing,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-3,
            crf_sigma_color: 0.1,
            crf_sigma_pos: 3.0,
            crf_radius: 2,
            wce_pairing: WcePairing::MatchedStage,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(config("loss weights must be non-negative"));
        }
        if self.crf_radius < 1 {
            return Err(config("crf_radius must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(config("epsilon must lie in (0, 0.5)"));
        }
        if !(self.crf_sigma_color > 0.0 && self.crf_sigma_pos > 0.0) {
            return Err(config("CRF bandwidths must be positive"));
        }
        Ok(())
    }
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn check_shape<A, B>(a: &crate::image::Plane<A>, b: &crate::image::Plane<B>) -> Result<()>
where
    A: Copy,
    B: Copy,
{
    if a.width() != b.width() || a.height() != b.height() {
        return Err(validation(format!("shape mismatch: {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    Ok(())
}

/// Mean binary cross-entropy `-[m log o + (1-m) log(1-o)]`.
pub fn ce_loss(pred: &ProbMap, target: &MaskMap, eps: f64) -> Result<f64> {
    Ok(ce_loss_grad(pred, target, eps)?.0)
}

pub fn ce_loss_grad(pred: &ProbMap, target: &MaskMap, eps: f64) -> Result<(f64, Vec<f64>)> {
    check_shape(pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &m)| {
            let o = clamp(p, eps);
            let m = f64::from(m);
            sum -= m * libm::log(o) + (1.0 - m) * libm::log(1.0 - o);
            -(m / o - (1.0 - m) / (1.0 - o)) / n
        })
        .collect();
    Ok((sum / n, grad))
}

/// Sparse symmetric affinity over pixel pairs within a Chebyshev radius.
///
/// Stores, for every pixel, the weight to each "forward" neighbor (later in
/// raster order), so every unordered pair appears exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    width: usize,
    height: usize,
    radius: usize,
    offsets: Vec<(isize, isize)>,
    /// `weights[pixel * offsets.len() + k]`; 0 when the neighbor falls outside the image.
    weights: Vec<f64>,
    pairs: usize,
}

impl AffinityMatrix {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Number of unordered in-image pixel pairs within the radius.
    pub fn pair_count(&self) -> usize {
        self.pairs
    }

    /// `W_ij` for pixel indices in raster order; zero outside the support and on the diagonal.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let (ax, ay) = ((a % self.width) as isize, (a / self.width) as isize);
        let (bx, by) = ((b % self.width) as isize, (b / self.width) as isize);
        let d = (bx - ax, by - ay);
        match self.offsets.iter().position(|&o| o == d) {
            Some(k) => self.weights[a * self.offsets.len() + k],
            None => 0.0,
        }
    }

    /// Visits every unordered pair `(i, j, W_ij)` with `i < j` inside the support.
    pub fn for_each_pair(&self, mut f: impl FnMut(usize, usize, f64)) {
        let k = self.offsets.len();
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                for (o, &(dx, dy)) in self.offsets.iter().enumerate() {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                        continue;
                    }
                    f(i, ny as usize * self.width + nx as usize, self.weights[i * k + o]);
                }
            }
        }
    }
}

/// Gaussian color/position affinity:
/// `W_ij = exp(-|c_i - c_j|^2 / (2 s_c^2) - |p_i - p_j|^2 / (2 s_p^2))` within the radius.
pub fn affinity(image: &PortraitImage, cfg: &LossConfig) -> AffinityMatrix {
    let r = cfg.crf_radius as isize;
    let mut offsets = Vec::new();
    for dy in 0..=r {
        for dx in -r..=r {
            if dy > 0 || dx > 0 {
                offsets.push((dx, dy));
            }
        }
    }
    let (w, h) = (image.width(), image.height());
    let k = offsets.len();
    let mut weights = vec![0.0; w * h * k];
    let mut pairs = 0;
    let inv_c = 1.0 / (2.0 * cfg.crf_sigma_color * cfg.crf_sigma_color);
    let inv_p = 1.0 / (2.0 * cfg.crf_sigma_pos * cfg.crf_sigma_pos);
    for y in 0..h {
        for x in 0..w {
            let ci = image.pixel(x, y);
            for (o, &(dx, dy)) in offsets.iter().enumerate() {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let cj = image.pixel(nx as usize, ny as usize);
                let dc: f64 = ci.iter().zip(&cj).map(|(a, b)| f64::from(a - b) * f64::from(a - b)).sum();
                let dp = (dx * dx + dy * dy) as f64;
                weights[(y * w + x) * k + o] = libm::exp(-dc * inv_c - dp * inv_p);
                pairs += 1;
            }
        }
    }
    AffinityMatrix { width: w, height: h, radius: cfg.crf_radius, offsets, weights, pairs }
}

/// Pairwise penalty `(1/P) sum_{i<j} W_ij (s_i - s_j)^2`, the Laplacian quadratic form of `W`.
pub fn crf_loss(pred: &ProbMap, w: &AffinityMatrix) -> Result<f64> {
    Ok(crf_loss_grad(pred, w)?.0)
}

pub fn crf_loss_grad(pred: &ProbMap, w: &AffinityMatrix) -> Result<(f64, Vec<f64>)> {
    if pred.width() != w.width || pred.height() != w.height {
        return Err(validation("probability map and affinity matrix sizes differ"));
    }
    if w.pairs == 0 {
        return Ok((0.0, vec![0.0; pred.len()]));
    }
    let s = pred.data();
    let norm = 1.0 / w.pairs as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; s.len()];
    w.for_each_pair(|i, j, wij| {
        let d = s[i] - s[j];
        sum += wij * d * d;
        let g = 2.0 * norm * wij * d;
        grad[i] += g;
        grad[j] -= g;
    });
    Ok((sum * norm, grad))
}

/// Mean of `x * CE(x, y)` with `x` the skin and `y` the body probability.
pub fn wce_loss(skin: &ProbMap, body: &ProbMap, eps: f64) -> Result<f64> {
    Ok(wce_loss_grad(skin, body, eps)?.0)
}

/// Returns `(value, d/dskin, d/dbody)`.
pub fn wce_loss_grad(skin: &ProbMap, body: &ProbMap, eps: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_shape(skin, body)?;
    let n = skin.len() as f64;
    let mut sum = 0.0;
    let mut dx = Vec::with_capacity(skin.len());
    let mut dy = Vec::with_capacity(skin.len());
    for (&xs, &ys) in skin.data().iter().zip(body.data()) {
        let x = clamp(xs, eps);
        let y = clamp(ys, eps);
        let (ly, l1y) = (libm::log(y), libm::log(1.0 - y));
        let ce = -(x * ly + (1.0 - x) * l1y);
        sum += x * ce;
        dx.push((ce + x * (l1y - ly)) / n);
        dy.push(-x * (x / y - (1.0 - x) / (1.0 - y)) / n);
    }
    Ok((sum / n, dx, dy))
}

/// One of the four network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputId {
    SkinStage1,
    BodyStage1,
    SkinStage2,
    BodyStage2,
}

impl OutputId {
    fn index(self) -> usize {
        self as usize
    }

    fn is_skin(self) -> bool {
        matches!(self, OutputId::SkinStage1 | OutputId::SkinStage2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub output: OutputId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub skin: OutputId,
    pub body: OutputId,
    pub value: f64,
}

/// Per-term values of the semi-supervised loss for one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_terms: Vec<Term>,
    pub crf_terms: Vec<Term>,
    pub wce_terms: Vec<PairTerm>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ce_sum(&self) -> f64 {
        self.ce_terms.iter().map(|t| t.value).sum()
    }

    pub fn crf_sum(&self) -> f64 {
        self.crf_terms.iter().map(|t| t.value).sum()
    }

    pub fn wce_sum(&self) -> f64 {
        self.wce_terms.iter().map(|t| t.value).sum()
    }

    /// `sum CE + lambda1 * sum CRF + lambda2 * sum WCE`.
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        self.ce_sum() + cfg.lambda1 * self.crf_sum() + cfg.lambda2 * self.wce_sum()
    }

    /// First non-finite term, for diagnostics.
    pub fn non_finite_term(&self) -> Option<alloc::string::String> {
        for t in &self.ce_terms {
            if !t.value.is_finite() {
                return Some(format!("ce[{:?}]", t.output));
            }
        }
        for t in &self.crf_terms {
            if !t.value.is_finite() {
                return Some(format!("crf[{:?}]", t.output));
            }
        }
        for t in &self.wce_terms {
            if !t.value.is_finite() {
                return Some(format!("wce[{:?},{:?}]", t.skin, t.body));
            }
        }
        (!self.total.is_finite()).then(|| alloc::string::String::from("total"))
    }
}

/// Ground truth for one sample as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTarget<'a> {
    pub flags: LabelFlags,
    pub skin_mask: Option<&'a MaskMap>,
    pub body_mask: Option<&'a MaskMap>,
    /// Affinity of the sample's image, needed only when a CRF term is active.
    pub affinity: Option<&'a AffinityMatrix>,
}

impl<'a> LossTarget<'a> {
    pub fn from_sample(sample: &'a crate::dataset::Sample, affinity: Option<&'a AffinityMatrix>) -> Self {
        Self { flags: sample.flags(), skin_mask: sample.skin_mask.as_ref(), body_mask: sample.body_mask.as_ref(), affinity }
    }
}

/// Gradients of the total loss with respect to `[O_S, O_B, O'_S, O'_B]` (empty when unused).
pub type OutputMapGrads = [Vec<f64>; 4];

/// The full semi-supervised loss of one forward trace.
///
/// CE applies to outputs of labeled branches, CRF to outputs of unlabeled
/// branches, WCE couples skin and body outputs regardless of labels. Outputs of
/// Stage 2 contribute only if the trace contains them. Zero weights skip their
/// terms entirely.
pub fn total_loss(trace: &ForwardTrace, target: &LossTarget<'_>, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(total_loss_grad(trace, target, cfg)?.0)
}

pub fn total_loss_grad(trace: &ForwardTrace, target: &LossTarget<'_>, cfg: &LossConfig) -> Result<(LossBreakdown, OutputMapGrads)> {
    let mut outputs: Vec<(OutputId, &ProbMap)> = vec![(OutputId::SkinStage1, &trace.o_s), (OutputId::BodyStage1, &trace.o_b)];
    if let Some(o) = &trace.o2_s {
        outputs.push((OutputId::SkinStage2, o));
    }
    if let Some(o) = &trace.o2_b {
        outputs.push((OutputId::BodyStage2, o));
    }
    let n = trace.o_s.len();
    let mut grads: OutputMapGrads = Default::default();
    for (id, _) in &outputs {
        grads[id.index()] = vec![0.0; n];
    }
    let mut out = LossBreakdown::default();
    let add = |g: &mut Vec<f64>, d: &[f64], scale: f64| {
        for (a, b) in g.iter_mut().zip(d) {
            *a += scale * b;
        }
    };

    for &(id, map) in &outputs {
        let labeled = if id.is_skin() { target.flags.skin } else { target.flags.body };
        if labeled {
            let mask = if id.is_skin() { target.skin_mask } else { target.body_mask };
            let mask = mask.ok_or_else(|| validation(format!("{id:?}: label flag set but mask missing")))?;
            let (v, g) = ce_loss_grad(map, mask, cfg.epsilon)?;
            out.ce_terms.push(Term { output: id, value: v });
            add(&mut grads[id.index()], &g, 1.0);
        } else if cfg.lambda1 > 0.0 {
            let w = target.affinity.ok_or_else(|| validation("CRF term requires an affinity matrix"))?;
            let (v, g) = crf_loss_grad(map, w)?;
            out.crf_terms.push(Term { output: id, value: v });
            add(&mut grads[id.index()], &g, cfg.lambda1);
        }
    }

    if cfg.lambda2 > 0.0 {
        let mut pairs = vec![(OutputId::SkinStage1, OutputId::BodyStage1)];
        let stage2 = trace.o2_s.is_some() && trace.o2_b.is_some();
        match (cfg.wce_pairing, stage2) {
            (_, false) => {}
            (WcePairing::MatchedStage, true) => pairs.push((OutputId::SkinStage2, OutputId::BodyStage2)),
            (WcePairing::AllPairs, true) => pairs.extend([
                (OutputId::SkinStage1, OutputId::BodyStage2),
                (OutputId::SkinStage2, OutputId::BodyStage1),
                (OutputId::SkinStage2, OutputId::BodyStage2),
            ]),
        }
        let lookup = |id: OutputId| outputs.iter().find(|(o, _)| *o == id).map(|(_, m)| *m).expect("pair output present");
        for (s, b) in pairs {
            let (v, gs, gb) = wce_loss_grad(lookup(s), lookup(b), cfg.epsilon)?;
            out.wce_terms.push(PairTerm { skin: s, body: b, value: v });
            add(&mut grads[s.index()], &gs, cfg.lambda2);
            add(&mut grads[b.index()], &gb, cfg.lambda2);
        }
    }
    out.total = out.recombine(cfg);
    Ok((out, grads))
}
