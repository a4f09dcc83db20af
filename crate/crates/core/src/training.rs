//! Two-phase optimization: Stage-1 pretraining with constant guidance, then
//! two-stage finetuning where trusted masks replace predictions as guidance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, split_by_label, AlternatingBatches, AugmentConfig, BatchKind, Sample};
use crate::error::{config, validation, Error, Result};
use crate::image::{GuidanceMap, MaskMap, ProbMap};
use crate::losses::{affinity, total_loss_grad, LossConfig, LossTarget};
use crate::metrics::{binarize, Confusion, DEFAULT_THRESHOLD};
use crate::network::{
    backward, forward_batch, BackwardOptions, ForwardItem, ForwardOptions, ForwardTrace, GuidanceSource, Mode, ModelParams, OutputGrads,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self { cfg, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, values: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, f64::from(self.t));
        let c2 = 1.0 - libm::pow(beta2, f64::from(self.t));
        for (((p, &g), m), v) in values.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = f64::from(g);
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
            *p = (f64::from(*p) - update) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub finetune_epochs: usize,
    pub grad_stop: bool,
    pub mutual_guidance: bool,
    /// Skip Stage-1 pretraining and train the two-stage network from initialization.
    pub from_scratch: bool,
    pub stage1_only: bool,
    /// Keep the shared encoder fixed during finetuning.
    pub freeze_encoder_in_finetune: bool,
    pub augment: bool,
    pub augment_cfg: AugmentConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            stage1_epochs: 15,
            finetune_epochs: 10,
            grad_stop: true,
            mutual_guidance: true,
            from_scratch: false,
            stage1_only: false,
            freeze_encoder_in_finetune: false,
            augment: true,
            augment_cfg: AugmentConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if self.stage1_epochs == 0 && !self.from_scratch {
            return Err(config("stage1_epochs must be positive"));
        }
        if self.finetune_epochs == 0 && !self.stage1_only {
            return Err(config("finetune_epochs must be positive"));
        }
        if self.from_scratch && self.stage1_only {
            return Err(config("from_scratch and stage1_only are mutually exclusive"));
        }
        if !(self.adam.lr >= 0.0 && (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return Err(config("Adam needs lr >= 0 and betas in [0, 1)"));
        }
        self.loss.validate()?;
        if self.augment {
            self.augment_cfg.validate()?;
        }
        Ok(())
    }

    fn runs_stage2(&self, phase: Phase) -> bool {
        phase == Phase::Finetune && self.mutual_guidance
    }
}

/// Trusted guidance for Stage 2: `G'_B = M_S if l_S else O_S`, `G'_S = M_B if l_B else O_B`.
pub fn select_guidance(sample: &Sample, o_s: &ProbMap, o_b: &ProbMap) -> Result<(GuidanceMap, GuidanceMap)> {
    let flags = sample.flags();
    let trusted = |flag: bool, mask: Option<&MaskMap>, what: &str| -> Result<Option<GuidanceMap>> {
        if !flag {
            return Ok(None);
        }
        mask.map(|m| Some(m.to_prob())).ok_or_else(|| validation(format!("sample {}: {what} flag set without mask", sample.id)))
    };
    let g_b = trusted(flags.skin, sample.skin_mask.as_ref(), "skin")?.unwrap_or_else(|| o_s.clone());
    let g_s = trusted(flags.body, sample.body_mask.as_ref(), "body")?.unwrap_or_else(|| o_b.clone());
    Ok((g_s, g_b))
}

/// Per-step record of the training trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub kind: BatchKind,
    pub total: f64,
    pub ce: f64,
    pub crf: f64,
    pub wce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub iterations: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_crf: f64,
    pub loss_wce: f64,
    pub val_skin_iou: Option<f64>,
    pub val_body_iou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub phase: Phase,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: crate::network::ModelConfig,
    pub val_skin_iou: Option<f64>,
    pub val_body_iou: Option<f64>,
}

/// Validation score of a parameter set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub skin_iou: Option<f64>,
    pub body_iou: Option<f64>,
}

const EVAL_CHUNK: usize = 16;

/// Evaluation-mode forward over many samples; Stage 2 runs with predicted guidance when `two_stage`.
pub fn infer(params: &ModelParams, images: &[&crate::image::PortraitImage], two_stage: bool) -> Result<Vec<ForwardTrace>> {
    let opts = ForwardOptions { mode: Mode::Eval, two_stage, grad_stop: true };
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let items: Vec<ForwardItem<'_>> = chunk.iter().map(|im| ForwardItem::new(im)).collect();
        out.extend(forward_batch(params, &items, opts)?.traces);
    }
    Ok(out)
}

/// Mean skin and body IoU at threshold 0.5 over the samples carrying each mask.
pub fn validate(params: &ModelParams, samples: &[Sample], two_stage: bool) -> Result<ValidationScore> {
    if samples.is_empty() {
        return Ok(ValidationScore::default());
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let traces = infer(params, &images, two_stage)?;
    let mut acc = [(0.0, 0usize); 2];
    for (s, t) in samples.iter().zip(&traces) {
        for (k, (mask, pred)) in [(s.skin_mask.as_ref(), t.skin()), (s.body_mask.as_ref(), t.body())].into_iter().enumerate() {
            if let Some(m) = mask {
                acc[k].0 += Confusion::of(&binarize(pred, DEFAULT_THRESHOLD), m)?.iou();
                acc[k].1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(ValidationScore { skin_iou: mean(acc[0]), body_iou: mean(acc[1]) })
}

/// Training data: labeled training samples and an optional validation slice.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub validation: &'a [Sample],
}

/// Receives every finished epoch; returning an error aborts training.
pub type EpochHook<'h> = dyn FnMut(&EpochRecord, &ModelParams) -> Result<()> + 'h;

fn phase_seed(seed: u64, phase: Phase) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ if phase == Phase::Stage1 { 0x5354_4731 } else { 0x4649_4E45 }
}

fn source(g: &Option<GuidanceMap>) -> GuidanceSource<'_> {
    match g {
        Some(m) => GuidanceSource::Provided(m),
        None => GuidanceSource::Predicted,
    }
}

/// One optimizer step on one batch. Returns the batch-mean loss terms.
fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    batch: &[Sample],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<(f64, f64, f64, f64)> {
    let two_stage = cfg.runs_stage2(phase);
    let guides: Vec<(Option<GuidanceMap>, Option<GuidanceMap>)> = batch
        .iter()
        .map(|s| {
            let f = s.flags();
            // Trusted masks replace predictions; (G'_S, G'_B) = (M_B | O_B, M_S | O_S).
            (
                f.body.then(|| s.body_mask.as_ref().map(MaskMap::to_prob)).flatten(),
                f.skin.then(|| s.skin_mask.as_ref().map(MaskMap::to_prob)).flatten(),
            )
        })
        .collect();
    let items: Vec<ForwardItem<'_>> = batch
        .iter()
        .zip(&guides)
        .map(|(s, (gs, gb))| {
            let mut it = ForwardItem::new(&s.image);
            it.stage2 = [source(gs), source(gb)];
            it
        })
        .collect();
    let opts = ForwardOptions { mode: Mode::Train, two_stage, grad_stop: cfg.grad_stop };
    let fwd = forward_batch(params, &items, opts)?;

    let n = batch.len() as f64;
    let mut grads = OutputGrads::default();
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for (s, trace) in batch.iter().zip(&fwd.traces) {
        let f = s.flags();
        let needs_crf = cfg.loss.lambda1 > 0.0 && !(f.skin && f.body);
        let w = needs_crf.then(|| affinity(&s.image, &cfg.loss));
        let target = LossTarget::from_sample(s, w.as_ref());
        let (b, g) = total_loss_grad(trace, &target, &cfg.loss)?;
        if let Some(term) = b.non_finite_term() {
            return Err(Error::Numerical(format!("non-finite loss term {term} on sample {} ({phase:?})", s.id)));
        }
        sums.0 += b.total / n;
        sums.1 += b.ce_sum() / n;
        sums.2 += b.crf_sum() / n;
        sums.3 += b.wce_sum() / n;
        let [gs, gb, g2s, g2b] = g;
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        grads.o_s.push(scale(gs));
        grads.o_b.push(scale(gb));
        if two_stage {
            grads.o2_s.push(scale(g2s));
            grads.o2_b.push(scale(g2b));
        }
    }
    let bopts = BackwardOptions { encoder_frozen: phase == Phase::Finetune && cfg.freeze_encoder_in_finetune };
    let tg = backward(params, &fwd, &grads, bopts)?;
    let total = tg.total();
    if total.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite parameter gradient ({phase:?})")));
    }
    adam.step(&mut params.values, &total);
    params.update_running_stats(&fwd.stats);
    Ok(sums)
}

fn run_phase(
    params: &mut ModelParams,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    phase: Phase,
    epochs: usize,
    history: &mut History,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    let (skin_idx, body_idx) = split_by_label(data.train);
    let seed = phase_seed(cfg.seed, phase);
    let mut batches = AlternatingBatches::new(skin_idx.len(), body_idx.len(), cfg.batch_size, seed)?;
    let per_epoch = batches.iterations_per_epoch();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.augment_cfg.seed);
    let mut adam = Adam::new(cfg.adam, params.num_params());
    let input = params.config().input_size;
    let aug_cfg = AugmentConfig { crop_size: input, ..cfg.augment_cfg };
    for epoch in 0..epochs {
        let mut acc = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..per_epoch {
            let batch = batches.next().expect("endless stream");
            let subset = if batch.kind == BatchKind::Skin { &skin_idx } else { &body_idx };
            let samples: Vec<Sample> = batch
                .indices
                .iter()
                .map(|&i| {
                    let s = &data.train[subset[i]];
                    if cfg.augment {
                        augment(s, &aug_cfg, &mut aug_rng)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let (t, ce, crf, wce) = train_step(params, &mut adam, &samples, cfg, phase)?;
            history.steps.push(StepRecord { iteration: batch.iteration, kind: batch.kind, total: t, ce, crf, wce });
            acc.0 += t;
            acc.1 += ce;
            acc.2 += crf;
            acc.3 += wce;
        }
        let score = validate(params, data.validation, cfg.runs_stage2(phase))?;
        let k = per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            phase,
            iterations: per_epoch,
            loss_total: acc.0 / k,
            loss_ce: acc.1 / k,
            loss_crf: acc.2 / k,
            loss_wce: acc.3 / k,
            val_skin_iou: score.skin_iou,
            val_body_iou: score.body_iou,
        };
        hook(&rec, params)?;
        history.epochs.push(rec);
    }
    Ok(())
}

fn check_data(params: &ModelParams, data: &TrainData<'_>) -> Result<()> {
    let size = params.config().input_size;
    for s in data.train.iter().chain(data.validation) {
        if s.image.width() != size || s.image.height() != size {
            return Err(validation(format!("sample {} is {}x{}, model expects {size}x{size}", s.id, s.image.width(), s.image.height())));
        }
    }
    Ok(())
}

/// Stage-1 pretraining: only `O_S`, `O_B` are optimized, guidance fixed at the configured constants.
pub fn train_stage1(params: &mut ModelParams, data: TrainData<'_>, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<History> {
    cfg.validate()?;
    check_data(params, &data)?;
    let mut history = History::default();
    run_phase(params, data, cfg, Phase::Stage1, cfg.stage1_epochs, &mut history, hook)?;
    Ok(history)
}

/// Finetuning: Stage 2 runs with trusted guidance and all four outputs enter the loss.
/// Without mutual guidance this continues single-stage training.
pub fn finetune(params: &mut ModelParams, data: TrainData<'_>, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<History> {
    cfg.validate()?;
    check_data(params, &data)?;
    let mut history = History::default();
    run_phase(params, data, cfg, Phase::Finetune, cfg.finetune_epochs, &mut history, hook)?;
    Ok(history)
}

/// The full schedule selected by `cfg`: pretraining, finetuning, or both.
pub fn train(params: &mut ModelParams, data: TrainData<'_>, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<History> {
    cfg.validate()?;
    let mut history = History::default();
    if !cfg.from_scratch {
        let h = train_stage1(params, data, cfg, hook)?;
        history.epochs.extend(h.epochs);
        history.steps.extend(h.steps);
    }
    if !cfg.stage1_only {
        let h = finetune(params, data, cfg, hook)?;
        history.epochs.extend(h.epochs);
        history.steps.extend(h.steps);
    }
    Ok(history)
}

/// Whether final predictions come from Stage 2 under this configuration.
pub fn uses_stage2(cfg: &TrainConfig) -> bool {
    !cfg.stage1_only && cfg.mutual_guidance
}

/// Short label for logs.
pub fn describe(cfg: &TrainConfig) -> String {
    let mut parts = Vec::new();
    if cfg.stage1_only {
        parts.push("stage1-only");
    }
    if !cfg.mutual_guidance {
        parts.push("no-mutual-guidance");
    }
    if cfg.loss.lambda1 == 0.0 {
        parts.push("no-crf");
    }
    if cfg.loss.lambda2 == 0.0 {
        parts.push("no-wce");
    }
    if !cfg.grad_stop {
        parts.push("no-gradient-stop");
    }
    if cfg.from_scratch {
        parts.push("from-scratch");
    }
    if parts.is_empty() {
        String::from("full")
    } else {
        parts.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::PortraitImage;

    fn dual() -> Sample {
        let img = PortraitImage::filled(4, 4, [0.5; 3]);
        let skin = MaskMap::from_fn(4, 4, |x, _| u8::from(x == 0));
        let body = MaskMap::from_fn(4, 4, |x, _| u8::from(x < 2));
        Sample::new("d", img, Some(skin), Some(body)).unwrap()
    }

    #[test]
    fn guidance_selection_follows_flags() {
        let d = dual();
        let o_s = ProbMap::filled(4, 4, 0.2);
        let o_b = ProbMap::filled(4, 4, 0.7);
        let skin_only = Sample::new("s", d.image.clone(), d.skin_mask.clone(), None).unwrap();
        let (gs, gb) = select_guidance(&skin_only, &o_s, &o_b).unwrap();
        assert_eq!(gs, o_b);
        assert_eq!(gb, d.skin_mask.as_ref().unwrap().to_prob());
        let body_only = Sample::new("b", d.image.clone(), None, d.body_mask.clone()).unwrap();
        let (gs, gb) = select_guidance(&body_only, &o_s, &o_b).unwrap();
        assert_eq!(gs, d.body_mask.as_ref().unwrap().to_prob());
        assert_eq!(gb, o_s);
        let (gs, gb) = select_guidance(&d, &o_s, &o_b).unwrap();
        assert_eq!((gs, gb), (d.body_mask.as_ref().unwrap().to_prob(), d.skin_mask.as_ref().unwrap().to_prob()));
    }

    #[test]
    fn zero_step_size_keeps_parameters() {
        let mut values = vec![0.5f32, -1.25, 0.0, 3.0];
        let before = values.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, 4);
        adam.step(&mut values, &[0.1, -0.2, 0.3, 0.0]);
        assert_eq!(values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { from_scratch: true, stage1_only: true, ..TrainConfig::default() }.validate().is_err());
    }
}
