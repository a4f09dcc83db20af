//! Shared-encoder, dual-decoder U-Net with mutual guidance.
//!
//! One encoder embeds the image. Each branch (skin, body) owns a decoder and a
//! half-width guidance encoder whose deepest feature is concatenated with the
//! image bottleneck. The decoders run twice: Stage 1 with the initial guidance
//! signals, Stage 2 with the other branch's Stage-1 output (or a trusted mask).
//! Decoder weights are shared between the stages; batch-norm running statistics
//! are tracked per stage because the guidance statistics differ between them.
//!
//! All trainable tensors live in one flat `f32` arena described by named
//! [`TensorSpec`]s, which keeps the optimizer and checkpointing trivial.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::image::{GuidanceMap, PortraitImage, ProbMap};
use crate::tensor::{self, BnCache, Tensor};

/// Lower/upper bounds applied to sigmoid outputs so probabilities stay in the open interval.
pub const PROB_FLOOR: f32 = 1e-7;
pub const PROB_CEIL: f32 = 1.0 - 1e-7;

const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Skin,
    Body,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Skin, Branch::Body];

    pub fn index(self) -> usize {
        match self {
            Branch::Skin => 0,
            Branch::Body => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Skin => "skin",
            Branch::Body => "body",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Skin => Branch::Body,
            Branch::Body => Branch::Skin,
        }
    }
}

/// Which decoder application a batch-norm statistic or gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    fn slot(self) -> usize {
        match self {
            Stage::One => 0,
            Stage::Two => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Constant Stage-1 guidance `e_S` (fed to the body decoder).
    pub initial_guidance_skin: f64,
    /// Constant Stage-1 guidance `e_B` (fed to the skin decoder).
    pub initial_guidance_body: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: 64, base_channels: 16, depth: 4, initial_guidance_skin: 0.0, initial_guidance_body: 0.0 }
    }
}

impl ModelConfig {
    /// The full-resolution configuration: 512 input, 1024-channel bottleneck.
    pub fn full_scale() -> Self {
        Self { input_size: 512, base_channels: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config("depth must be positive"));
        }
        if self.input_size < 8 || !self.input_size.is_multiple_of(1 << self.depth) {
            return Err(config(format!("input_size {} must be >= 8 and divisible by 2^depth = {}", self.input_size, 1usize << self.depth)));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(config("base_channels must be an even number >= 2 (guidance encoder uses half width)"));
        }
        for e in [self.initial_guidance_skin, self.initial_guidance_body] {
            if !(0.0..=1.0).contains(&e) {
                return Err(config("initial guidance constants must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn guidance_channels(&self) -> usize {
        self.base_channels / 2
    }

    /// Output channels of encoder level `i` (`i == depth` is the bottleneck).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> level
    }

    /// `(spatial side, channels)` of the image bottleneck `E_I`.
    pub fn bottleneck_dims(&self) -> (usize, usize) {
        (self.level_size(self.depth), self.level_channels(self.depth))
    }

    /// `(spatial side, channels)` of the guidance encoder's deepest feature.
    pub fn guidance_bottleneck_dims(&self) -> (usize, usize) {
        (self.level_size(self.depth), self.guidance_channels() << self.depth)
    }

    /// Channels entering each decoder after guidance fusion.
    pub fn fused_channels(&self) -> usize {
        self.bottleneck_dims().1 + self.guidance_bottleneck_dims().1
    }
}

/// Name, shape and arena offset of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct ConvUnit {
    cin: usize,
    cout: usize,
    weight: usize,
    gamma: usize,
    beta: usize,
    /// Buffer offset of `[mean, var]` for slot 0; further slots follow contiguously.
    stats: usize,
}

#[derive(Debug, Clone)]
struct EncoderPlan {
    levels: Vec<[ConvUnit; 2]>,
}

#[derive(Debug, Clone)]
struct UpBlock {
    up: ConvUnit,
    a: ConvUnit,
    b: ConvUnit,
}

#[derive(Debug, Clone)]
struct DecoderPlan {
    guidance: EncoderPlan,
    ups: Vec<UpBlock>,
    head_weight: usize,
    head_bias: usize,
    head_cin: usize,
}

#[derive(Debug, Clone)]
struct Architecture {
    encoder: EncoderPlan,
    decoders: [DecoderPlan; 2],
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<TensorSpec>,
    param_len: usize,
    buffers: Vec<TensorSpec>,
    buffer_len: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.param_len;
        self.params.push(TensorSpec { name, shape, offset, len });
        self.param_len += len;
        offset
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.buffer_len;
        self.buffers.push(TensorSpec { name, shape, offset, len });
        self.buffer_len += len;
        offset
    }

    fn unit(&mut self, prefix: &str, cin: usize, cout: usize, slots: usize) -> ConvUnit {
        let weight = self.param(format!("{prefix}.weight"), vec![cout, cin, 3, 3]);
        let gamma = self.param(format!("{prefix}.bn.gamma"), vec![cout]);
        let beta = self.param(format!("{prefix}.bn.beta"), vec![cout]);
        let mut stats = usize::MAX;
        for slot in 0..slots {
            let suffix = if slots == 1 { String::new() } else { format!(".stage{}", slot + 1) };
            let m = self.buffer(format!("{prefix}.bn.running_mean{suffix}"), vec![cout]);
            self.buffer(format!("{prefix}.bn.running_var{suffix}"), vec![cout]);
            if slot == 0 {
                stats = m;
            }
        }
        ConvUnit { cin, cout, weight, gamma, beta, stats }
    }

    fn encoder(&mut self, prefix: &str, in_ch: usize, base: usize, depth: usize, slots: usize) -> EncoderPlan {
        let mut levels = Vec::with_capacity(depth + 1);
        let mut cin = in_ch;
        for level in 0..=depth {
            let cout = base << level;
            let u1 = self.unit(&format!("{prefix}.level{level}.conv1"), cin, cout, slots);
            let u2 = self.unit(&format!("{prefix}.level{level}.conv2"), cout, cout, slots);
            levels.push([u1, u2]);
            cin = cout;
        }
        EncoderPlan { levels }
    }

    fn decoder(&mut self, cfg: &ModelConfig, branch: Branch) -> DecoderPlan {
        let p = branch.name();
        let guidance = self.encoder(&format!("{p}.guidance"), 1, cfg.guidance_channels(), cfg.depth, 2);
        let mut ups = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.fused_channels();
        for level in (0..cfg.depth).rev() {
            let cout = cfg.level_channels(level);
            let up = self.unit(&format!("{p}.up{level}.upconv"), cin, cout, 2);
            let a = self.unit(&format!("{p}.up{level}.conv1"), 2 * cout, cout, 2);
            let b = self.unit(&format!("{p}.up{level}.conv2"), cout, cout, 2);
            ups.push(UpBlock { up, a, b });
            cin = cout;
        }
        let head_weight = self.param(format!("{p}.head.weight"), vec![1, cin, 1, 1]);
        let head_bias = self.param(format!("{p}.head.bias"), vec![1]);
        DecoderPlan { guidance, ups, head_weight, head_bias, head_cin: cin }
    }
}

fn build(cfg: &ModelConfig) -> (Architecture, LayoutBuilder) {
    let mut b = LayoutBuilder::default();
    let encoder = b.encoder("encoder", 3, cfg.base_channels, cfg.depth, 1);
    let skin = b.decoder(cfg, Branch::Skin);
    let body = b.decoder(cfg, Branch::Body);
    (Architecture { encoder, decoders: [skin, body] }, b)
}

/// All weights and running statistics of the network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    arch: Architecture,
    param_specs: Vec<TensorSpec>,
    buffer_specs: Vec<TensorSpec>,
    pub values: Vec<f32>,
    pub buffers: Vec<f32>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values && self.buffers == other.buffers
    }
}

impl ModelParams {
    /// Fan-in scaled normal initialization; normalization scale 1, shift 0.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (arch, layout) = build(&config);
        let mut values = vec![0.0f32; layout.param_len];
        let mut buffers = vec![0.0f32; layout.buffer_len];
        for spec in &layout.params {
            let slice = &mut values[spec.offset..spec.offset + spec.len];
            if spec.name.ends_with(".gamma") {
                slice.fill(1.0);
            } else if spec.name.ends_with(".weight") {
                let fan_in: usize = spec.shape[1..].iter().product();
                let gain = if spec.name.contains(".head.") { 1.0 } else { 2.0 };
                let std = libm::sqrtf(gain / fan_in as f32);
                for v in slice.iter_mut() {
                    let z: f32 = StandardNormal.sample(rng);
                    *v = z * std;
                }
            }
        }
        for spec in &layout.buffers {
            if spec.name.contains("running_var") {
                buffers[spec.offset..spec.offset + spec.len].fill(1.0);
            }
        }
        Ok(Self { config, arch, param_specs: layout.params, buffer_specs: layout.buffers, values, buffers })
    }

    /// Rebuilds a parameter set from stored tensors (e.g. a checkpoint).
    pub fn from_parts(config: ModelConfig, values: Vec<f32>, buffers: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let (arch, layout) = build(&config);
        if values.len() != layout.param_len || buffers.len() != layout.buffer_len {
            return Err(validation(format!(
                "parameter count mismatch: expected {}+{} values, got {}+{}",
                layout.param_len,
                layout.buffer_len,
                values.len(),
                buffers.len()
            )));
        }
        Ok(Self { config, arch, param_specs: layout.params, buffer_specs: layout.buffers, values, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[TensorSpec] {
        &self.param_specs
    }

    pub fn buffer_specs(&self) -> &[TensorSpec] {
        &self.buffer_specs
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.param_specs.iter().find(|s| s.name == name)
    }

    /// FNV-1a over the bit patterns of all weights and buffers.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.values.iter().chain(&self.buffers) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Index ranges of every trainable tensor belonging to a branch's decoder
    /// (including its guidance encoder).
    pub fn decoder_ranges(&self, branch: Branch) -> Vec<core::ops::Range<usize>> {
        let prefix = format!("{}.", branch.name());
        self.param_specs.iter().filter(|s| s.name.starts_with(&prefix)).map(|s| s.offset..s.offset + s.len).collect()
    }

    pub fn encoder_ranges(&self) -> Vec<core::ops::Range<usize>> {
        self.param_specs.iter().filter(|s| s.name.starts_with("encoder.")).map(|s| s.offset..s.offset + s.len).collect()
    }

    fn slice(&self, offset: usize, len: usize) -> &[f32] {
        &self.values[offset..offset + len]
    }

    fn stats(&self, unit: &ConvUnit, slot: usize) -> (&[f32], &[f32]) {
        let base = unit.stats + slot * 2 * unit.cout;
        (&self.buffers[base..base + unit.cout], &self.buffers[base + unit.cout..base + 2 * unit.cout])
    }

    /// Folds batch statistics recorded during a training forward pass into the running averages.
    pub fn update_running_stats(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let c = u.mean.len();
            for i in 0..c {
                let m = &mut self.buffers[u.offset + i];
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * u.mean[i];
                let v = &mut self.buffers[u.offset + c + i];
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * u.var[i];
            }
        }
    }
}

/// Batch mean/variance observed for one batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    offset: usize,
    mean: Vec<f32>,
    var: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caches are kept for the backward pass.
    Train,
    /// Running statistics; no caches.
    Eval,
}

struct Ctx {
    mode: Mode,
    slot: usize,
    stats: Vec<StatUpdate>,
}

struct UnitCache {
    input: Tensor,
    bn: BnCache,
    output: Tensor,
}

fn unit_forward(p: &ModelParams, u: &ConvUnit, x: Tensor, ctx: &mut Ctx) -> (Tensor, Option<UnitCache>) {
    let z = tensor::conv3x3(&x, p.slice(u.weight, u.cin * u.cout * 9), u.cout);
    let gamma = p.slice(u.gamma, u.cout);
    let beta = p.slice(u.beta, u.cout);
    match ctx.mode {
        Mode::Train => {
            let (mut y, bn) = tensor::batchnorm_train(&z, gamma, beta);
            tensor::relu_inplace(&mut y);
            let m = z.channel_len() as f32;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            ctx.stats.push(StatUpdate {
                offset: u.stats + ctx.slot * 2 * u.cout,
                mean: bn.mean.clone(),
                var: bn.var.iter().map(|v| v * unbias).collect(),
            });
            let cache = UnitCache { input: x, bn, output: y.clone() };
            (y, Some(cache))
        }
        Mode::Eval => {
            let (mean, var) = p.stats(u, ctx.slot);
            let mut y = tensor::batchnorm_eval(&z, gamma, beta, mean, var);
            tensor::relu_inplace(&mut y);
            (y, None)
        }
    }
}

fn unit_backward(p: &ModelParams, u: &ConvUnit, cache: &UnitCache, mut dy: Tensor, grads: &mut [f32], need_dx: bool) -> Option<Tensor> {
    tensor::relu_backward(&cache.output, &mut dy);
    let gamma = p.slice(u.gamma, u.cout);
    let (dgamma, dbeta) = {
        let (lo, hi) = grads.split_at_mut(u.beta);
        (&mut lo[u.gamma..u.gamma + u.cout], &mut hi[..u.cout])
    };
    let dz = tensor::batchnorm_backward(&cache.bn, gamma, &dy, dgamma, dbeta);
    let w = p.slice(u.weight, u.cin * u.cout * 9);
    tensor::conv3x3_backward(&cache.input, w, &dz, &mut grads[u.weight..u.weight + w.len()], need_dx)
}

/// Encoder output: bottleneck `E_I` plus per-level skip features.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub bottleneck: Tensor,
    pub skips: Vec<Tensor>,
}

struct EncoderCache {
    units: Vec<[UnitCache; 2]>,
    pools: Vec<Vec<u32>>,
}

fn encoder_forward(p: &ModelParams, plan: &EncoderPlan, x: Tensor, ctx: &mut Ctx) -> (FeatureMap, Option<EncoderCache>) {
    let depth = plan.levels.len() - 1;
    let mut skips = Vec::with_capacity(depth);
    let mut units = Vec::new();
    let mut pools = Vec::new();
    let mut cur = x;
    for (level, [u1, u2]) in plan.levels.iter().enumerate() {
        let (h, c1) = unit_forward(p, u1, cur, ctx);
        let (h, c2) = unit_forward(p, u2, h, ctx);
        if let (Some(c1), Some(c2)) = (c1, c2) {
            units.push([c1, c2]);
        }
        if level < depth {
            let (pooled, arg) = tensor::maxpool2(&h);
            if ctx.mode == Mode::Train {
                pools.push(arg);
            }
            skips.push(h);
            cur = pooled;
        } else {
            cur = h;
        }
    }
    let cache = (ctx.mode == Mode::Train).then_some(EncoderCache { units, pools });
    (FeatureMap { bottleneck: cur, skips }, cache)
}

/// Backward through an encoder. `dskips` may be empty (guidance encoder).
fn encoder_backward(
    p: &ModelParams,
    plan: &EncoderPlan,
    cache: &EncoderCache,
    dbottleneck: Tensor,
    mut dskips: Vec<Tensor>,
    grads: &mut [f32],
    need_dx: bool,
) -> Option<Tensor> {
    let depth = plan.levels.len() - 1;
    let mut dcur = dbottleneck;
    for level in (0..=depth).rev() {
        let [u1, u2] = &plan.levels[level];
        let [c1, c2] = &cache.units[level];
        if level < depth {
            let out = &c2.output;
            let mut d = tensor::maxpool2_backward(&cache.pools[level], &dcur, out.h, out.w);
            if let Some(ds) = dskips.get(level) {
                d.add_assign(ds);
            }
            dcur = d;
        }
        let d = unit_backward(p, u2, c2, dcur, grads, true).expect("dx requested");
        {
            let d = unit_backward(p, u1, c1, d, grads, level > 0 || need_dx)?;
            dcur = d
        }
    }
    dskips.clear();
    Some(dcur)
}

struct DecoderCache {
    guidance: EncoderCache,
    ups: Vec<[UnitCache; 3]>,
    head_input: Tensor,
    logits: Tensor,
}

fn decoder_forward(
    p: &ModelParams,
    branch: Branch,
    features: &FeatureMap,
    guidance: Tensor,
    ctx: &mut Ctx,
) -> (Tensor, Option<DecoderCache>) {
    let plan = &p.arch.decoders[branch.index()];
    let (gfeat, gcache) = encoder_forward(p, &plan.guidance, guidance, ctx);
    let mut cur = features.bottleneck.concat_channels(&gfeat.bottleneck);
    let mut ups = Vec::new();
    let depth = plan.ups.len();
    for (i, blk) in plan.ups.iter().enumerate() {
        let level = depth - 1 - i;
        let (u, cu) = unit_forward(p, &blk.up, tensor::upsample2(&cur), ctx);
        let cat = u.concat_channels(&features.skips[level]);
        let (a, ca) = unit_forward(p, &blk.a, cat, ctx);
        let (b, cb) = unit_forward(p, &blk.b, a, ctx);
        if let (Some(cu), Some(ca), Some(cb)) = (cu, ca, cb) {
            ups.push([cu, ca, cb]);
        }
        cur = b;
    }
    let logits = tensor::conv1x1(&cur, p.slice(plan.head_weight, plan.head_cin), p.slice(plan.head_bias, 1), 1);
    let cache = gcache.map(|guidance| DecoderCache { guidance, ups, head_input: cur, logits: logits.clone() });
    (logits, cache)
}

struct DecoderGrads {
    dbottleneck: Tensor,
    dskips: Vec<Tensor>,
    dguidance: Option<Tensor>,
}

fn decoder_backward(
    p: &ModelParams,
    branch: Branch,
    cache: &DecoderCache,
    dlogits: Tensor,
    grads: &mut [f32],
    need_guidance_grad: bool,
) -> DecoderGrads {
    let plan = &p.arch.decoders[branch.index()];
    let hw = plan.head_weight;
    let (dw, db) = {
        let (lo, hi) = grads.split_at_mut(plan.head_bias);
        (&mut lo[hw..hw + plan.head_cin], &mut hi[..1])
    };
    let mut d = tensor::conv1x1_backward(&cache.head_input, p.slice(hw, plan.head_cin), &dlogits, dw, db);
    let depth = plan.ups.len();
    let mut dskips: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
    for (i, blk) in plan.ups.iter().enumerate().rev() {
        let level = depth - 1 - i;
        let [cu, ca, cb] = &cache.ups[i];
        let db = unit_backward(p, &blk.b, cb, d, grads, true).expect("dx requested");
        let dcat = unit_backward(p, &blk.a, ca, db, grads, true).expect("dx requested");
        let (du, dskip) = dcat.split_channels(blk.up.cout);
        dskips[level] = Some(dskip);
        let dup = unit_backward(p, &blk.up, cu, du, grads, true).expect("dx requested");
        d = tensor::upsample2_backward(&dup);
    }
    let (dbottleneck, dgb) = d.split_channels(p.config.bottleneck_dims().1);
    let dguidance = encoder_backward(p, &plan.guidance, &cache.guidance, dgb, Vec::new(), grads, need_guidance_grad);
    DecoderGrads { dbottleneck, dskips: dskips.into_iter().map(|t| t.expect("every level visited")).collect(), dguidance }
}

fn sigmoid_probs(logits: &Tensor) -> Vec<ProbMap> {
    let (h, w) = (logits.h, logits.w);
    (0..logits.n)
        .map(|n| {
            let plane = logits.plane(0, n);
            let data = plane.iter().map(|&z| f64::from((1.0 / (1.0 + libm::expf(-z))).clamp(PROB_FLOOR, PROB_CEIL))).collect();
            ProbMap::new_prob(w, h, data).expect("sigmoid output in range")
        })
        .collect()
}

fn images_to_tensor(cfg: &ModelConfig, images: &[&PortraitImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(validation("empty image batch"));
    }
    let s = cfg.input_size;
    let mut t = Tensor::zeros(3, images.len(), s, s);
    for (n, img) in images.iter().enumerate() {
        if img.width() != s || img.height() != s {
            return Err(validation(format!("image is {}x{}, model expects {s}x{s}", img.width(), img.height())));
        }
        let planar = img.to_planar();
        for c in 0..3 {
            t.plane_mut(c, n).copy_from_slice(&planar[c * s * s..(c + 1) * s * s]);
        }
    }
    Ok(t)
}

fn maps_to_tensor(cfg: &ModelConfig, maps: &[&GuidanceMap]) -> Result<Tensor> {
    let s = cfg.input_size;
    let mut t = Tensor::zeros(1, maps.len(), s, s);
    for (n, m) in maps.iter().enumerate() {
        if m.width() != s || m.height() != s {
            return Err(validation(format!("guidance map is {}x{}, expected {s}x{s}", m.width(), m.height())));
        }
        for (d, &v) in t.plane_mut(0, n).iter_mut().zip(m.data()) {
            *d = v as f32;
        }
    }
    Ok(t)
}

fn constant_guidance(cfg: &ModelConfig, n: usize, value: f64) -> Tensor {
    let s = cfg.input_size;
    Tensor::from_data(1, n, s, s, vec![value as f32; n * s * s])
}

/// Shared encoder over a batch, evaluation mode.
pub fn encode(params: &ModelParams, images: &[&PortraitImage]) -> Result<FeatureMap> {
    let x = images_to_tensor(&params.config, images)?;
    let mut ctx = Ctx { mode: Mode::Eval, slot: 0, stats: Vec::new() };
    Ok(encoder_forward(params, &params.arch.encoder, x, &mut ctx).0)
}

/// One decoder application in evaluation mode using the running statistics of `stage`.
pub fn decode(
    params: &ModelParams,
    branch: Branch,
    features: &FeatureMap,
    guidance: &[&GuidanceMap],
    stage: Stage,
) -> Result<Vec<ProbMap>> {
    if guidance.len() != features.bottleneck.n {
        return Err(validation("one guidance map per image is required"));
    }
    let g = maps_to_tensor(&params.config, guidance)?;
    let mut ctx = Ctx { mode: Mode::Eval, slot: stage.slot(), stats: Vec::new() };
    let (logits, _) = decoder_forward(params, branch, features, g, &mut ctx);
    Ok(sigmoid_probs(&logits))
}

/// Guidance for one decoder in Stage 2 of a training forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GuidanceSource<'a> {
    /// The other branch's Stage-1 output.
    Predicted,
    /// An externally supplied map (e.g. a trusted ground-truth mask).
    Provided(&'a GuidanceMap),
}

/// Per-sample inputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardItem<'a> {
    pub image: &'a PortraitImage,
    /// Stage-1 guidance maps `(e_S, e_B)`; `None` uses the configured constants.
    pub initial: Option<(&'a GuidanceMap, &'a GuidanceMap)>,
    /// Stage-2 guidance `(G'_S, G'_B)`.
    pub stage2: [GuidanceSource<'a>; 2],
}

impl<'a> ForwardItem<'a> {
    pub fn new(image: &'a PortraitImage) -> Self {
        Self { image, initial: None, stage2: [GuidanceSource::Predicted, GuidanceSource::Predicted] }
    }
}

/// The four outputs of a mutually guided forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub o_s: ProbMap,
    pub o_b: ProbMap,
    /// Stage-2 outputs; `None` when only Stage 1 ran.
    pub o2_s: Option<ProbMap>,
    pub o2_b: Option<ProbMap>,
    /// Guidance consumed in Stage 2, `(G'_S, G'_B)`.
    pub guidance_stage2: Option<(GuidanceMap, GuidanceMap)>,
    pub grad_stop: bool,
}

impl ForwardTrace {
    /// Final skin prediction: `O'_S` when Stage 2 ran, otherwise `O_S`.
    pub fn skin(&self) -> &ProbMap {
        self.o2_s.as_ref().unwrap_or(&self.o_s)
    }

    pub fn body(&self) -> &ProbMap {
        self.o2_b.as_ref().unwrap_or(&self.o_b)
    }
}

/// Options of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub two_stage: bool,
    pub grad_stop: bool,
}

/// A forward pass with everything the backward pass needs.
pub struct BatchForward {
    pub traces: Vec<ForwardTrace>,
    pub stats: Vec<StatUpdate>,
    opts: ForwardOptions,
    n: usize,
    encoder_cache: Option<EncoderCache>,
    stage1: [Option<DecoderCache>; 2],
    stage2: [Option<DecoderCache>; 2],
    /// Per sample and branch: did Stage-2 guidance come from the other branch's output?
    predicted_guidance: Vec<[bool; 2]>,
}

/// Runs Stage 1 and, if requested, Stage 2 over a batch.
pub fn forward_batch(params: &ModelParams, items: &[ForwardItem<'_>], opts: ForwardOptions) -> Result<BatchForward> {
    let cfg = &params.config;
    let images: Vec<&PortraitImage> = items.iter().map(|it| it.image).collect();
    let x = images_to_tensor(cfg, &images)?;
    let n = items.len();
    let mut ctx = Ctx { mode: opts.mode, slot: 0, stats: Vec::new() };
    let (features, encoder_cache) = encoder_forward(params, &params.arch.encoder, x, &mut ctx);

    // Stage 1: the skin decoder receives e_B and the body decoder e_S.
    let initial = |branch: Branch| -> Result<Tensor> {
        let guide_of = branch.other();
        if items.iter().all(|it| it.initial.is_none()) {
            let v = match guide_of {
                Branch::Skin => cfg.initial_guidance_skin,
                Branch::Body => cfg.initial_guidance_body,
            };
            return Ok(constant_guidance(cfg, n, v));
        }
        let mut t = Tensor::zeros(1, n, cfg.input_size, cfg.input_size);
        for (i, it) in items.iter().enumerate() {
            match it.initial {
                Some((e_s, e_b)) => {
                    let m = if guide_of == Branch::Skin { e_s } else { e_b };
                    let one = maps_to_tensor(cfg, &[m])?;
                    t.plane_mut(0, i).copy_from_slice(&one.data);
                }
                None => {
                    let v = if guide_of == Branch::Skin { cfg.initial_guidance_skin } else { cfg.initial_guidance_body };
                    t.plane_mut(0, i).fill(v as f32);
                }
            }
        }
        Ok(t)
    };
    ctx.slot = 0;
    let g_s = initial(Branch::Skin)?;
    let g_b = initial(Branch::Body)?;
    let (l_s, c_s) = decoder_forward(params, Branch::Skin, &features, g_s, &mut ctx);
    let (l_b, c_b) = decoder_forward(params, Branch::Body, &features, g_b, &mut ctx);
    let o_s = sigmoid_probs(&l_s);
    let o_b = sigmoid_probs(&l_b);

    let mut predicted_guidance = vec![[false; 2]; n];
    let mut stage2: [Option<DecoderCache>; 2] = [None, None];
    let mut o2: [Option<Vec<ProbMap>>; 2] = [None, None];
    let mut g2: Vec<Option<(GuidanceMap, GuidanceMap)>> = vec![None; n];
    if opts.two_stage {
        ctx.slot = 1;
        // G'_S defaults to O_B, G'_B to O_S.
        let mut guides: [Vec<GuidanceMap>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (i, it) in items.iter().enumerate() {
            for branch in Branch::BOTH {
                let k = branch.index();
                let g = match it.stage2[k] {
                    GuidanceSource::Predicted => {
                        predicted_guidance[i][k] = true;
                        match branch {
                            Branch::Skin => o_b[i].clone(),
                            Branch::Body => o_s[i].clone(),
                        }
                    }
                    GuidanceSource::Provided(m) => {
                        if m.width() != it.image.width() || m.height() != it.image.height() {
                            return Err(validation("stage-2 guidance override must match the input size"));
                        }
                        m.clone()
                    }
                };
                guides[k].push(g);
            }
        }
        for branch in Branch::BOTH {
            let k = branch.index();
            let refs: Vec<&GuidanceMap> = guides[k].iter().collect();
            let g = maps_to_tensor(cfg, &refs)?;
            let (logits, cache) = decoder_forward(params, branch, &features, g, &mut ctx);
            o2[k] = Some(sigmoid_probs(&logits));
            stage2[k] = cache;
        }
        let [gs, gb] = guides;
        for (i, (s, b)) in gs.into_iter().zip(gb).enumerate() {
            g2[i] = Some((s, b));
        }
    }

    let [o2s, o2b] = o2;
    let mut o2s = o2s.map(|v| v.into_iter().map(Some).collect::<Vec<_>>()).unwrap_or_else(|| vec![None; n]);
    let mut o2b = o2b.map(|v| v.into_iter().map(Some).collect::<Vec<_>>()).unwrap_or_else(|| vec![None; n]);
    let traces = o_s
        .into_iter()
        .zip(o_b)
        .enumerate()
        .map(|(i, (s, b))| ForwardTrace {
            o_s: s,
            o_b: b,
            o2_s: o2s[i].take(),
            o2_b: o2b[i].take(),
            guidance_stage2: g2[i].take(),
            grad_stop: opts.grad_stop,
        })
        .collect();
    Ok(BatchForward { traces, stats: ctx.stats, opts, n, encoder_cache, stage1: [c_s, c_b], stage2, predicted_guidance })
}

/// Stage-1 forward in evaluation mode: `O_S = D_S(E_I, e_B)`, `O_B = D_B(E_I, e_S)`.
pub fn forward_stage1(params: &ModelParams, items: &[ForwardItem<'_>]) -> Result<Vec<(ProbMap, ProbMap)>> {
    let opts = ForwardOptions { mode: Mode::Eval, two_stage: false, grad_stop: true };
    Ok(forward_batch(params, items, opts)?.traces.into_iter().map(|t| (t.o_s, t.o_b)).collect())
}

/// Two-stage forward in evaluation mode for a single image.
pub fn forward_two_stage(
    params: &ModelParams,
    image: &PortraitImage,
    guidance_override: Option<(&GuidanceMap, &GuidanceMap)>,
    grad_stop: bool,
) -> Result<ForwardTrace> {
    let mut item = ForwardItem::new(image);
    if let Some((gs, gb)) = guidance_override {
        item.stage2 = [GuidanceSource::Provided(gs), GuidanceSource::Provided(gb)];
    }
    let opts = ForwardOptions { mode: Mode::Eval, two_stage: true, grad_stop };
    Ok(forward_batch(params, &[item], opts)?.traces.remove(0))
}

/// Loss gradients with respect to the four output maps, per sample (row-major, `f64`).
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub o_s: Vec<Vec<f64>>,
    pub o_b: Vec<Vec<f64>>,
    pub o2_s: Vec<Vec<f64>>,
    pub o2_b: Vec<Vec<f64>>,
}

/// Parameter gradients, split by where they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGrads {
    /// Contributions of the Stage-1 decoder applications.
    pub stage1: Vec<f32>,
    /// Contributions of the Stage-2 decoder applications.
    pub stage2: Vec<f32>,
    /// Contributions to the shared encoder.
    pub encoder: Vec<f32>,
}

impl TraceGrads {
    pub fn total(&self) -> Vec<f32> {
        self.stage1.iter().zip(&self.stage2).zip(&self.encoder).map(|((a, b), c)| a + b + c).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Skip the encoder's backward pass (its gradient stays zero).
    pub encoder_frozen: bool,
}

/// Derivative of the sigmoid from its logits, robust where the clamped output saturates.
fn dlogits_exact(probs_grad: &[Vec<f64>], logits: &Tensor) -> Option<Tensor> {
    if probs_grad.is_empty() {
        return None;
    }
    let mut t = Tensor::zeros(1, logits.n, logits.h, logits.w);
    for (i, g) in probs_grad.iter().enumerate() {
        let z = logits.plane(0, i).to_vec();
        for ((d, &gv), &zv) in t.plane_mut(0, i).iter_mut().zip(g).zip(&z) {
            let s = 1.0 / (1.0 + libm::exp(-f64::from(zv)));
            let sn = 1.0 / (1.0 + libm::exp(f64::from(zv)));
            *d = (gv * s * sn) as f32;
        }
    }
    Some(t)
}

/// Backpropagates output-map gradients through the network.
///
/// With `grad_stop`, the Stage-2 guidance inputs are treated as constants, so
/// no gradient reaches Stage-1 outputs through the guidance path.
pub fn backward(params: &ModelParams, fwd: &BatchForward, grads: &OutputGrads, opts: BackwardOptions) -> Result<TraceGrads> {
    if fwd.opts.mode != Mode::Train {
        return Err(validation("backward requires a training-mode forward pass"));
    }
    let cfg = &params.config;
    let len = params.values.len();
    let mut out = TraceGrads { stage1: vec![0.0; len], stage2: vec![0.0; len], encoder: vec![0.0; len] };
    let (bs, bc) = cfg.bottleneck_dims();
    let mut dbottleneck = Tensor::zeros(bc, fwd.n, bs, bs);
    let mut dskips: Vec<Tensor> =
        (0..cfg.depth).map(|l| Tensor::zeros(cfg.level_channels(l), fwd.n, cfg.level_size(l), cfg.level_size(l))).collect();
    let accumulate = |g: &DecoderGrads, dbottleneck: &mut Tensor, dskips: &mut Vec<Tensor>| {
        dbottleneck.add_assign(&g.dbottleneck);
        for (a, b) in dskips.iter_mut().zip(&g.dskips) {
            a.add_assign(b);
        }
    };

    // Extra gradient flowing into Stage-1 outputs through the Stage-2 guidance path.
    let mut via_guidance: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let stage2_grads = [&grads.o2_s, &grads.o2_b];
    for branch in Branch::BOTH {
        let k = branch.index();
        let Some(cache) = fwd.stage2[k].as_ref() else { continue };
        let Some(dl) = dlogits_exact(stage2_grads[k], &cache.logits) else { continue };
        let need_g = !fwd.opts.grad_stop && fwd.predicted_guidance.iter().any(|p| p[k]);
        let g = decoder_backward(params, branch, cache, dl, &mut out.stage2, need_g);
        accumulate(&g, &mut dbottleneck, &mut dskips);
        if let Some(dg) = g.dguidance {
            // G'_S = O_B feeds the skin decoder, so its gradient lands on the body output.
            let target = branch.other().index();
            via_guidance[target] = (0..fwd.n)
                .map(|i| {
                    if fwd.predicted_guidance[i][k] {
                        dg.plane(0, i).iter().map(|&v| f64::from(v)).collect()
                    } else {
                        vec![0.0; dg.plane_len()]
                    }
                })
                .collect();
        }
    }

    let stage1_grads = [&grads.o_s, &grads.o_b];
    for branch in Branch::BOTH {
        let k = branch.index();
        let cache = fwd.stage1[k].as_ref().expect("training forward keeps caches");
        let combined: Vec<Vec<f64>> = match (stage1_grads[k].is_empty(), via_guidance[k].is_empty()) {
            (true, true) => continue,
            (false, true) => stage1_grads[k].clone(),
            (true, false) => via_guidance[k].clone(),
            (false, false) => {
                stage1_grads[k].iter().zip(&via_guidance[k]).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
            }
        };
        let dl = dlogits_exact(&combined, &cache.logits).expect("non-empty");
        let g = decoder_backward(params, branch, cache, dl, &mut out.stage1, false);
        accumulate(&g, &mut dbottleneck, &mut dskips);
    }

    if !opts.encoder_frozen {
        let cache = fwd.encoder_cache.as_ref().expect("training forward keeps caches");
        encoder_backward(params, &params.arch.encoder, cache, dbottleneck, dskips, &mut out.encoder, false);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { input_size: 16, base_channels: 4, ..ModelConfig::default() }
    }

    fn image(seed: u64, size: usize) -> PortraitImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
        PortraitImage::new(size, size, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn config_arithmetic() {
        let desk = ModelConfig::default();
        assert_eq!(desk.bottleneck_dims(), (4, 256));
        assert_eq!(ModelConfig::full_scale().bottleneck_dims(), (32, 1024));
        assert_eq!(ModelConfig::full_scale().guidance_bottleneck_dims(), (32, 512));
        assert!(ModelConfig { input_size: 60, ..desk }.validate().is_err());
        assert!(ModelConfig { base_channels: 3, ..desk }.validate().is_err());
    }

    #[test]
    fn encoder_halves_spatial_size_per_level() {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = image(4, 16);
        let f = encode(&p, &[&img]).unwrap();
        let sizes: Vec<usize> = f.skips.iter().map(|t| t.h).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        assert_eq!((f.bottleneck.h, f.bottleneck.c), (1, 64));
        let g = encode(&p, &[&img]).unwrap();
        assert_eq!(f.bottleneck, g.bottleneck);
    }

    #[test]
    fn zero_image_is_finite() {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = PortraitImage::filled(16, 16, [0.0; 3]);
        let f = encode(&p, &[&img]).unwrap();
        assert!(f.bottleneck.data.iter().all(|v| v.is_finite()));
        let t = forward_two_stage(&p, &img, None, true).unwrap();
        assert!(t.o2_s.unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_size_is_rejected() {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(encode(&p, &[&image(1, 32)]).is_err());
    }

    #[test]
    fn stage2_guidance_defaults_to_cross_outputs() {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let t = forward_two_stage(&p, &image(6, 16), None, true).unwrap();
        let (gs, gb) = t.guidance_stage2.clone().unwrap();
        assert_eq!(gs, t.o_b);
        assert_eq!(gb, t.o_s);
    }

    #[test]
    fn stage2_override_is_consumed() {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let img = image(6, 16);
        let ones = ProbMap::filled(16, 16, 1.0);
        let zeros = ProbMap::filled(16, 16, 0.0);
        let t = forward_two_stage(&p, &img, Some((&ones, &zeros)), true).unwrap();
        let (gs, gb) = t.guidance_stage2.clone().unwrap();
        assert_eq!((gs, gb), (ones.clone(), zeros.clone()));
        let f = encode(&p, &[&img]).unwrap();
        let direct = decode(&p, Branch::Skin, &f, &[&ones], Stage::Two).unwrap();
        assert_eq!(&direct[0], t.o2_s.as_ref().unwrap());
        assert!(t.o2_s.unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = ProbMap::filled(8, 8, 0.0);
        assert!(forward_two_stage(&p, &img, Some((&bad, &bad)), true).is_err());
    }

    #[test]
    fn grad_stop_blocks_guidance_path() {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let imgs = [image(1, 16), image(2, 16)];
        let items: Vec<ForwardItem> = imgs.iter().map(ForwardItem::new).collect();
        let ones = || vec![vec![1.0; 256]; 2];
        for grad_stop in [true, false] {
            let opts = ForwardOptions { mode: Mode::Train, two_stage: true, grad_stop };
            let fwd = forward_batch(&p, &items, opts).unwrap();
            let og = OutputGrads { o2_s: ones(), o2_b: ones(), ..OutputGrads::default() };
            let g = backward(&p, &fwd, &og, BackwardOptions { encoder_frozen: true }).unwrap();
            let nonzero = g.stage1.iter().filter(|v| **v != 0.0).count();
            if grad_stop {
                assert_eq!(nonzero, 0);
            } else {
                assert!(nonzero > 0);
            }
            assert!(g.encoder.iter().all(|v| *v == 0.0));
            assert!(g.stage2.iter().any(|v| *v != 0.0));
        }
    }
}
