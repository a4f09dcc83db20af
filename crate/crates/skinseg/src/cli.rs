//! The `skinseg` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use skinseg_core::baselines::{gmm_baseline, threshold_classify_with, ThresholdConfig, DEFAULT_COMPONENTS};
use skinseg_core::dataset::Sample;
use skinseg_core::metrics::{binarize, compare, evaluate_method, Prediction, DEFAULT_THRESHOLD};
use skinseg_core::network::ModelParams;
use skinseg_core::synth::SceneParams;
use skinseg_core::training::{describe, infer, train, uses_stage2, validate, CheckpointMeta, EpochRecord, Phase, TrainData};
use skinseg_core::{PortraitImage, ProbMap};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, DOCUMENTED_DEFAULTS};
use crate::error::{Error, Result};
use crate::io::{read_image, read_prob, read_text, write_mask, write_prob, write_text};
use crate::manifest::{load_dataset, load_manifest, ManifestEntry};
use crate::report::{curves_csv, grid_csv, grid_table, history_csv, history_jsonl, read_report, write_report};
use crate::synth::{generate_dataset, TRAIN_MANIFEST, VAL_MANIFEST};

/// Set to a non-empty value other than `0` to drop wall-clock fields from run artifacts.
pub const DETERMINISTIC_ENV: &str = "SKINSEG_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| !v.is_empty() && v != "0").unwrap_or(false)
}

#[derive(Debug, Parser)]
#[command(name = "skinseg", version, about = "Dual-task skin and body segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic portrait dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict skin and body maps with a checkpoint.
    Infer(InferArgs),
    /// Run a classical skin detector.
    Baseline(BaselineArgs),
    /// Score a directory of predictions against the validation set.
    Eval(EvalArgs),
    /// Merge evaluation reports into a comparison grid.
    Compare(CompareArgs),
    /// Print the default run configuration with every key documented.
    Defaults,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training samples.
    #[arg(long, default_value_t = 400)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub skin_label_fraction: f64,
    /// Number of dual-labeled validation samples.
    #[arg(long, default_value_t = 64)]
    pub val_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n_figures: Option<usize>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
    #[arg(long)]
    pub tint_strength: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory holding train.txt (and optionally val.txt).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub stage1_only: bool,
    #[arg(long)]
    pub no_mutual_guidance: bool,
    #[arg(long)]
    pub no_crf: bool,
    #[arg(long)]
    pub no_wce: bool,
    #[arg(long)]
    pub no_gradient_stop: bool,
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file, or a dataset directory (its validation manifest is used).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest inside a dataset directory.
    #[arg(long, default_value = VAL_MANIFEST)]
    pub manifest: String,
    /// Also write exact probabilities as `.f32` sidecars.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Threshold,
    Gmm,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = VAL_MANIFEST)]
    pub manifest: String,
    /// Mixture components per class.
    #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
    pub components: usize,
    /// Add the hue/saturation clause to the color rules.
    #[arg(long)]
    pub hsv: bool,
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Method name recorded in the report; defaults to the predictions directory name.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value = VAL_MANIFEST)]
    pub manifest: String,
    /// Run configuration supplying the threshold sweep.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Skin,
    Body,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "skin")]
    pub task: Task,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Infer(a) => cmd_infer(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Defaults => {
            print!("{DOCUMENTED_DEFAULTS}");
            Ok(())
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut params = SceneParams { image_size: a.size, seed: a.seed, ..SceneParams::default() };
    if let Some(n) = a.n_figures {
        params.n_figures = n;
    }
    if let Some(r) = a.distractor_rate {
        params.background_distractor_rate = r;
    }
    if let Some(t) = a.tint_strength {
        params.lighting_tint_strength = t;
    }
    let summary = generate_dataset(&a.out, &params, a.count, a.skin_label_fraction, a.val_count)?;
    println!("{summary}");
    Ok(())
}

/// Final metrics of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub variant: String,
    pub val_skin_iou: Option<f64>,
    pub val_body_iou: Option<f64>,
    pub checksum: String,
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let base = match &a.config {
        Some(p) => RunConfig::from_toml(&read_text(p)?, &p.display().to_string())?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&a.overrides)?;
    if a.stage1_only {
        cfg.training.stage1_only = true;
    }
    if a.no_mutual_guidance {
        cfg.training.mutual_guidance = false;
    }
    if a.no_crf {
        cfg.loss.lambda1 = 0.0;
    }
    if a.no_wce {
        cfg.loss.lambda2 = 0.0;
    }
    if a.no_gradient_stop {
        cfg.training.grad_stop = false;
    }
    if a.from_scratch {
        cfg.training.from_scratch = true;
    }
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    cfg.augmentation.crop_size = cfg.model.input_size;
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &Path, name: &str, size: usize) -> Result<Vec<Sample>> {
    let path = data.join(name);
    if !path.exists() {
        return Ok(Vec::new());
    }
    load_dataset(&path, Some(size))
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary> {
    let run_cfg = resolve_train_config(a)?;
    let cfg = run_cfg.train_config();
    let size = run_cfg.model.input_size;
    let train_set = load_dataset(&a.data.join(TRAIN_MANIFEST), Some(size))?;
    let val_set = load_split(&a.data, VAL_MANIFEST, size)?;
    write_text(&a.out.join("config.toml"), &run_cfg.to_toml())?;

    let mut params = ModelParams::init(run_cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let started = Instant::now();
    let quiet = a.quiet;
    let out = a.out.clone();
    let meta_for = |rec: &EpochRecord| CheckpointMeta {
        epoch: rec.epoch,
        phase: rec.phase,
        seed: cfg.seed,
        train: cfg.clone(),
        model: run_cfg.model,
        val_skin_iou: rec.val_skin_iou,
        val_body_iou: rec.val_body_iou,
    };
    let mut hook = |rec: &EpochRecord, p: &ModelParams| -> skinseg_core::Result<()> {
        if !quiet {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "{:?} epoch {:>3}  loss {:.4} (ce {:.4} crf {:.5} wce {:.4})  val skin IoU {}  body IoU {}",
                rec.phase,
                rec.epoch,
                rec.loss_total,
                rec.loss_ce,
                rec.loss_crf,
                rec.loss_wce,
                f(rec.val_skin_iou),
                f(rec.val_body_iou)
            );
        }
        let meta = meta_for(rec);
        let save =
            |name: &str| save_checkpoint(&out.join(name), p, &meta).map_err(|e| skinseg_core::Error::Numerical(format!("checkpoint: {e}")));
        save("last.ckpt")?;
        if rec.phase == Phase::Stage1 && rec.epoch + 1 == cfg.stage1_epochs {
            save("stage1.ckpt")?;
        }
        Ok(())
    };
    let history = train(&mut params, TrainData { train: &train_set, validation: &val_set }, &cfg, &mut hook)?;
    let last = history.epochs.last().expect("at least one epoch");
    save_checkpoint(&a.out.join("final.ckpt"), &params, &meta_for(last))?;
    write_text(&a.out.join("history.jsonl"), &history_jsonl(&history)?)?;
    write_text(&a.out.join("history.csv"), &history_csv(&history))?;

    let summary = TrainSummary {
        variant: describe(&cfg),
        val_skin_iou: last.val_skin_iou,
        val_body_iou: last.val_body_iou,
        checksum: format!("{:016x}", params.checksum()),
    };
    let mut metrics = serde_json::to_value(&summary)?;
    if !deterministic_mode() {
        metrics["elapsed_seconds"] = serde_json::json!(started.elapsed().as_secs_f64());
    }
    write_text(&a.out.join("metrics.json"), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!("final [{}] val skin IoU {}  body IoU {}", summary.variant, f(summary.val_skin_iou), f(summary.val_body_iou));
    Ok(summary)
}

/// Resizes a probability map by nearest neighbor.
fn resize_prob(p: &ProbMap, w: usize, h: usize) -> ProbMap {
    if p.width() == w && p.height() == h {
        p.clone()
    } else {
        p.resize_nearest(w, h)
    }
}

fn write_outputs(out: &Path, id: &str, task: &str, p: &ProbMap, raw: bool) -> Result<()> {
    write_prob(&out.join(format!("{id}_{task}_prob.png")), p, raw)?;
    write_mask(&out.join(format!("{id}_{task}_mask.png")), &binarize(p, DEFAULT_THRESHOLD))
}

fn input_images(input: &Path, manifest: &str) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let entries: Vec<ManifestEntry> = load_manifest(&input.join(manifest))?;
        Ok(entries.into_iter().map(|e| (e.id, e.image)).collect())
    } else if input.is_file() {
        let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        Ok(vec![(id, input.to_path_buf())])
    } else {
        Err(Error::Input(format!("{} does not exist", input.display())))
    }
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(&a.checkpoint)?;
    let size = params.config().input_size;
    let two_stage = uses_stage2(&meta.train);
    let inputs = input_images(&a.input, &a.manifest)?;
    for (id, path) in &inputs {
        let image = read_image(path)?;
        let (w, h) = (image.width(), image.height());
        let resized: PortraitImage = if w == size && h == size { image } else { image.resize_bilinear(size, size) };
        let trace = infer(&params, &[&resized], two_stage)?.remove(0);
        write_outputs(&a.out, id, "skin", &resize_prob(trace.skin(), w, h), a.raw)?;
        write_outputs(&a.out, id, "body", &resize_prob(trace.body(), w, h), a.raw)?;
    }
    println!("wrote predictions for {} image(s) to {}", inputs.len(), a.out.display());
    Ok(())
}

pub fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let inputs = input_images(&a.data, &a.manifest)?;
    let rules = ThresholdConfig { hsv_clause: a.hsv };
    let mut fallbacks = 0;
    for (id, path) in &inputs {
        let image = read_image(path)?;
        let rule_mask = threshold_classify_with(&image, &rules);
        let prob = match a.method {
            BaselineMethod::Threshold => rule_mask.to_prob(),
            BaselineMethod::Gmm => match gmm_baseline(&image, a.components) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("{id}: {e}; falling back to the color-rule mask");
                    fallbacks += 1;
                    rule_mask.to_prob()
                }
            },
        };
        write_outputs(&a.out, id, "skin", &prob, a.raw)?;
    }
    println!("wrote {} skin map(s) to {} ({fallbacks} fallback(s))", inputs.len(), a.out.display());
    Ok(())
}

fn read_optional_prob(path: PathBuf) -> Result<Option<ProbMap>> {
    if path.exists() || crate::io::sidecar_path(&path).exists() {
        read_prob(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let thresholds = match &a.config {
        Some(p) => RunConfig::from_toml(&read_text(p)?, &p.display().to_string())?.evaluation.thresholds,
        None => RunConfig::default().evaluation.thresholds,
    };
    let manifest = a.data.join(&a.manifest);
    let samples = load_dataset(&manifest, None)?;
    let mut predictions = Vec::with_capacity(samples.len());
    for s in &samples {
        predictions.push(Prediction {
            id: s.id.clone(),
            skin: read_optional_prob(a.predictions.join(format!("{}_skin_prob.png", s.id)))?,
            body: read_optional_prob(a.predictions.join(format!("{}_body_prob.png", s.id)))?,
        });
    }
    let method = a
        .method
        .clone()
        .unwrap_or_else(|| a.predictions.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "method".into()));
    let report = evaluate_method(&method, &manifest.display().to_string(), &predictions, &samples, &thresholds)?;
    write_report(&a.out.join("report.json"), &report)?;
    for (task, r) in [("skin", &report.skin), ("body", &report.body)] {
        if let Some(r) = r {
            write_text(&a.out.join(format!("curves_{task}.csv")), &curves_csv(&r.curve))?;
            println!(
                "{method} {task}: IoU {:.4}  precision {:.4}  recall {:.4}  ({} samples)",
                r.mean_iou,
                r.mean_precision,
                r.mean_recall,
                r.records.len()
            );
        }
    }
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let reports = a.reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let rows = compare(&reports, a.task == Task::Skin)?;
    write_text(&a.out.join("grid.csv"), &grid_csv(&rows))?;
    print!("{}", grid_table(&rows));
    Ok(())
}

/// Validation metrics of a checkpoint on a dataset directory, as recorded during training.
pub fn checkpoint_validation(checkpoint: &Path, data: &Path) -> Result<(Option<f64>, Option<f64>, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let val = load_split(data, VAL_MANIFEST, params.config().input_size)?;
    let phase_two = meta.phase == Phase::Finetune && meta.train.mutual_guidance;
    let score = validate(&params, &val, phase_two)?;
    Ok((score.skin_iou, score.body_iou, meta))
}
