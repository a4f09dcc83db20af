//! Run configuration: a TOML file with `model`, `loss`, `training`,
//! `augmentation` and `evaluation` sections, plus `section.key=value` overrides.

use serde::{Deserialize, Serialize};
use skinseg_core::dataset::AugmentConfig;
use skinseg_core::losses::LossConfig;
use skinseg_core::metrics::default_thresholds;
use skinseg_core::network::ModelConfig;
use skinseg_core::training::{AdamConfig, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub finetune_epochs: usize,
    pub grad_stop: bool,
    pub mutual_guidance: bool,
    pub from_scratch: bool,
    pub stage1_only: bool,
    pub freeze_encoder_in_finetune: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            batch_size: t.batch_size,
            stage1_epochs: t.stage1_epochs,
            finetune_epochs: t.finetune_epochs,
            grad_stop: t.grad_stop,
            mutual_guidance: t.mutual_guidance,
            from_scratch: t.from_scratch,
            stage1_only: t.stage1_only,
            freeze_encoder_in_finetune: t.freeze_encoder_in_finetune,
            augment: t.augment,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub thresholds: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { thresholds: default_thresholds() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainingSection,
    pub augmentation: AugmentConfig,
    pub evaluation: EvaluationSection,
}

/// Every key with its default value and meaning.
pub const DOCUMENTED_DEFAULTS: &str = r#"[model]
input_size = 64               # working resolution; images are resized to input_size x input_size
base_channels = 16            # channels of the first encoder level; doubles per level
depth = 4                     # down/up-sampling blocks
initial_guidance_skin = 0.0   # constant Stage-1 guidance e_S (fed to the body decoder)
initial_guidance_body = 0.0   # constant Stage-1 guidance e_B (fed to the skin decoder)

[loss]
lambda1 = 0.0001              # weight of the pairwise CRF term (0 disables it)
lambda2 = 0.001               # weight of the skin-weighted cross-entropy (0 disables it)
crf_sigma_color = 0.1         # color bandwidth, [0,1] units
crf_sigma_pos = 3.0           # spatial bandwidth, pixels
crf_radius = 2                # Chebyshev neighborhood radius
wce_pairing = "matched_stage" # or "all_pairs"
epsilon = 1e-6                # probability clamp before logarithms

[training]
lr = 0.001                    # Adam step size
beta1 = 0.9
beta2 = 0.999
adam_eps = 1e-8
batch_size = 8
stage1_epochs = 15
finetune_epochs = 10
grad_stop = true              # block gradients through Stage-2 guidance
mutual_guidance = true        # false: never run Stage 2
from_scratch = false          # skip Stage-1 pretraining
stage1_only = false           # skip finetuning
freeze_encoder_in_finetune = false
augment = true
seed = 0

[augmentation]
flip_probability = 0.5
scale_min = 1.0
scale_max = 1.25
crop_size = 64                # replaced by model.input_size during training
seed = 0

[evaluation]
thresholds = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0]
"#;

fn config_error(path: &str, message: impl std::fmt::Display) -> Error {
    Error::Config { path: path.to_string(), message: message.to_string() }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_error(origin, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `section.key=value` overrides; values use TOML syntax, bare words are strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Table = toml::from_str(&self.to_toml()).expect("round-trips");
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| config_error("--set", format!("'{o}' is not key=value")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts.pop().expect("split yields one part");
            let mut table = &mut root;
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| config_error("--set", format!("'{p}' is not a section")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        let text = toml::to_string(&root).expect("table serializes");
        Self::from_toml(&text, "--set")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            adam: AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps },
            batch_size: t.batch_size,
            stage1_epochs: t.stage1_epochs,
            finetune_epochs: t.finetune_epochs,
            grad_stop: t.grad_stop,
            mutual_guidance: t.mutual_guidance,
            from_scratch: t.from_scratch,
            stage1_only: t.stage1_only,
            freeze_encoder_in_finetune: t.freeze_encoder_in_finetune,
            augment: t.augment,
            augment_cfg: AugmentConfig { crop_size: self.model.input_size, ..self.augmentation },
            loss: self.loss,
            seed: t.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        let th = &self.evaluation.thresholds;
        if th.is_empty() || th.windows(2).any(|w| w[0] > w[1]) || th.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(config_error("evaluation.thresholds", "must be non-empty, sorted, within [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match() {
        let parsed = RunConfig::from_toml(DOCUMENTED_DEFAULTS, "defaults").unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(&["training.seed=7".into(), "loss.lambda1=0".into(), "loss.wce_pairing=all_pairs".into()])
            .unwrap();
        assert_eq!(c.training.seed, 7);
        assert_eq!(c.loss.lambda1, 0.0);
        assert!(RunConfig::default().with_overrides(&["training.nope=1".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), "x").unwrap(), c);
    }
}
