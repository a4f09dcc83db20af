//! Writes a generated dataset to disk: images, masks and the `train.txt` /
//! `val.txt` manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skinseg_core::synth::{plan_dataset, render_planned, SceneParams, SplitRole};

use crate::error::Result;
use crate::io::{write_image, write_mask, write_text};
use crate::manifest::{write_manifest, ManifestEntry};

pub const TRAIN_MANIFEST: &str = "train.txt";
pub const VAL_MANIFEST: &str = "val.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub skin_labeled: usize,
    pub body_labeled: usize,
    pub validation: usize,
}

impl std::fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} skin / {} body / {} validation", self.skin_labeled, self.body_labeled, self.validation)
    }
}

/// Renders `count` training scenes (split by `skin_label_fraction`) plus `val_count`
/// dual-labeled validation scenes under `out`.
pub fn generate_dataset(
    out: &Path,
    params: &SceneParams,
    count: usize,
    skin_label_fraction: f64,
    val_count: usize,
) -> Result<SynthSummary> {
    params.validate()?;
    let plan = plan_dataset(count, skin_label_fraction, val_count, params.seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut summary = SynthSummary { skin_labeled: 0, body_labeled: 0, validation: 0 };
    for p in &plan {
        let scene = render_planned(params, p)?;
        debug_assert_eq!(scene.skin.containment_violations(&scene.body), 0);
        let image = out.join("images").join(format!("{}.png", p.id));
        write_image(&image, &scene.image)?;
        let mask = |kind: &str, keep: bool, m: &skinseg_core::MaskMap| -> Result<Option<PathBuf>> {
            if !keep {
                return Ok(None);
            }
            let path = out.join("masks").join(format!("{}_{kind}.png", p.id));
            write_mask(&path, m)?;
            Ok(Some(path))
        };
        let (keep_skin, keep_body) = match p.role {
            SplitRole::TrainSkin => (true, false),
            SplitRole::TrainBody => (false, true),
            SplitRole::Validation => (true, true),
        };
        let entry = ManifestEntry {
            id: p.id.clone(),
            image,
            skin_mask: mask("skin", keep_skin, &scene.skin)?,
            body_mask: mask("body", keep_body, &scene.body)?,
        };
        match p.role {
            SplitRole::TrainSkin => summary.skin_labeled += 1,
            SplitRole::TrainBody => summary.body_labeled += 1,
            SplitRole::Validation => summary.validation += 1,
        }
        if p.role == SplitRole::Validation {
            val.push(entry);
        } else {
            train.push(entry);
        }
    }
    write_manifest(&out.join(TRAIN_MANIFEST), &train)?;
    write_manifest(&out.join(VAL_MANIFEST), &val)?;
    let params_toml = toml::to_string(params).map_err(|e| skinseg_core::Error::Config(e.to_string()))?;
    write_text(&out.join("synth.toml"), &params_toml)?;
    Ok(summary)
}
