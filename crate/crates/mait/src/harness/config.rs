//! TOML run configuration mirroring the model and search structs.

use crate::error::{Error, Result};
use crate::maskgen::{MaskScheme, PatchGrid, SchemePreset};
use crate::model::ModelConfig;
use crate::search::SearchConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_ffn_ratio() -> usize {
    4
}

fn default_classes() -> usize {
    2
}

fn default_channels() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub grid: PatchGrid,
    pub patch_px: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default)]
    pub layerscale_eps: Option<f64>,
    #[serde(default)]
    pub drop_path_rate: f64,
    #[serde(default)]
    pub mask_seed: u64,
}

fn default_preset() -> String {
    "none".into()
}

fn default_r() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeSection {
    /// One of none|sch1|sch2|sch3|file.
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_r")]
    pub r: usize,
    /// Scheme JSON path, used when preset = "file".
    #[serde(default)]
    pub file: Option<String>,
}

impl Default for SchemeSection {
    fn default() -> Self {
        SchemeSection {
            preset: default_preset(),
            r: default_r(),
            file: None,
        }
    }
}

fn default_epochs() -> usize {
    20
}

fn default_batch() -> usize {
    32
}

fn default_val_frac() -> f64 {
    0.2
}

fn default_probe_samples() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Learning rate; defaults to 0.0005 * batch / 512.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default = "default_r")]
    pub als_r: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchConfig,
}

impl FileConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn scheme(&self) -> Result<MaskScheme> {
        let l = self.model.layers;
        let h = self.model.heads;
        let r = self.scheme.r;
        match self.scheme.preset.as_str() {
            "none" => Ok(MaskScheme::all_none(l, h)),
            "sch1" => crate::maskgen::make_scheme(SchemePreset::Sch1, l, h, r),
            "sch2" => crate::maskgen::make_scheme(SchemePreset::Sch2, l, h, r),
            "sch3" => crate::maskgen::make_scheme(SchemePreset::Sch3, l, h, r),
            "file" => {
                let path = self.scheme.file.as_ref().ok_or_else(|| {
                    Error::Config("scheme.preset = \"file\" requires scheme.file".into())
                })?;
                let scheme = MaskScheme::from_json(&std::fs::read_to_string(path)?)?;
                if scheme.layers.len() != l || scheme.layers.iter().any(|row| row.len() != h) {
                    return Err(Error::Config(format!(
                        "scheme file shape does not match {l} layers x {h} heads"
                    )));
                }
                Ok(scheme)
            }
            other => Err(Error::Config(format!(
                "unknown scheme preset '{other}' (expected none|sch1|sch2|sch3|file)"
            ))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let config = ModelConfig {
            layers: m.layers,
            heads: m.heads,
            hidden: m.hidden,
            grid: m.grid,
            patch_px: m.patch_px,
            channels: m.channels,
            classes: m.classes,
            ffn_ratio: m.ffn_ratio,
            layerscale_eps: m.layerscale_eps,
            drop_path_rate: m.drop_path_rate,
            scheme: self.scheme()?,
            mask_seed: m.mask_seed,
        };
        config.validate()?;
        Ok(config)
    }
}
