//! Pipeline configuration: model, training, data, and augmentation settings,
//! with `desk` and `paper` profiles, TOML files, and `key=value` overrides.
//!
//! Unknown keys are rejected everywhere so experiment configs cannot
//! silently drift.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModuleToggles {
    pub dr: bool,
    pub msi: bool,
    pub fe: bool,
}

impl ModuleToggles {
    pub fn all_on() -> Self {
        ModuleToggles {
            dr: true,
            msi: true,
            fe: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the five encoder levels.
    pub backbone_channels: [usize; 5],
    /// Shared channel width of every fusion-stage feature.
    pub working_width: usize,
    /// Max-pool kernel sizes of the multi-kernel reception stage.
    pub dr_kernels: Vec<usize>,
    pub toggles: ModuleToggles,
    /// Share one parameter set across all feature-enhancement sites instead
    /// of instantiating each independently.
    pub fe_share_params: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Skip batch norm entirely (algebraic test hook).
    #[serde(default)]
    pub bypass_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: [32, 64, 128, 256, 256],
            working_width: 64,
            dr_kernels: vec![3, 7, 11],
            toggles: ModuleToggles::all_on(),
            fe_share_params: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            bypass_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.working_width == 0 {
            return Err(config_err("working_width must be positive"));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(config_err("backbone channel widths must be positive"));
        }
        if self.dr_kernels.is_empty() {
            return Err(config_err("dr_kernels must not be empty"));
        }
        for &k in &self.dr_kernels {
            if k < 3 || k % 2 == 0 {
                return Err(config_err(format!(
                    "dr kernel sizes must be odd and >= 3, got {k}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(config_err("bn_momentum must be in [0,1)"));
        }
        if self.bn_eps <= 0.0 {
            return Err(config_err("bn_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Bce,
    Iou,
    Bd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_fraction: f64,
    /// Square side the network trains and predicts at; divisible by 32.
    pub input_size: usize,
    pub seed: u64,
    pub loss_terms: Vec<LossTerm>,
    /// Boundary-extraction max-pool kernel for the boundary loss.
    pub boundary_kernel: usize,
    /// Apply weight decay to norm affine parameters and biases as well.
    #[serde(default)]
    pub decay_norm_and_bias: bool,
    /// Evaluate (and consider checkpointing "best") every this many epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_min: 1.6e-4,
            lr_max: 5e-3,
            warmup_fraction: 0.1,
            input_size: 384,
            seed: 17,
            loss_terms: vec![LossTerm::Bce, LossTerm::Iou, LossTerm::Bd],
            boundary_kernel: 3,
            decay_norm_and_bias: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if self.lr_min >= self.lr_max {
            return Err(config_err("lr_min must be below lr_max"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(config_err("warmup_fraction must be in (0,1)"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(config_err(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if !self.loss_terms.contains(&LossTerm::Bce) {
            return Err(config_err("loss_terms must include bce"));
        }
        if self.boundary_kernel % 2 == 0 || self.boundary_kernel < 3 {
            return Err(config_err("boundary_kernel must be odd and >= 3"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: Option<PathBuf>,
    pub train_masks: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_masks: Option<PathBuf>,
}

impl DataConfig {
    /// Point both train dirs at `<root>/images` and `<root>/masks`.
    pub fn with_train_root(mut self, root: &Path) -> Self {
        self.train_images = Some(root.join("images"));
        self.train_masks = Some(root.join("masks"));
        self
    }

    pub fn with_val_root(mut self, root: &Path) -> Self {
        self.val_images = Some(root.join("images"));
        self.val_masks = Some(root.join("masks"));
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub crop_ratio_range: [f64; 2],
    /// Per-batch size multipliers; resulting sizes snap to multiples of 32.
    pub scales: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            hflip_prob: 0.5,
            crop_ratio_range: [0.9, 1.0],
            scales: vec![0.75, 1.0, 1.25],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            hflip_prob: 0.0,
            crop_ratio_range: [1.0, 1.0],
            scales: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(config_err("hflip_prob must be in [0,1]"));
        }
        let [lo, hi] = self.crop_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(config_err("crop_ratio_range must satisfy 0 < lo <= hi <= 1"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(config_err("scales must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Everything one experiment needs, snapshot-able as TOML.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }

    /// Small widths, 64x64 inputs, short schedules: everything a laptop CPU
    /// can iterate on in minutes.
    pub fn desk() -> Self {
        PipelineConfig {
            model: ModelConfig {
                backbone_channels: [8, 16, 32, 32, 32],
                working_width: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 100,
                batch_size: 4,
                input_size: 64,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            augment: AugmentConfig::disabled(),
        }
    }

    /// The published training recipe: 384x384 inputs, 60 epochs, batch 64,
    /// momentum SGD with warm-up from 1.6e-4 to 5e-3 and back.
    pub fn paper() -> Self {
        PipelineConfig::default()
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(config_err(format!(
                "unknown profile '{other}' (expected 'desk' or 'paper')"
            ))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Apply `key=value` overrides with dotted paths, e.g.
    /// `train.lr_max=0.01` or `model.toggles.fe=false`. Values are parsed as
    /// TOML literals, so arrays and strings work too. Unknown keys are
    /// rejected when the merged document is re-deserialized.
    pub fn apply_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml_string()?)
            .map_err(|e| Error::Config(format!("config snapshot parse: {e}")))?;
        for kv in sets {
            let (path, raw) = kv
                .split_once('=')
                .ok_or_else(|| config_err(format!("override '{kv}' is not key=value")))?;
            let value: toml::Value = toml::from_str(&format!("v = {raw}"))
                .map(|mut t: toml::Table| t.remove("v").expect("parsed override value"))
                .or_else(|_| {
                    // bare strings without quotes, e.g. profile names
                    toml::from_str::<toml::Table>(&format!("v = \"{raw}\""))
                        .map(|mut t| t.remove("v").expect("parsed override value"))
                })
                .map_err(|e| config_err(format!("override value '{raw}': {e}")))?;
            set_path(&mut doc, path.trim(), value)?;
        }
        let merged = toml::to_string(&doc).map_err(|e| Error::Serde(e.to_string()))?;
        Self::from_toml_str(&merged)
    }
}

fn set_path(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override path '{path}'")));
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("'{part}' in '{path}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
