//! Declarative run configuration (TOML) with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compare::CalibrationSettings;
use crate::data::{load_mnist, synthetic_gaussian_task, Dataset};
use crate::distributed::{LrScaling, SSchedule};
use crate::error::{config_err, Result};
use crate::model::{BackpropMode, InputShape, LayerSpec, ModelSpec, TopK};
use crate::train::{LrDecay, TrainConfig};

pub const DEFAULT_SCALE: f64 = 3.0;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub compare: CompareSection,
    pub distributed: DistributedSection,
    pub analyze: AnalyzeSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            dir: None,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 512,
            test: 256,
            features: 16,
            classes: 4,
            separation: 4.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    MnistMlp,
    Lenet5,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Option<Preset>,
    pub input: Option<InputShape>,
    pub layers: Option<Vec<LayerSpec>>,
}

impl ModelConfig {
    /// Explicit layers win over the preset; a synthetic task without layers
    /// gets a small two-hidden-layer MLP.
    pub fn resolve(&self, source: DataSource, synthetic: &SyntheticConfig) -> Result<ModelSpec> {
        match (&self.layers, &self.input) {
            (Some(layers), Some(input)) => {
                if self.preset.is_some() {
                    return Err(config_err("model: give either a preset or input + layers, not both"));
                }
                Ok(ModelSpec {
                    input: *input,
                    layers: layers.clone(),
                })
            }
            (Some(_), None) | (None, Some(_)) => Err(config_err("model: input and layers must be given together")),
            (None, None) => match (self.preset, source) {
                (Some(Preset::Lenet5), _) => Ok(ModelSpec::lenet5()),
                (Some(Preset::MnistMlp), _) | (None, DataSource::Mnist) => Ok(ModelSpec::mnist_mlp()),
                (None, DataSource::Synthetic) => {
                    Ok(ModelSpec::mlp(&[synthetic.features, 64, 64, synthetic.classes]))
                }
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Exact,
    Dithered,
    Meprop,
    #[value(alias = "dithered-8bit")]
    Dithered8bit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_decay: Option<LrDecay>,
    pub mode: ModeName,
    /// Scale factor `s` of the dithered modes.
    pub scale: Option<f64>,
    /// Top-k: a count (`>= 1`) or a keep fraction (`< 1`).
    pub k: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            epochs: d.epochs,
            seed: d.seed,
            lr_decay: d.lr_decay,
            mode: ModeName::Exact,
            scale: None,
            k: None,
        }
    }
}

/// Reads a top-k setting: whole numbers `>= 1` are counts, values in
/// `(0, 1)` are keep fractions.
pub fn parse_topk(k: f64) -> Result<TopK> {
    if k >= 1.0 && k.fract() == 0.0 && k <= usize::MAX as f64 {
        Ok(TopK::Count(k as usize))
    } else if k > 0.0 && k < 1.0 {
        Ok(TopK::Fraction(k))
    } else {
        Err(config_err(format!("k must be a whole count >= 1 or a fraction in (0, 1), got {k}")))
    }
}

impl TrainSection {
    pub fn backprop_mode(&self) -> Result<BackpropMode> {
        let scale = self.scale.unwrap_or(DEFAULT_SCALE);
        let mode = match self.mode {
            ModeName::Exact => BackpropMode::Exact,
            ModeName::Dithered => BackpropMode::Dithered { scale },
            ModeName::Dithered8bit => BackpropMode::Dithered8Bit { scale },
            ModeName::Meprop => BackpropMode::Meprop {
                k: parse_topk(self.k.unwrap_or(DEFAULT_KEEP_FRACTION))?,
            },
        };
        if self.scale.is_some() && mode.nsd().is_none() {
            return Err(config_err(format!("scale given but mode {} does not use it", mode.name())));
        }
        if self.k.is_some() && !matches!(mode, BackpropMode::Meprop { .. }) {
            return Err(config_err(format!("k given but mode {} does not use it", mode.name())));
        }
        mode.validate()?;
        Ok(mode)
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            mode: self.backprop_mode()?,
            seed: self.seed,
            lr_decay: self.lr_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub calibration: CalibrationSettings,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            grid: vec![0.95, 0.99],
            seeds: vec![0, 1, 2],
            calibration: CalibrationSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistributedSection {
    pub nodes: Vec<usize>,
    pub s_schedule: SSchedule,
    pub lr_scaling: LrScaling,
    /// Repetitions of the averaged-gradient noise measurement (0 = skip).
    pub variance_reps: usize,
    pub variance_samples: usize,
}

impl Default for DistributedSection {
    fn default() -> Self {
        Self {
            nodes: vec![1, 2, 4, 8, 16],
            s_schedule: SSchedule::Sqrt,
            lr_scaling: LrScaling::Linear,
            variance_reps: 500,
            variance_samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Training iterations after which preactivation gradients are captured.
    pub capture_every: u64,
    /// Scale factors of the Gaussian prediction table.
    pub scales: Vec<f64>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            capture_every: 50,
            scales: vec![0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.model.resolve(self.data.source, &self.data.synthetic)
    }

    /// Training and test sets as configured.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.data.source {
            DataSource::Mnist => {
                let dir = self.data.dir.clone().unwrap_or_else(default_data_dir);
                load_mnist(&dir).map_err(|e| config_err(format!("loading MNIST from {}: {e}", dir.display())))?
            }
            DataSource::Synthetic => {
                let s = &self.data.synthetic;
                let all = synthetic_gaussian_task(s.train + s.test, s.features, s.classes, s.separation, s.seed)?;
                let idx_train: Vec<usize> = (0..s.train).collect();
                let idx_test: Vec<usize> = (s.train..s.train + s.test).collect();
                let split = |idx: &[usize]| -> Result<Dataset> {
                    let (x, l) = all.gather(idx);
                    Dataset::new(x.transpose(), l, s.classes, all.split)
                };
                (split(&idx_train)?, split(&idx_test)?)
            }
        };
        let train = match self.data.train_limit {
            Some(n) => train.head(n),
            None => train,
        };
        let test = match self.data.test_limit {
            Some(n) => test.head(n),
            None => test,
        };
        Ok((train, test))
    }
}

/// `$DATA_DIR`, else `data/mnist` under the workspace root.
pub fn default_data_dir() -> PathBuf {
    if let Some(d) = std::env::var_os("DATA_DIR") {
        return PathBuf::from(d);
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        let t = c.train.to_train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.model_spec().unwrap(), ModelSpec::mnist_mlp());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[model]\nlayers = [{ type = \"dense\", unit = 3 }]").is_err());
    }

    #[test]
    fn explicit_layers_parse() {
        let c = RunConfig::from_toml(
            r#"
            [model]
            input = { channels = 1, height = 28, width = 28 }
            layers = [
              { type = "conv", out_channels = 4, kernel = 5, padding = 2 },
              { type = "max_pool" },
              { type = "dense", units = 10 },
            ]
            [train]
            mode = "dithered"
            scale = 2.5
            "#,
        )
        .unwrap();
        let spec = c.model_spec().unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(
            spec.layers[0],
            LayerSpec::Conv {
                out_channels: 4,
                kernel: 5,
                stride: 1,
                padding: 2
            }
        );
        assert_eq!(c.train.backprop_mode().unwrap(), BackpropMode::Dithered { scale: 2.5 });
    }

    #[test]
    fn mode_knobs_are_checked() {
        let mut t = TrainSection {
            mode: ModeName::Exact,
            scale: Some(2.0),
            ..Default::default()
        };
        assert!(t.backprop_mode().is_err());
        t.mode = ModeName::Meprop;
        t.scale = None;
        t.k = Some(30.0);
        assert_eq!(t.backprop_mode().unwrap(), BackpropMode::Meprop { k: TopK::Count(30) });
        t.k = Some(0.1);
        assert_eq!(t.backprop_mode().unwrap(), BackpropMode::Meprop { k: TopK::Fraction(0.1) });
        t.k = Some(2.5);
        assert!(t.backprop_mode().is_err());
        t.k = Some(0.0);
        assert!(t.backprop_mode().is_err());
        let d8 = TrainSection {
            mode: ModeName::Dithered8bit,
            ..Default::default()
        };
        assert_eq!(d8.backprop_mode().unwrap(), BackpropMode::Dithered8Bit { scale: DEFAULT_SCALE });
    }

    #[test]
    fn synthetic_source_splits_data() {
        let c = RunConfig::from_toml("[data]\nsource = \"synthetic\"\n[data.synthetic]\ntrain = 40\ntest = 10").unwrap();
        let (tr, te) = c.load_data().unwrap();
        assert_eq!((tr.len(), te.len()), (40, 10));
        assert_eq!(tr.features(), 16);
        assert_eq!(c.model_spec().unwrap(), ModelSpec::mlp(&[16, 64, 64, 4]));
    }

    #[test]
    fn preset_and_layers_conflict() {
        let c = RunConfig::from_toml(
            "[model]\npreset = \"lenet5\"\ninput = { channels = 1, height = 1, width = 1 }\nlayers = [{ type = \"dense\", units = 2 }]",
        )
        .unwrap();
        assert!(c.model_spec().is_err());
    }
}
