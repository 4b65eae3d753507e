//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::labels::{LabelDomain, Layer, Rgb};
use crate::synthetic::SceneRecipe;
use crate::training::{Mode, TrainingParams};

/// Fractions of scenes used for potential training, θ tuning and testing.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.5, 0.083, 0.417];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Relative paths are resolved against the config file's directory.
    pub root: PathBuf,
    pub fractions: [f64; 3],
    /// Use the split stored in the dataset manifest when there is one.
    pub manifest_split: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("data"),
            fractions: DEFAULT_FRACTIONS,
            manifest_split: true,
        }
    }
}

/// Class lists and colors; must agree with the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub base: Vec<String>,
    pub occlusion: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_palette: Option<Vec<[u8; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion_palette: Option<Vec<[u8; 3]>>,
}

impl DomainConfig {
    pub fn domain(&self) -> Result<LabelDomain> {
        let mut d = LabelDomain::new(self.base.clone(), self.occlusion.clone())?;
        if let Some(p) = &self.base_palette {
            d = d.with_palette(Layer::Base, p.iter().copied().map(Rgb).collect())?;
        }
        if let Some(p) = &self.occlusion_palette {
            d = d.with_palette(Layer::Occlusion, p.iter().copied().map(Rgb).collect())?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes: usize,
    pub recipe: SceneRecipe,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 48,
            recipe: SceneRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Pixels per node side.
    pub site_size: usize,
    pub dataset: DatasetConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
    pub features: FeatureSpec,
    pub training: TrainingParams,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::Tcrf,
            site_size: 1,
            dataset: DatasetConfig::default(),
            domain: None,
            features: FeatureSpec::aerial(),
            training: TrainingParams::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; a relative dataset root becomes relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if config.dataset.root.is_relative() {
            let dir = path.parent().unwrap_or(Path::new("."));
            config.dataset.root = dir.join(&config.dataset.root);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.dataset.fractions;
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-2 {
            return Err(Error::config(format!("dataset.fractions {f:?} must lie in [0, 1] and sum to 1")));
        }
        if self.site_size == 0 {
            return Err(Error::config("site_size must be at least 1"));
        }
        if self.features.entries.is_empty() {
            return Err(Error::config("the feature spec is empty"));
        }
        if let Some(d) = &self.domain {
            d.domain()?;
        }
        self.training_params().validate()?;
        self.synth.recipe.validate()
    }

    /// Training parameters with the experiment's mode applied.
    pub fn training_params(&self) -> TrainingParams {
        TrainingParams {
            mode: self.mode,
            ..self.training.clone()
        }
    }

    /// The configured domain, checked against the one a dataset declares.
    /// Palettes from the config win.
    pub fn resolve_domain(&self, dataset_domain: &LabelDomain) -> Result<LabelDomain> {
        let Some(d) = &self.domain else {
            return Ok(dataset_domain.clone());
        };
        let domain = d.domain()?;
        for layer in [Layer::Base, Layer::Occlusion] {
            if domain.classes(layer) != dataset_domain.classes(layer) {
                return Err(Error::config(format!(
                    "{layer} classes {:?} differ from the dataset's {:?}",
                    domain.classes(layer),
                    dataset_domain.classes(layer)
                )));
            }
        }
        let mut out = dataset_domain.clone();
        if d.base_palette.is_some() {
            out = out.with_palette(Layer::Base, domain.palette(Layer::Base).to_vec())?;
        }
        if d.occlusion_palette.is_some() {
            out = out.with_palette(Layer::Occlusion, domain.palette(Layer::Occlusion).to_vec())?;
        }
        Ok(out)
    }
}
