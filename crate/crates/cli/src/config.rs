//! Run configuration: a TOML file whose sections mirror the library's
//! knobs. Every key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trd_core::datasets::{PairedLayout, ThreeDSource, ToyConfig};
use trd_core::model::{AmplifierConfig, FilterConfig};
use trd_core::{BackboneProfile, FusionStrategy, ModelConfig, ScoreConfig, TrainConfig};

pub const DATA_ROOT_ENV: &str = "TRD_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub cf: CfSection,
    pub ca: CaSection,
    pub model: ModelSection,
    pub score: ScoreSection,
    pub metrics: MetricsSection,
    pub trainer: TrainConfig,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// `toy` or `full`.
    pub profile: String,
    pub seed: u64,
    pub weights_path: Option<PathBuf>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            profile: "toy".into(),
            seed: 0,
            weights_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfSection {
    pub enabled: bool,
    /// Spatial side of the projection bottleneck; defaults per profile.
    pub bottleneck_size: Option<usize>,
}

impl Default for CfSection {
    fn default() -> Self {
        CfSection {
            enabled: true,
            bottleneck_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaSection {
    pub enabled: bool,
    pub expansion: usize,
}

impl Default for CaSection {
    fn default() -> Self {
        CaSection {
            enabled: true,
            expansion: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Seed for student-side parameter initialisation.
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    /// Gaussian sigma in pixels at 256 px input; scaled with the input size.
    pub sigma: f64,
    pub fusion: FusionStrategy,
}

impl Default for ScoreSection {
    fn default() -> Self {
        let d = ScoreConfig::default();
        ScoreSection {
            sigma: d.sigma,
            fusion: d.fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub pro_fpr_limit: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { pro_fpr_limit: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated in memory from `data.toy`.
    #[default]
    Toy,
    /// `root/category/split/defect/{rgb,xyz|depth,gt}`.
    Mvtec3d,
    /// Same tree with caller-named folders (RGB + normal-map style sets).
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset root; falls back to `$TRD_DATA_ROOT`.
    pub root: Option<PathBuf>,
    pub category: String,
    pub rgb_dir: String,
    /// Folder of the second modality. A depth TIFF folder unless
    /// `three_d_is_image` is set.
    pub three_d_dir: String,
    pub three_d_is_image: bool,
    pub gt_dir: String,
    pub toy: ToyConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Toy,
            root: None,
            category: "toy".into(),
            rgb_dir: "rgb".into(),
            three_d_dir: "depth".into(),
            three_d_is_image: false,
            gt_dir: "gt".into(),
            toy: ToyConfig::default(),
        }
    }
}

impl DataSection {
    pub fn layout(&self) -> PairedLayout {
        match self.source {
            DataSource::Paired => PairedLayout {
                rgb_dir: self.rgb_dir.clone(),
                three_d: if self.three_d_is_image {
                    ThreeDSource::Image {
                        dir: self.three_d_dir.clone(),
                    }
                } else {
                    ThreeDSource::Depth {
                        dirs: vec![self.three_d_dir.clone()],
                    }
                },
                mask_dir: self.gt_dir.clone(),
            },
            _ => PairedLayout::mvtec3d(),
        }
    }

    /// Configured root, else the environment default.
    pub fn resolved_root(&self) -> Option<PathBuf> {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }
}

/// Flag overrides; flags win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<String>,
    pub fusion: Option<FusionStrategy>,
    pub data_root: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.trainer.seed = s;
            self.model.init_seed = s;
            self.data.toy.seed = s;
        }
        if let Some(p) = &o.profile {
            self.backbone.profile = p.clone();
        }
        if let Some(f) = o.fusion {
            self.score.fusion = f;
        }
        if let Some(r) = &o.data_root {
            self.data.root = Some(r.clone());
        }
        if let Some(e) = o.epochs {
            self.trainer.epochs = e;
        }
    }

    /// Fill derived defaults and check ranges.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        let profile = self.profile()?;
        if self.cf.bottleneck_size.is_none() {
            self.cf.bottleneck_size = Some(profile.default_filter_bottleneck());
        }
        if self.data.root.is_none() {
            self.data.root = self.data.resolved_root();
        }
        if !(self.score.sigma > 0.0 && self.score.sigma.is_finite()) {
            bail!("score.sigma must be positive, got {}", self.score.sigma);
        }
        let l = self.metrics.pro_fpr_limit;
        if !(l > 0.0 && l <= 1.0) {
            bail!("metrics.pro_fpr_limit must lie in (0, 1], got {l}");
        }
        self.trainer.validate()?;
        self.data.toy.validate()?;
        Ok(self)
    }

    pub fn profile(&self) -> anyhow::Result<BackboneProfile> {
        let p = BackboneProfile::by_name(
            &self.backbone.profile,
            self.backbone.seed,
            self.backbone.weights_path.as_deref(),
        )?;
        Ok(p)
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let profile = self.profile()?;
        let bottleneck = self
            .cf
            .bottleneck_size
            .unwrap_or_else(|| profile.default_filter_bottleneck());
        Ok(ModelConfig {
            profile,
            filter: FilterConfig {
                enabled: self.cf.enabled,
                bottleneck_size: bottleneck,
            },
            amplifier: AmplifierConfig {
                enabled: self.ca.enabled,
                expansion: self.ca.expansion,
            },
            init_seed: self.model.init_seed,
        })
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            sigma: self.score.sigma,
            fusion: self.score.fusion,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
