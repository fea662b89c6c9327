//! Experiment configuration: one JSON file with a section per component.

use std::path::{Path, PathBuf};

use hyperinvert_core::encoder::EncoderConfig;
use hyperinvert_core::genspec::{
    full_stylegan2_spec, toy_spec, BackboneConfig, GeneratorSpec, HeadVariant, HyperNetConfig, LayerPolicy,
};
use hyperinvert_core::losses::LossConfig;
use hyperinvert_core::trainer::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const BUILTIN_FULL: &str = "stylegan2-1024";

/// Resolves `stylegan2-1024`, `toy-<resolution>-<channels>` or a spec file.
pub fn resolve_spec(name: &str) -> Result<GeneratorSpec, CliError> {
    if name == BUILTIN_FULL {
        return Ok(full_stylegan2_spec());
    }
    if let Some(rest) = name.strip_prefix("toy-") {
        let parts: Vec<&str> = rest.split('-').collect();
        if let [r, c] = parts[..] {
            if let (Ok(r), Ok(c)) = (r.parse(), c.parse()) {
                return Ok(toy_spec(r, c)?);
            }
        }
        return Err(CliError::Config(format!("bad toy spec name `{name}`, expected toy-<resolution>-<channels>")));
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "spec `{name}` is neither {BUILTIN_FULL}, toy-<resolution>-<channels> nor an existing file"
        )));
    }
    Ok(GeneratorSpec::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub spec: String,
    /// Weights to load; a fixed random generator seeded by `seed` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub base_width: usize,
    /// Pretrained encoder; pretraining runs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub pretrain_steps: usize,
    pub learning_rate: f64,
    /// Samples used for the mean latent.
    pub n_avg: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            base_width: 4,
            checkpoint: None,
            pretrain_steps: 1000,
            learning_rate: 1e-3,
            n_avg: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetSection {
    pub head_variant: HeadVariant,
    pub layer_policy: LayerPolicy,
    /// Backbone width `w` for stages `[w, 2w, 4w, 8w]`; ResNet34 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_fc_dim: Option<usize>,
}

impl Default for HypernetSection {
    fn default() -> Self {
        Self {
            head_variant: HeadVariant::PerChannelSharedMix,
            layer_policy: LayerPolicy::MediumFineConv,
            base_width: None,
            shared_fc_dim: None,
        }
    }
}

impl HypernetSection {
    pub fn build(&self, spec: &GeneratorSpec, refinement_steps: usize) -> Result<HyperNetConfig, CliError> {
        let resolution = spec.resolution()?;
        let backbone = match self.base_width {
            Some(w) => BackboneConfig::toy(6, w),
            None => BackboneConfig::resnet34(6),
        };
        let s = backbone.feature_size(resolution);
        let cfg = HyperNetConfig {
            head_variant: self.head_variant,
            layer_policy: self.layer_policy,
            refinement_steps,
            backbone_feature_shape: (s, s, backbone.feature_channels()),
            shared_fc_dim: self.shared_fc_dim.unwrap_or_else(|| spec.max_conv_channels()),
            backbone,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training hyperparameters; the loss weights live in their own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(alias = "refinement_steps_T")]
    pub refinement_steps: usize,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub truncate_unroll: bool,
    /// Generator samples used for training.
    pub dataset_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            refinement_steps: t.refinement_steps,
            optimizer: t.optimizer,
            truncate_unroll: t.truncate_unroll,
            dataset_size: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSection,
    pub encoder: EncoderSection,
    pub hypernet: HypernetSection,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

const SECTIONS: [&str; 7] = ["generator", "encoder", "hypernet", "train", "loss", "output_dir", "seed"];

impl ExperimentConfig {
    /// Defaults for a toy spec with reduced backbones.
    pub fn toy(spec: &str) -> Self {
        Self {
            generator: GeneratorSection {
                spec: spec.to_string(),
                checkpoint: None,
                seed: 0,
            },
            encoder: EncoderSection::default(),
            hypernet: HypernetSection {
                base_width: Some(4),
                ..HypernetSection::default()
            },
            train: TrainSection::default(),
            loss: LossConfig::default(),
            output_dir: PathBuf::from("runs/toy"),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        let missing: Vec<&str> = SECTIONS.iter().copied().filter(|s| !obj.contains_key(*s)).collect();
        if !missing.is_empty() {
            return Err(CliError::Config(format!("config is missing sections: {}", missing.join(", "))));
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
    }

    pub fn spec(&self) -> Result<GeneratorSpec, CliError> {
        resolve_spec(&self.generator.spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            refinement_steps: self.train.refinement_steps,
            optimizer: self.train.optimizer,
            seed: self.seed,
            loss: self.loss.clone(),
            truncate_unroll: self.train.truncate_unroll,
        }
    }

    pub fn encoder_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.encoder.learning_rate,
            steps: self.encoder.pretrain_steps,
            refinement_steps: 1,
            seed: self.seed.wrapping_add(1),
            ..self.train_config()
        }
    }

    pub fn encoder_config(&self, spec: &GeneratorSpec) -> Result<EncoderConfig, CliError> {
        Ok(EncoderConfig::toy(spec.latent_dim, spec.resolution()?, self.encoder.base_width))
    }

    pub fn hypernet_config(&self, spec: &GeneratorSpec) -> Result<HyperNetConfig, CliError> {
        self.hypernet.build(spec, self.train.refinement_steps)
    }

    /// Checks every section without building models.
    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.spec()?;
        self.hypernet_config(&spec)?;
        self.train_config().validate()?;
        self.encoder_train_config().validate()?;
        if self.train.dataset_size == 0 {
            return Err(CliError::Config("train.dataset_size must be >= 1".into()));
        }
        if self.encoder.base_width == 0 || self.encoder.n_avg == 0 {
            return Err(CliError::Config("encoder.base_width and encoder.n_avg must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
