//! Run configuration: a TOML document mirroring the harness structures.
//! Unknown keys are fatal at parse time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::synthetic::SyntheticSceneConfig;
use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossWeights};
use crate::model::ModelConfig;
use crate::prompts::PromptTemplateConfig;
use crate::skeleton::SkeletonSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Temperature of the instance contrastive loss.
    pub tau: f64,
    /// Temperature of the keypoint matching cross-entropy.
    pub tau_keypoint: f64,
    /// Debug flag: use the norm-product form of the contrastive logits.
    pub literal_norms_contrastive: bool,
    /// Reduce F_sc for the instance-prompt MSE by channel mean instead of
    /// the learned 1x1 convolution.
    pub mean_reduce_instance_maps: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            tau: 0.5,
            tau_keypoint: 0.07,
            literal_norms_contrastive: false,
            mean_reduce_instance_maps: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonChoice {
    #[default]
    SyntheticHumanoid,
    Coco17,
    Crowdpose14,
}

impl SkeletonChoice {
    pub fn build(&self) -> SkeletonSpec {
        match self {
            SkeletonChoice::SyntheticHumanoid => SkeletonSpec::synthetic_humanoid(),
            SkeletonChoice::Coco17 => SkeletonSpec::coco17(),
            SkeletonChoice::Crowdpose14 => SkeletonSpec::crowdpose14(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    Coco,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub skeleton: SkeletonChoice,
    pub synthetic: SyntheticSceneConfig,
    pub coco_annotations: Option<PathBuf>,
    pub coco_image_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Emit a progress line every this many steps.
    pub log_every: usize,
    /// Optional multiplicative decay applied to the rate every `decay_every`
    /// steps (constant rate when unset).
    pub decay_factor: Option<f64>,
    pub decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            steps: 500,
            batch_size: 8,
            log_every: 25,
            decay_factor: None,
            decay_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    #[default]
    Stub,
    Pretrained,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub kind: TextEncoderKind,
    pub weights_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Minimum center-map peak value for an instance.
    pub center_threshold: f64,
    pub max_instances: usize,
    /// Resize the short image side to this length at test time (aspect kept,
    /// dims rounded to the stride). Unset: native resolution.
    pub test_short_side: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            center_threshold: 0.3,
            max_instances: 20,
            test_short_side: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub prompts: PromptTemplateConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub text_encoder: TextEncoderConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            prompts: PromptTemplateConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            augment: AugmentConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(raw)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        config.model.num_joints = config.data.skeleton.build().num_joints();
        Ok(config)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&raw)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Full validation, including path existence for referenced files.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.weights.validate()?;
        self.losses.focal.validate()?;
        if !(self.losses.tau > 0.0 && self.losses.tau_keypoint > 0.0) {
            return Err(Error::InvalidConfig("temperatures must be positive".into()));
        }
        self.prompts.validate()?;
        self.augment.validate()?;
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.optimizer.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let Some(f) = self.optimizer.decay_factor {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig("decay_factor must be in (0,1]".into()));
            }
        }
        let skeleton = self.data.skeleton.build();
        if self.model.num_joints != skeleton.num_joints() {
            return Err(Error::InvalidConfig(format!(
                "model.num_joints {} does not match the {}-joint skeleton",
                self.model.num_joints,
                skeleton.num_joints()
            )));
        }
        match self.data.kind {
            DataKind::Synthetic => self.data.synthetic.validate()?,
            DataKind::Coco => {
                let ann = self.data.coco_annotations.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("coco kind needs data.coco_annotations".into())
                })?;
                let root = self.data.coco_image_root.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("coco kind needs data.coco_image_root".into())
                })?;
                if !ann.exists() {
                    return Err(Error::InvalidConfig(format!(
                        "annotation file {} does not exist",
                        ann.display()
                    )));
                }
                if !root.is_dir() {
                    return Err(Error::InvalidConfig(format!(
                        "image root {} is not a directory",
                        root.display()
                    )));
                }
            }
        }
        if self.text_encoder.kind == TextEncoderKind::Pretrained {
            let path = self.text_encoder.weights_path.as_ref().ok_or_else(|| {
                Error::InvalidConfig("pretrained text encoder needs weights_path".into())
            })?;
            if !path.exists() {
                return Err(Error::InvalidConfig(format!(
                    "text encoder weights {} do not exist",
                    path.display()
                )));
            }
        }
        let (th, tw) = self.augment.target_size;
        if th % self.model.heatmap_stride != 0 || tw % self.model.heatmap_stride != 0 {
            return Err(Error::InvalidConfig(
                "augment.target_size must be divisible by the heatmap stride".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.inference.center_threshold) {
            return Err(Error::InvalidConfig("center_threshold outside [0,1]".into()));
        }
        if self.inference.max_instances == 0 {
            return Err(Error::InvalidConfig("max_instances must be >= 1".into()));
        }
        Ok(())
    }

    /// The shipped desk-scale overfit configuration: 8 small synthetic scenes
    /// with forced overlap, a tiny model, all loss weights 1.
    pub fn overfit_acceptance() -> Self {
        let mut config = RunConfig {
            seed: 7,
            output_dir: PathBuf::from("runs/overfit"),
            ..RunConfig::default()
        };
        config.model = ModelConfig {
            backbone_channels: vec![12, 24, 24],
            feature_dim: 32,
            fused_dim: 32,
            embed_dim: 32,
            heatmap_stride: 4,
            num_joints: 11,
            attention_heads: 4,
            ..ModelConfig::default()
        };
        config.data.kind = DataKind::Synthetic;
        config.data.skeleton = SkeletonChoice::SyntheticHumanoid;
        config.data.synthetic = SyntheticSceneConfig {
            num_instances_min: 2,
            num_instances_max: 3,
            overlap_probability: 1.0,
            image_size: (64, 64),
            num_samples: 8,
            seed: 7,
            ..SyntheticSceneConfig::default()
        };
        config.augment = AugmentConfig {
            enabled: false,
            target_size: (64, 64),
            ..AugmentConfig::default()
        };
        config.optimizer = OptimizerConfig {
            learning_rate: 0.002,
            steps: 900,
            batch_size: 4,
            log_every: 50,
            ..OptimizerConfig::default()
        };
        config.inference.center_threshold = 0.3;
        config.inference.max_instances = 6;
        config
    }
}
