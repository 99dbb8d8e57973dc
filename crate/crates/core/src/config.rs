//! Pipeline configuration: one TOML-serializable struct with every default
//! pinned, layered as defaults < file < CLI flags. The effective config is
//! hashed into run manifests and checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_area_frac: f64,
    pub max_caption_len: usize,
    /// Validation/test sizes drawn from the validation annotations; a ratio
    /// split is used when the counts exceed the available records.
    pub val_size: usize,
    pub test_size: usize,
    /// Optional word-vector file (GloVe text format). Without it, word
    /// vectors are derived deterministically from token hashes.
    pub glove_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data_dir: PathBuf::from("data"),
            min_objects: 3,
            max_objects: 8,
            min_area_frac: 0.02,
            max_caption_len: 20,
            val_size: 1024,
            test_size: 2048,
            glove_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMerge {
    /// Per-channel per-pixel maximum across phrases and within-phrase overlaps.
    Max,
    /// Element-wise sum across phrases, max only where boxes overlap within a phrase.
    SumThenMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Word feature width (two directional hidden states concatenated).
    pub d_word: usize,
    /// Joint phrase/image matching width.
    pub d_phrase: usize,
    /// Distributional word-vector width.
    pub glove_dim: usize,
    /// Graph semantic map channels.
    pub lig_channels: usize,
    /// Comprehensive semantic map channels.
    pub fused_channels: usize,
    /// Hidden feature map channels produced by each refiner stage.
    pub hidden_channels: usize,
    /// Multiplier on generator/discriminator conv widths; 1.0 reproduces the
    /// reference architecture, smaller values keep CPU smoke runs fast.
    pub channel_scale: f64,
    pub min_box_extent: f64,
    pub layout_merge: LayoutMerge,
    pub box_source: BoxSource,
    /// Number of cascade stages; stage i emits 64 * 2^i resolution.
    pub stages: usize,
    /// Re-include the graph semantic map in stage >= 1 aggregation.
    pub lig_in_later_stages: bool,
    /// Enable the caption-conditional patch discriminator.
    pub use_caption_patch_d: bool,
    /// Swap the pretrained backbones for small randomly initialized CNNs with
    /// identical output shapes.
    pub stub_backbones: bool,
    pub inception_weights: Option<PathBuf>,
    pub vgg_weights: Option<PathBuf>,
    /// LSTM input dropout during text-encoder pretraining.
    pub text_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_word: 256,
            d_phrase: 128,
            glove_dim: 50,
            lig_channels: 64,
            fused_channels: 256,
            hidden_channels: 64,
            channel_scale: 1.0,
            min_box_extent: 1.0 / 32.0,
            layout_merge: LayoutMerge::Max,
            box_source: BoxSource::Predicted,
            stages: 3,
            lig_in_later_stages: false,
            use_caption_patch_d: false,
            stub_backbones: true,
            inception_weights: None,
            vgg_weights: None,
            text_dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_scale).round() as usize).max(4)
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        64 << stage
    }

    pub fn max_resolution(&self) -> usize {
        self.stage_resolution(self.stages - 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamsmConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub text_steps: usize,
    pub phrase_steps: usize,
}

impl Default for DamsmConfig {
    fn default() -> Self {
        DamsmConfig {
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
            batch_size: 32,
            lr: 2e-3,
            text_steps: 2000,
            phrase_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Loss weights for (gan_img, l1_img, perc_img, gan_obj, ac_obj,
    /// gan_phr, damsm_phr, box).
    pub lambda: [f64; 8],
    pub d_steps_per_g: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Cap on phrases fed to the phrase discriminators per image.
    pub phrase_d_max_pairs: usize,
    /// Run phrase discriminators on upsampled outputs when the top stage is
    /// below 256.
    #[serde(default = "default_true")]
    pub phrase_d_on_low_res: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 32,
            iterations: 200_000,
            lambda: [1.0, 1.0, 0.5, 1.0, 0.1, 0.5, 5.0, 10.0],
            d_steps_per_g: 1,
            seed: 0,
            checkpoint_every: 2000,
            log_every: 10,
            phrase_d_max_pairs: 2,
            phrase_d_on_low_res: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub is_splits: usize,
    pub n_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            is_splits: 10,
            n_images: 256,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub damsm: DamsmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// A small preset suited to CPU smoke runs on the synthetic dataset.
    pub fn desk_preset() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.model.channel_scale = 0.25;
        cfg.model.stages = 1;
        cfg.train.batch_size = 8;
        cfg.train.iterations = 500;
        cfg.train.checkpoint_every = 250;
        cfg.damsm.batch_size = 8;
        cfg.damsm.text_steps = 200;
        cfg.damsm.phrase_steps = 300;
        cfg.data.val_size = 4;
        cfg.data.test_size = 4;
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the effective config, recorded in manifests and checkpoints.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.min_objects < 2 {
            return Err(Error::Config("min_objects must be >= 2".into()));
        }
        if self.data.min_objects > self.data.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if !(self.model.stages >= 1 && self.model.stages <= 3) {
            return Err(Error::Config("stages must be in 1..=3".into()));
        }
        for g in [self.damsm.gamma1, self.damsm.gamma2, self.damsm.gamma3] {
            if g <= 0.0 {
                return Err(Error::Config("gamma factors must be positive".into()));
            }
        }
        if self.model.min_box_extent <= 0.0 || self.model.min_box_extent >= 1.0 {
            return Err(Error::Config("min_box_extent must be in (0, 1)".into()));
        }
        Ok(())
    }
}
