//! Experiment configuration: one TOML file drives synthesis, training,
//! calibration and evaluation. Unknown keys are hard errors so typos
//! cannot silently fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::axis::AxisRole;
use crate::encoders::{EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::features::{
    BackgroundCondition, CorrelationMode, FeatureExtractor, SynthConfig,
};
use crate::separation::{SeparatorConfig, MAX_SOURCES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Separated source count M.
    pub sources: usize,
    /// Embedding depth D, shared by both modalities.
    pub depth: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Encoder blocks L.
    pub blocks: usize,
    pub variant: EncoderVariant,
    pub dropout: f64,
    pub mean_query_pooling: bool,
    pub time_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sources: 4,
            depth: 64,
            heads: 4,
            blocks: 4,
            variant: EncoderVariant::SeparableSa,
            dropout: 0.1,
            mean_query_pooling: false,
            time_encoding: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorSection {
    /// Analysis window and hop in samples.
    pub win: usize,
    pub basis: usize,
    pub conv_taps: usize,
    pub dilations: Vec<usize>,
}

impl Default for SeparatorSection {
    fn default() -> Self {
        Self { win: 64, basis: 64, conv_taps: 3, dilations: vec![1, 2, 4, 8] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sample_rate: usize,
    /// Clip length T' in samples.
    pub samples: usize,
    /// Video (and feature) frames T per clip.
    pub frames: usize,
    pub frame_rate: usize,
    pub mel_bands: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub video_height: usize,
    pub video_width: usize,
    /// On-screen components per synthetic clip.
    pub on_sources: usize,
    pub off_sources: usize,
    pub correlation: CorrelationMode,
    pub background: BackgroundCondition,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            samples: 8000,
            frames: 16,
            frame_rate: 16,
            mel_bands: 32,
            grid_h: 8,
            grid_w: 8,
            video_height: 32,
            video_width: 32,
            on_sources: 2,
            off_sources: 2,
            correlation: CorrelationMode::Perfect,
            background: BackgroundCondition::Offscreen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Desk-scale default 8; full-scale reference value is 256.
    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub joint_steps: u64,
    /// Soft threshold for the reconstruction loss, in dB.
    pub tau_db: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, batch_size: 8, pretrain_steps: 2000, joint_steps: 2000, tau_db: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_examples: usize,
    pub validation_examples: usize,
    pub test_examples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train_examples: 64, validation_examples: 16, test_examples: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub separator: SeparatorSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.sources == 0 || m.sources > MAX_SOURCES {
            return Err(Error::Config(format!("model.sources must be 1..={MAX_SOURCES}")));
        }
        if m.depth == 0 || m.heads == 0 || m.blocks == 0 {
            return Err(Error::Config("model sizes must be positive".to_string()));
        }
        if m.depth % m.heads != 0 {
            return Err(Error::Config(format!(
                "depth {} does not split across {} heads",
                m.depth, m.heads
            )));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", m.dropout)));
        }
        let d = &self.data;
        if d.grid_h == 0 || d.grid_w == 0 || d.mel_bands == 0 {
            return Err(Error::Config("data sizes must be positive".to_string()));
        }
        if d.video_height % d.grid_h != 0 || d.video_width % d.grid_w != 0 {
            return Err(Error::Config(format!(
                "{}x{} video does not tile a {}x{} grid",
                d.video_height, d.video_width, d.grid_h, d.grid_w
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".to_string()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".to_string()));
        }
        self.synth_config().validate()?;
        self.separator_config().validate()?;
        self.encoder_config().validate()?;
        // The feature extractor checks frame/band geometry.
        self.feature_extractor()?;
        Ok(())
    }

    pub fn grid_positions(&self) -> usize {
        self.data.grid_h * self.data.grid_w
    }

    pub fn separator_config(&self) -> SeparatorConfig {
        SeparatorConfig {
            sources: self.model.sources,
            samples: self.data.samples,
            win: self.separator.win,
            basis: self.separator.basis,
            conv_taps: self.separator.conv_taps,
            dilations: self.separator.dilations.clone(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        // The attended axes below are a placeholder; every block swaps in
        // its own set.
        let mut att = AttentionConfig::new(self.model.depth, self.model.heads, &[AxisRole::Time]);
        att.dropout = self.model.dropout;
        let mut cfg = EncoderConfig::new(self.model.variant, self.model.blocks, att);
        cfg.mean_query_pooling = self.model.mean_query_pooling;
        cfg.time_encoding = self.model.time_encoding;
        cfg
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            on_sources: self.data.on_sources,
            off_sources: self.data.off_sources,
            samples: self.data.samples,
            sample_rate: self.data.sample_rate,
            frames: self.data.frames,
            frame_rate: self.data.frame_rate,
            video_height: self.data.video_height,
            video_width: self.data.video_width,
            correlation: self.data.correlation,
            background: self.data.background,
        }
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(
            self.seed,
            self.data.samples,
            self.data.frames,
            self.model.depth,
            self.data.mel_bands,
            self.data.sample_rate,
            self.data.grid_h,
            self.data.grid_w,
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    /// A fully commented starting config equal to the defaults.
    pub fn commented_template() -> &'static str {
        TEMPLATE
    }
}

const TEMPLATE: &str = r#"# avscope experiment configuration.
# Desk-scale defaults throughout; full-scale reference values in comments.

seed = 0

[model]
sources = 4                 # separated sources M
depth = 64                  # embedding depth D (full-scale reference: 256)
heads = 4                   # attention heads H (full-scale reference: 8)
blocks = 4                  # encoder blocks L
variant = "separable_sa"    # joint_sa | separable_sa | joint_cma | separable_cma
dropout = 0.1
mean_query_pooling = false  # use the time mean instead of the time sum as the pooling query
time_encoding = false       # add a sinusoidal time table to the packed features

[separator]
win = 64                    # analysis window and hop, samples
basis = 64                  # learned filter count (full-scale reference: 256)
conv_taps = 3
dilations = [1, 2, 4, 8]

[data]
sample_rate = 8000          # Hz (full-scale reference: 16000)
samples = 8000              # clip length, samples (1 s)
frames = 16                 # feature frames T = seconds * frame_rate
frame_rate = 16             # video FPS
mel_bands = 32
grid_h = 8                  # video grid: G = grid_h * grid_w = 64
grid_w = 8
video_height = 32           # synthetic frame pixels; must tile the grid
video_width = 32
on_sources = 2              # components in each on-screen clip
off_sources = 2             # components in each background mixture
correlation = "perfect"     # perfect | null (video independent of audio)
background = "offscreen"    # offscreen | random

[train]
learning_rate = 0.0001
batch_size = 8              # full-scale reference: 256
pretrain_steps = 2000
joint_steps = 2000
tau_db = 30.0               # reconstruction loss soft threshold

[dataset]
train_examples = 64
validation_examples = 16
test_examples = 32
"#;
