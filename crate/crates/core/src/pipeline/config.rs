use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{Decode, ModelConfig};
use crate::error::{Error, Result};
use crate::training::{ListenerTrainConfig, SpeakerTrainConfig};
use crate::vocab::SMALL_VOCAB_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Games per split.
    pub games: usize,
    pub n_images: usize,
    pub resolution: usize,
    /// Listeners populations draw from; ensembles take a prefix.
    pub pool_listeners: usize,
    /// Held-out listeners scoring val-L.
    pub val_listeners: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            games: 2000,
            n_images: 3,
            resolution: 32,
            pool_listeners: 10,
            val_listeners: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    /// Size of the large vocabulary, specials and domain tokens included.
    pub large_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { large_size: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Tiny,
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    /// Listener dropout rate; needed by dropout populations.
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Desk,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ensemble_sizes: Vec<usize>,
    pub dropout_sizes: Vec<usize>,
    /// Speaker replicates per condition.
    pub n_seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ensemble_sizes: vec![1, 3, 10],
            dropout_sizes: vec![1, 10],
            n_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeChoice {
    Greedy,
    Sample,
}

impl DecodeChoice {
    pub fn decode(self) -> Decode {
        match self {
            DecodeChoice::Greedy => Decode::Greedy,
            DecodeChoice::Sample => Decode::SampleHard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoding for accuracy grids and topicality.
    pub decode: DecodeChoice,
    pub embedding_dim: usize,
    /// Minimum number of zero-overlap utterances for the low level.
    pub min_low: usize,
    pub max_rounds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeChoice::Greedy,
            embedding_dim: crate::evaluation::BUNDLED_DIM,
            min_low: 30,
            max_rounds: 10,
        }
    }
}

/// One experiment, read from a TOML file with one table per section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub model: ModelSection,
    pub listener: ListenerTrainConfig,
    pub speaker: SpeakerTrainConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelSection::default(),
            listener: ListenerTrainConfig {
                epochs: 15,
                lr: 0.001,
                ..Default::default()
            },
            speaker: SpeakerTrainConfig {
                epochs: 15,
                ..Default::default()
            },
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// A few minutes end to end; exercises every stage, not the findings.
    pub fn tiny() -> Self {
        Self {
            seed: 7,
            data: DataConfig {
                games: 120,
                resolution: 16,
                pool_listeners: 3,
                val_listeners: 1,
                ..DataConfig::default()
            },
            vocab: VocabConfig { large_size: 60 },
            model: ModelSection {
                preset: ModelPreset::Tiny,
                dropout: 0.1,
            },
            listener: ListenerTrainConfig {
                epochs: 2,
                gate: 0.0,
                ..Default::default()
            },
            speaker: SpeakerTrainConfig {
                epochs: 2,
                lr: 0.01,
                ..Default::default()
            },
            sweep: SweepConfig {
                ensemble_sizes: vec![1, 3],
                dropout_sizes: vec![1, 3],
                n_seeds: 2,
            },
            eval: EvalConfig {
                min_low: 1,
                embedding_dim: 8,
                ..EvalConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (desk, tiny)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form; identifies every input of a run.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let base = match self.model.preset {
            ModelPreset::Tiny => ModelConfig {
                resolution: 16,
                conv_blocks: 2,
                filters: 4,
                embed_dim: 8,
                hidden_dim: 8,
                gru_layers: 1,
                max_len: 4,
                ..ModelConfig::desk(vocab_size)
            },
            ModelPreset::Desk => ModelConfig::desk(vocab_size),
            ModelPreset::Paper => ModelConfig::paper(vocab_size),
        };
        ModelConfig {
            resolution: self.data.resolution,
            n_images: self.data.n_images,
            ..base
        }
        .with_dropout(self.model.dropout)
    }

    /// Speakers share the listener architecture without dropout.
    pub fn speaker_model(&self, vocab_size: usize) -> ModelConfig {
        self.model_config(vocab_size).with_dropout(0.0)
    }

    pub fn max_ensemble(&self) -> usize {
        self.sweep.ensemble_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn max_dropout(&self) -> usize {
        self.sweep.dropout_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.games < 2 || d.n_images < 2 || d.pool_listeners == 0 || d.val_listeners == 0 {
            return Err(Error::Config(
                "data needs games >= 2, n_images >= 2 and at least one pool and one validation listener".into(),
            ));
        }
        if self.vocab.large_size <= SMALL_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "large vocabulary must exceed the small one ({SMALL_VOCAB_SIZE})"
            )));
        }
        self.model_config(self.vocab.large_size).validate()?;
        self.listener.validate()?;
        self.speaker.validate()?;
        if self.model.dropout <= 0.0 && !self.sweep.dropout_sizes.is_empty() {
            return Err(Error::Config("dropout sizes need model.dropout > 0".into()));
        }
        if self.max_ensemble() > d.pool_listeners {
            return Err(Error::Config(format!(
                "ensemble size {} exceeds the {} pool listeners",
                self.max_ensemble(),
                d.pool_listeners
            )));
        }
        let sizes = self.sweep.ensemble_sizes.iter().chain(&self.sweep.dropout_sizes);
        if sizes.clone().any(|&n| n == 0) || self.sweep.n_seeds == 0 {
            return Err(Error::Config("population sizes and n_seeds must be positive".into()));
        }
        if self.eval.embedding_dim == 0 || self.eval.max_rounds == 0 {
            return Err(Error::Config("embedding_dim and max_rounds must be positive".into()));
        }
        Ok(())
    }
}
