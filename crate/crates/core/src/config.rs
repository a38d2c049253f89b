//! Run configuration: model dimensions, optimizer settings, training lengths.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Which relationship explorer feeds the decoder.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Self-attention over all concepts jointly.
    Coarse,
    /// Category-restricted attribute/object/relation aggregators.
    Fine,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Coarse => f.write_str("coarse"),
            Mode::Fine => f.write_str("fine"),
        }
    }
}

/// Training phase tag used in logs and checkpoints.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Rl,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_xe: usize,
    pub epochs_rl: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: Mode,
    pub seed: u64,
    pub max_len: usize,
    /// Cap on concepts kept per example.
    pub n_gmax: usize,
    /// Word/concept embedding width.
    pub e: usize,
    /// LSTM hidden size.
    pub d: usize,
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    /// Attention hidden width (relationship embedding and decoder attention).
    pub d_a: usize,
    /// Rows per relationship embedding.
    pub r: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_xe: 15,
            epochs_rl: 5,
            batch_size: 50,
            learning_rate: 4e-4,
            beta1: 0.8,
            beta2: 0.999,
            mode: Mode::Fine,
            seed: 42,
            max_len: 20,
            n_gmax: 20,
            e: 512,
            d: 512,
            n_heads: 8,
            d_ff: 2048,
            d_a: 350,
            r: 30,
        }
    }
}

impl TrainConfig {
    /// Small dimensions for fast end-to-end runs on one core. The learning
    /// rate is raised to suit the tiny batches this preset trains with.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 5,
            learning_rate: 2e-3,
            max_len: 16,
            e: 64,
            d: 64,
            n_heads: 4,
            d_ff: 128,
            d_a: 48,
            r: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positives = [
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("n_gmax", self.n_gmax),
            ("e", self.e),
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_a", self.d_a),
            ("r", self.r),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::NotPositive("learning_rate"));
        }
        if self.e % self.n_heads != 0 {
            return Err(ConfigError::HeadsDontDivide { e: self.e, n_heads: self.n_heads });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConfigError {
    NotPositive(&'static str),
    HeadsDontDivide { e: usize, n_heads: usize },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::NotPositive(name) => write!(f, "config field {name} must be positive"),
            ConfigError::HeadsDontDivide { e, n_heads } => {
                write!(f, "embedding width {e} is not divisible by {n_heads} heads")
            }
        }
    }
}

impl core::error::Error for ConfigError {}
