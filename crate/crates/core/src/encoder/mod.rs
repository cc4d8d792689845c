//! Triplet-loss encoder: base networks, loss, triplet mining and training.

mod loss;
mod mining;
mod train;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkBuilder};
use crate::numeric::Embedding;
use crate::seed::{rng_for, Tag};

pub use loss::{triplet_batch_gradients, triplet_loss, TripletInput};
pub use mining::{mine_offline_triplets, mine_semihard, SelectedTriplet, Triplet};
pub use train::{train_encoder, TrainedEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn1d,
    Rnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    OfflineExhaustive,
    OnlineSemihard,
}

fn d_arch() -> Arch {
    Arch::Mlp
}
fn d_embedding_dim() -> usize {
    128
}
fn d_hidden_dim() -> usize {
    128
}
fn d_dropout() -> f64 {
    0.1
}
fn d_margin() -> f64 {
    1.0
}
fn d_mining() -> Mining {
    Mining::OfflineExhaustive
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "d_arch")]
    pub arch: Arch,
    #[serde(default = "d_embedding_dim")]
    pub embedding_dim: usize,
    /// Width of the hidden dense layers.
    #[serde(default = "d_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_mining")]
    pub mining: Mining,
    /// Defaults to 5 for offline mining and 20 for online semi-hard mining.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            arch: d_arch(),
            embedding_dim: d_embedding_dim(),
            hidden_dim: d_hidden_dim(),
            dropout_rate: d_dropout(),
            margin: d_margin(),
            mining: d_mining(),
            epochs: None,
            batch_size: d_batch(),
            learning_rate: d_lr(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mining {
            Mining::OfflineExhaustive => 5,
            Mining::OnlineSemihard => 20,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::argument(
                "embedding_dim and hidden_dim must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::argument(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::argument(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::argument("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// A base network that maps a feature vector to an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub arch: Arch,
    pub embedding_dim: usize,
    pub network: Network,
}

impl EncoderModel {
    /// Freshly initialized model, seeded from `config.seed`.
    ///
    /// * MLP: dense(hidden) → ReLU → dense(hidden) → ReLU → dense(embedding) → dropout
    /// * CNN1D: conv(8 filters, width 3) → ReLU → max-pool(2) → dense(hidden) → ReLU
    ///   → dense(embedding) → dropout
    /// * RNN: LSTM with `embedding_dim` hidden units → dropout
    pub fn new(config: &EncoderConfig, input_len: usize) -> Result<Self> {
        config.validate()?;
        if input_len == 0 {
            return Err(Error::argument("input length must be at least 1"));
        }
        let mut rng = rng_for(config.seed, &[Tag::Str("encoder-init")]);
        let b = NetworkBuilder::new(input_len, &mut rng);
        let network = match config.arch {
            Arch::Mlp => b
                .dense(config.hidden_dim)
                .relu()
                .dense(config.hidden_dim)
                .relu()
                .dense(config.embedding_dim)
                .dropout(config.dropout_rate)
                .build(),
            Arch::Cnn1d => b
                .conv1d(8, 3)?
                .relu()
                .max_pool(2)?
                .dense(config.hidden_dim)
                .relu()
                .dense(config.embedding_dim)
                .dropout(config.dropout_rate)
                .build(),
            Arch::Rnn => b
                .lstm(config.embedding_dim)?
                .dropout(config.dropout_rate)
                .build(),
        };
        Ok(EncoderModel {
            arch: config.arch,
            embedding_dim: config.embedding_dim,
            network,
        })
    }

    pub fn input_len(&self) -> usize {
        self.network.input_len
    }

    /// Training-mode pass when `rng` is given (dropout active), inference
    /// otherwise.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], rng: Option<&mut R>) -> Result<Embedding> {
        Ok(Embedding(self.network.forward(x, rng)?.output))
    }

    /// Deterministic, dropout-free embedding.
    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        Ok(Embedding(self.network.infer(x)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(len: usize) -> Vec<f64> {
        (0..len).map(|i| ((i * 7) % 11) as f64 / 10.0).collect()
    }

    #[test]
    fn output_dimension_and_determinism() {
        for arch in [Arch::Mlp, Arch::Cnn1d, Arch::Rnn] {
            let cfg = EncoderConfig {
                arch,
                ..EncoderConfig::default()
            };
            let m = EncoderModel::new(&cfg, 20).unwrap();
            let x = input(20);
            let a = m.embed(&x).unwrap();
            assert_eq!(a.dim(), 128, "{arch:?}");
            assert_eq!(a, m.embed(&x).unwrap());
        }
    }

    #[test]
    fn no_dropout_means_train_equals_inference() {
        for arch in [Arch::Mlp, Arch::Cnn1d, Arch::Rnn] {
            let cfg = EncoderConfig {
                arch,
                dropout_rate: 0.0,
                ..EncoderConfig::default()
            };
            let m = EncoderModel::new(&cfg, 16).unwrap();
            let x = input(16);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            assert_eq!(m.forward(&x, Some(&mut rng)).unwrap(), m.embed(&x).unwrap());
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let m = EncoderModel::new(&EncoderConfig::default(), 16).unwrap();
        assert!(matches!(m.embed(&input(15)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = EncoderConfig {
            arch: Arch::Cnn1d,
            embedding_dim: 8,
            ..EncoderConfig::default()
        };
        let m = EncoderModel::new(&cfg, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        m.save(&path).unwrap();
        assert_eq!(EncoderModel::load(&path).unwrap(), m);
    }

    #[test]
    fn config_defaults_follow_mining() {
        let mut cfg = EncoderConfig::default();
        assert_eq!(cfg.epochs(), 5);
        cfg.mining = Mining::OnlineSemihard;
        assert_eq!(cfg.epochs(), 20);
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }
}
