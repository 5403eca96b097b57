//! Structured run configuration: TOML (or resolved JSON) on disk, CLI-flag
//! overrides, and a sha256 hash recorded in every output artifact.

use crate::attacks::{AttackConfig, LossKind};
use crate::error::{Error, Result};
use crate::model::VitConfig;
use crate::training::{DistanceMetric, LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    /// Initialization seed for the encoder weights.
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let v = VitConfig::default();
        Self {
            image_size: v.image_size,
            patch: v.patch,
            dim: v.dim,
            depth: v.depth,
            heads: v.heads,
            mlp_ratio: v.mlp_ratio,
            embed_dim: v.embed_dim,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            embed_dim: self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Clean-training epochs used to build the original encoder when no
    /// initial checkpoint is given.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub include_clean_ce: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            batch: 32,
            epochs: 5,
            seed: 0,
            pretrain_epochs: 40,
            pretrain_lr: 1e-3,
            pretrain_batch: 4,
            include_clean_ce: false,
        }
    }
}

impl TrainSection {
    /// Configuration for the clean pretraining phase; momentum-free SGD with
    /// small batches escapes the uniform-logit plateau reliably.
    pub fn pretrain_config(&self, attack: AttackConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.pretrain_lr,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: self.pretrain_batch,
            epochs: self.pretrain_epochs,
            seed: self.seed,
            attack,
            include_clean_ce: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub distance: DistanceMetric,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { alpha: 0.08, beta: 0.05, distance: DistanceMetric::L2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AttackSection {
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    pub loss: LossKind,
    pub kappa: f64,
    pub random_init: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            eps: 1.0 / 255.0,
            step: 1.0 / 255.0,
            iters: 2,
            loss: LossKind::CrossEntropy,
            kappa: 0.0,
            random_init: false,
        }
    }
}

impl AttackSection {
    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: self.eps,
            step_size: self.step,
            iterations: self.iters,
            random_init: self.random_init,
            loss_kind: self.loss,
            kappa: self.kappa,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataSection {
    /// "shapes" for the synthetic generator, or "manifest" with a path.
    pub kind: String,
    pub n: usize,
    pub manifest: Option<String>,
    pub seed: u64,
    /// Seed for synthetic text embeddings.
    pub text_seed: u64,
    pub template: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: "shapes".into(),
            n: 256,
            manifest: None,
            seed: 0,
            text_seed: 0,
            template: "a photo of a {}".into(),
        }
    }
}

/// Union of all run settings; hashed and echoed into every artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub attack: AttackSection,
    pub data: DataSection,
    pub temperature: Temperature,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct Temperature(pub f64);

impl Default for Temperature {
    fn default() -> Self {
        Self(0.07)
    }
}

impl RunConfig {
    /// Load from TOML (or a previously emitted resolved JSON config).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.0 <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if self.model.image_size % self.model.patch != 0 {
            return Err(Error::InvalidConfig("image_size must be divisible by patch".into()));
        }
        if self.model.dim % self.model.heads != 0 {
            return Err(Error::InvalidConfig("dim must be divisible by heads".into()));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch,
            epochs: self.train.epochs,
            seed: self.train.seed,
            attack: self.attack.attack_config(self.train.seed),
            include_clean_ce: self.train.include_clean_ce,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.loss.alpha, beta: self.loss.beta, distance: self.loss.distance }
    }

    pub fn to_resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).unwrap();
        s.push('\n');
        s
    }

    /// sha256 of the canonical JSON serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).unwrap();
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}
