//! Deterministic optimization for the five training regimes.
//!
//! | regime    | starts from                    | trains            | objective        | schedule |
//! |-----------|--------------------------------|-------------------|------------------|----------|
//! | `sup`     | scratch                        | encoder, decoder  | CE               | main     |
//! | `sup-tl`  | supervised auxiliary checkpoint| decoder           | CE               | finetune |
//! | `home-tl` | Frobenius pretrain checkpoint  | decoder           | CE               | finetune |
//! | `home-jo` | scratch                        | everything        | CE + α·Frobenius | main     |
//! | `home`    | Frobenius pretrain checkpoint  | encoder, decoder  | CE               | finetune |

mod adam;
mod checkpoint;
mod eval;
mod run;

pub use adam::{adam_step, AdamConfig, Moments};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use eval::{evaluate, evaluate_checkpoint, Evaluation};
pub use run::{
    initial_model, pretrain, pretrain_supervised_aux, record_joint_loss, train, EpochMetrics, Task,
    TrainOutcome, Trainer,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "sup")]
    Sup,
    #[serde(rename = "sup-tl")]
    SupTl,
    #[serde(rename = "home-tl")]
    HomeTl,
    #[serde(rename = "home-jo")]
    HomeJo,
    #[serde(rename = "home")]
    Home,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Sup,
        Regime::SupTl,
        Regime::HomeTl,
        Regime::HomeJo,
        Regime::Home,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Sup => "sup",
            Regime::SupTl => "sup-tl",
            Regime::HomeTl => "home-tl",
            Regime::HomeJo => "home-jo",
            Regime::Home => "home",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Regime::SupTl | Regime::HomeTl | Regime::Home)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub alpha: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Classifier sees every view as extra rows rather than view C only.
    pub all_views: bool,
    pub n_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: [usize; 3],
    /// `false` drops the VN layers, leaving the three lift heads.
    pub vn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Sup,
            epochs: 200,
            batch_size: 16,
            lr_start: 0.01,
            lr_end: 0.0001,
            alpha: 0.1,
            finetune_epochs: 50,
            finetune_lr: 0.0001,
            seed: 0,
            adam: AdamConfig::default(),
            all_views: false,
            n_dim: 16,
            encoder_hidden: vec![128, 64],
            decoder_hidden: [64, 64, 32],
            vn: true,
        }
    }
}

/// Log-linear interpolation from `start` to `end` across `epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || epoch == 0 || self.start == self.end {
            return self.start;
        }
        if epoch + 1 == self.epochs {
            return self.end;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        (self.start.ln() + frac * (self.end.ln() - self.start.ln())).exp()
    }
}

/// Learning rate of the main schedule at `epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.main_schedule().lr_at(epoch)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_end > self.lr_start {
            return bad(format!(
                "lr_end {} exceeds lr_start {}",
                self.lr_end, self.lr_start
            ));
        }
        if self.epochs == 0 || self.finetune_epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.alpha < 0.0 || self.alpha.is_nan() {
            return Err(Error::NegativeAlpha(self.alpha));
        }
        if self.n_dim == 0 || self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn main_schedule(&self) -> Schedule {
        Schedule {
            start: self.lr_start,
            end: self.lr_end,
            epochs: self.epochs,
        }
    }

    pub fn finetune_schedule(&self) -> Schedule {
        Schedule {
            start: self.finetune_lr,
            end: self.finetune_lr,
            epochs: self.finetune_epochs,
        }
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            n_dim: self.n_dim,
            decoder_hidden: self.decoder_hidden,
            classes,
            vn: self.vn,
        }
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
