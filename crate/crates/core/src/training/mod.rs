//! AdamW, the epoch loop with early stopping, checkpoints, warm start and
//! grid search.

mod checkpoint;
mod grid;
mod optimizer;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::ClassSet;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, warm_start, Checkpoint, LineageEntry, CHECKPOINT_FORMAT,
};
pub use grid::{grid_search, Grid, GridCell, GridOutcome, GridResult};
pub use optimizer::{optimizer_step, AdamState, AdamWConfig};
pub use trainer::{
    evaluate_loss, train, train_with, EarlyStopping, EpochRecord, LossSummary, WarmStart,
};

/// Target of the two-way auxiliary branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxTask {
    /// Whether the clip carries any dysfluency label.
    Any,
    /// Speaker gender; clips of unknown gender are left out of the auxiliary loss.
    Gender,
}

/// Dev loss used for early stopping and model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Total,
    Main,
}

/// Treatment of the Mod output for clips from corpora without that label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModPolicy {
    /// Mod is a known negative.
    Negative,
    /// Mod is left out of the main loss for those clips.
    Mask,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

str_enum!(AuxTask { Any => "any", Gender => "gender" });
str_enum!(Monitor { Total => "total", Main => "main" });
str_enum!(ModPolicy { Negative => "negative", Mask => "mask" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub aux_task: AuxTask,
    pub class_set: ClassSet,
    pub seed: u64,
    pub monitor: Monitor,
    pub mod_policy: ModPolicy,
    /// Learned query/key/value projections in the pooling attention.
    pub projections: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 256,
            max_epochs: 20,
            patience: 5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            aux_task: AuxTask::Any,
            class_set: ClassSet::Seven,
            seed: 0,
            monitor: Monitor::Total,
            mod_policy: ModPolicy::Negative,
            projections: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.loss.validate(self.class_set.len())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs, c.patience), (3e-5, 256, 20, 5));
        assert_eq!((c.loss.w_main, c.loss.alpha, c.loss.gamma), (0.9, 0.7, 3.0));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { patience: 30, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { weight_decay: -1.0, ..Default::default() },
            TrainConfig { adam_beta2: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn json_round_trip_and_names() {
        let c = TrainConfig { seed: 9, aux_task: AuxTask::Gender, ..Default::default() };
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!("main".parse::<Monitor>().unwrap(), Monitor::Main);
        assert!("loss".parse::<Monitor>().is_err());
        assert_eq!(ModPolicy::Mask.to_string(), "mask");
    }
}
