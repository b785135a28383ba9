use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelMode};
use crate::triplet::LossConfig;

/// Which embedding loss accompanies the task losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossMode {
    /// No embedding term.
    #[serde(rename = "WTL")]
    Wtl,
    /// Class-label triplet loss.
    #[serde(rename = "CLTL")]
    Cltl,
    /// Class- and box-label triplet losses weighted by λ.
    #[serde(rename = "MATL")]
    Matl,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Wtl => "WTL",
            LossMode::Cltl => "CLTL",
            LossMode::Matl => "MATL",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by every model of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub folds: usize,
    /// Fraction of the data used for cross-validated training; the rest is the test set.
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Drives the split, the folds and the batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Coefficient of the embedding term in the total loss.
    pub triplet_weight: f64,
    pub box_k: usize,
    pub box_restarts: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            folds: 8,
            train_fraction: 0.3,
            epochs: 16,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            triplet_weight: 1.0,
            box_k: 3,
            box_restarts: 10,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.triplet_weight >= 0.0 && self.triplet_weight.is_finite()) {
            return bad(format!("triplet_weight must be >= 0, got {}", self.triplet_weight));
        }
        if self.box_k < 1 || self.box_restarts < 1 {
            return bad("box_k and box_restarts must be at least 1".into());
        }
        self.model.validate()?;
        self.loss.validate()
    }
}

/// Everything needed to train one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_mode: ModelMode,
    pub loss_mode: LossMode,
    /// Box-term weight; present exactly when `loss_mode` is MATL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub protocol: Protocol,
}

impl ExperimentConfig {
    pub fn new(model_mode: ModelMode, loss_mode: LossMode, lambda: Option<f64>, protocol: Protocol) -> Self {
        Self {
            model_mode,
            loss_mode,
            lambda,
            protocol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.loss_mode, self.lambda)?;
        self.protocol.validate()
    }

    /// Loss settings with λ applied.
    pub fn loss_config(&self) -> LossConfig {
        match self.lambda {
            Some(l) => self.protocol.loss.with_lambda(l),
            None => self.protocol.loss.clone(),
        }
    }
}

pub(crate) fn check_lambda(loss_mode: LossMode, lambda: Option<f64>) -> Result<()> {
    match (loss_mode, lambda) {
        (LossMode::Matl, Some(l)) if (0.0..=1.0).contains(&l) => Ok(()),
        (LossMode::Matl, Some(l)) => Err(Error::Config(format!("lambda must lie in [0, 1], got {l}"))),
        (LossMode::Matl, None) => Err(Error::Config("MATL requires lambda".into())),
        (_, Some(_)) => Err(Error::Config(format!("lambda is only valid with MATL, not {loss_mode}"))),
        (_, None) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_presence_follows_loss_mode() {
        let p = Protocol::default();
        let ok = [
            (LossMode::Wtl, None),
            (LossMode::Cltl, None),
            (LossMode::Matl, Some(0.25)),
        ];
        for (m, l) in ok {
            ExperimentConfig::new(ModelMode::MultiTask, m, l, p.clone()).validate().unwrap();
        }
        let bad = [
            (LossMode::Wtl, Some(0.5)),
            (LossMode::Matl, None),
            (LossMode::Matl, Some(1.5)),
        ];
        for (m, l) in bad {
            let r = ExperimentConfig::new(ModelMode::MultiTask, m, l, p.clone()).validate();
            assert!(matches!(r, Err(Error::Config(_))), "{m} {l:?}");
        }
    }

    #[test]
    fn protocol_bounds() {
        let base = Protocol::default();
        for p in [
            Protocol { folds: 1, ..base.clone() },
            Protocol { train_fraction: 0.0, ..base.clone() },
            Protocol { train_fraction: 1.0, ..base.clone() },
            Protocol { batch_size: 1, ..base.clone() },
        ] {
            assert!(p.validate().is_err());
        }
    }

    #[test]
    fn loss_modes_use_upper_case_names() {
        assert_eq!(serde_json::to_string(&LossMode::Matl).unwrap(), "\"MATL\"");
        let m: LossMode = serde_json::from_str("\"CLTL\"").unwrap();
        assert_eq!(m, LossMode::Cltl);
    }
}
