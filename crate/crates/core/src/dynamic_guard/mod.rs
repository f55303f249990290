//! Teacher-student training that enforces bounded group loss on protected
//! station clusters, and guarded or raw prediction.
//!
//! The student is any [`Predictor`]; [`ArPredictor`] is the reference one.
//! During training each prediction block is checked by the teacher against
//! `always (gloss(a) <= zeta)` for every protected cluster `a`; violated
//! blocks are corrected by the decoder and the student is pulled toward
//! the correction with strength `gamma`.

mod eval;
mod kmeans;
mod model;
mod teacher;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DataError;
use crate::decoder::DecodeError;
use crate::stl::StlError;
use crate::trsolve::SolverConfig;

pub use eval::{evaluate_models, predict, EvalRow, Mode, Prediction};
pub use kmeans::{assign_groups, kmeans, Extreme, GroupAssignment, KMeansFit, ProtectedRule};
pub use model::{ArPredictor, ModelFile, Normalizer, Predictor, Series};
pub use teacher::{bgl_formula, group_losses, teacher_correct, GroupLossTrace, TeacherOutcome, TeacherStatus};
pub use train::{batch_loss, train, BatchLoss, EpochLog, Sample, TrainLog};

#[derive(Debug, Error)]
pub enum DynamicError {
    #[error("{stations} station(s) cannot form {k} cluster(s)")]
    TooFewStations { stations: usize, k: usize },
    #[error("need at least {needed} steps of history, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no protected stations")]
    EmptyProtectedSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Knobs for [`train`] and the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Distillation strength.
    pub gamma: f64,
    /// Bounded-group-loss threshold.
    pub zeta: f64,
    /// Corrections aim at `zeta * (1 - margin)`.
    pub margin: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lag: usize,
    pub horizon: usize,
    /// Decode each predicted step on its own instead of the whole block.
    pub per_timestep: bool,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            zeta: 0.5,
            margin: 0.05,
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 32,
            lag: 24,
            horizon: 6,
            per_timestep: false,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DynamicError> {
        let bad = |m: &str| Err(DynamicError::InvalidConfig(m.to_string()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.zeta > 0.0) {
            return bad("zeta must be > 0");
        }
        if !(0.0..1.0).contains(&self.margin) {
            return bad("margin must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.lag == 0 || self.horizon == 0 || self.batch_size == 0 {
            return bad("lag, horizon and batch size must be positive");
        }
        self.solver
            .validate()
            .map_err(|e| DynamicError::InvalidConfig(e.to_string()))
    }
}
