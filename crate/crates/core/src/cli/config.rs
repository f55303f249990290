//! The run configuration: one JSON file with a section per command.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "out": "results",
//!   "input": { "panel": "panel.csv" },
//!   "rules": "rules.stl",
//!   "adjust": { "plan": { "axis": "spatial", "window": 100 } },
//!   "train": { "features": ["income"], "k": 2 },
//!   "persist": { "attribute": "income" }
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory. The
//! top-level seed overrides the seeds of the train, persist and synth
//! sections.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::dataio::{parse_timestamp, SynthSpec};
use crate::dynamic_guard::{Extreme, Mode, ProtectedRule, TrainConfig};
use crate::persistence::PtConfig;
use crate::static_guard::{PartitionPlan, DEFAULT_WINDOW};
use crate::trsolve::SolverConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub input: Option<InputConfig>,
    /// Rule file in the specification language.
    pub rules: Option<PathBuf>,
    pub analyze: AnalyzeConfig,
    pub adjust: AdjustConfig,
    pub train: DynamicConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub persist: PersistConfig,
    pub synth: Option<SynthSpec>,
}

/// Either a ready panel CSV or the raw files to build one from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum InputConfig {
    Panel {
        panel: PathBuf,
    },
    Raw {
        trips: PathBuf,
        features: PathBuf,
        stations: PathBuf,
        tracts: PathBuf,
        start: String,
        steps: usize,
        #[serde(default = "one_hour")]
        step_hours: i64,
    },
}

fn one_hour() -> i64 {
    1
}

impl InputConfig {
    pub fn start(&self) -> Option<NaiveDateTime> {
        match self {
            InputConfig::Raw { start, .. } => parse_timestamp(start),
            InputConfig::Panel { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Attributes to correlate with demand; every feature channel when empty.
    pub attributes: Vec<String>,
    pub window: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            attributes: Vec::new(),
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustConfig {
    pub plan: PartitionPlan,
    pub solver: SolverConfig,
    /// Solve all rules in one decode per partition instead of in sequence.
    pub joint: bool,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        AdjustConfig {
            plan: PartitionPlan::spatial(),
            solver: SolverConfig::default(),
            joint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicConfig {
    /// Leading share of the timeline used for training; the rest is test.
    pub train_fraction: f64,
    /// Clustering features; every feature channel when empty.
    pub features: Vec<String>,
    pub k: usize,
    /// Defaults to the lowest centroid on the first clustering feature.
    pub protected: Option<ProtectedRule>,
    pub config: TrainConfig,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            train_fraction: 0.8,
            features: Vec::new(),
            k: 2,
            protected: None,
            config: TrainConfig::default(),
        }
    }
}

impl DynamicConfig {
    pub fn protected_rule(&self, features: &[String]) -> ProtectedRule {
        self.protected.clone().unwrap_or_else(|| ProtectedRule {
            feature: features.first().cloned().unwrap_or_default(),
            extreme: Extreme::Min,
            count: 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Model file; `<out>/model.json` when absent.
    pub model: Option<PathBuf>,
    pub mode: Mode,
    /// Forecast from this step (history ends just before it); the end of
    /// the panel when absent.
    pub origin: Option<usize>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            model: None,
            mode: Mode::Guarded,
            origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub modes: Vec<Mode>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            modes: vec![Mode::Raw, Mode::Guarded],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersistConfig {
    /// Adjusted panel; produced with the rules and the adjust section when
    /// absent.
    pub adjusted: Option<PathBuf>,
    /// Protected attribute; the first rule's attribute when absent.
    pub attribute: Option<String>,
    pub config: PtConfig,
}

impl Default for PersistConfig {
    fn default() -> Self {
        PersistConfig {
            adjusted: None,
            attribute: None,
            config: PtConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Apply the effective seed to every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.config.seed = seed;
        self.persist.config.seed = seed;
        if let Some(s) = &mut self.synth {
            s.seed = seed;
        }
    }

    /// Resolve every relative path against `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.out {
            fix(p);
        }
        if let Some(p) = &mut self.rules {
            fix(p);
        }
        match &mut self.input {
            Some(InputConfig::Panel { panel }) => fix(panel),
            Some(InputConfig::Raw {
                trips,
                features,
                stations,
                tracts,
                ..
            }) => {
                fix(trips);
                fix(features);
                fix(stations);
                fix(tracts);
            }
            None => {}
        }
        if let Some(p) = &mut self.predict.model {
            fix(p);
        }
        if let Some(p) = &mut self.persist.adjusted {
            fix(p);
        }
    }
}
