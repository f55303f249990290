//! Synthetic panels with a planted, known coupling between one feature and
//! demand.
//!
//! ```text
//! demand[s][t] = base + seasonal(t) + beta(t) * (feature[s][t] - feature_mean) + noise[s][t]
//! ```
//!
//! Noise is a stationary AR(1) process per station with marginal standard
//! deviation `noise_scale`, so the autoregressive coefficient changes the
//! dynamics without changing the planted correlation.

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::panel::{Panel, Provenance, TimeGrid};
use super::DataError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    Constant { beta: f64 },
    /// `beta` before step `at`, `-beta` from `at` on.
    SignFlip { beta: f64, at: usize },
    Sinusoid { amplitude: f64, period: f64 },
    /// Constant coupling chosen so the expected spatial Pearson correlation
    /// between the coupled feature and demand is `rho`.
    TargetPc { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub mean: f64,
    /// Spread of the per-station base values.
    pub sd: f64,
    #[serde(default)]
    pub drift_per_step: f64,
    #[serde(default)]
    pub temporal_noise: f64,
}

/// A block of stations with shifted coupled-feature values and their own
/// noise dynamics, used as a ground-truth protected cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedGroup {
    pub size: usize,
    /// Shift of the coupled feature's base value, in units of its `sd`.
    pub shift: f64,
    pub noise_ar: f64,
    #[serde(default = "one")]
    pub noise_scale_factor: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub stations: usize,
    pub timestamps: usize,
    pub start: NaiveDateTime,
    pub step_hours: i64,
    pub base_level: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_period: f64,
    pub coupled_feature: String,
    pub coupling: Coupling,
    pub noise_scale: f64,
    pub noise_ar: f64,
    pub features: Vec<FeatureSpec>,
    pub planted_group: Option<PlantedGroup>,
    pub clamp_nonnegative: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            stations: 42,
            timestamps: 2000,
            start: NaiveDate::from_ymd_opt(2020, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            step_hours: 1,
            base_level: 20.0,
            seasonal_amplitude: 3.0,
            seasonal_period: 24.0,
            coupled_feature: "income".into(),
            coupling: Coupling::TargetPc { rho: -0.5 },
            noise_scale: 1.0,
            noise_ar: 0.0,
            features: vec![
                FeatureSpec {
                    name: "income".into(),
                    mean: 50.0,
                    sd: 15.0,
                    drift_per_step: 0.0,
                    temporal_noise: 0.0,
                },
                FeatureSpec {
                    name: "assistance".into(),
                    mean: 20.0,
                    sd: 5.0,
                    drift_per_step: 0.0,
                    temporal_noise: 0.0,
                },
            ],
            planted_group: None,
            clamp_nonnegative: true,
            seed: 0,
        }
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coupled_feature: String,
    /// Coupling coefficient per timestamp.
    pub beta: Vec<f64>,
    /// Expected spatial Pearson correlation per timestamp (noise-free limit
    /// for deterministic couplings, planted target for `TargetPc`).
    pub expected_pc: Vec<f64>,
    pub planted_stations: Vec<usize>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.stations == 0 || self.timestamps == 0 {
            return bad("stations and timestamps must be positive");
        }
        if self.step_hours <= 0 {
            return bad("step_hours must be positive");
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be >= 0");
        }
        if !(self.noise_ar.abs() < 1.0) {
            return bad("noise_ar must lie in (-1, 1)");
        }
        if !self.features.iter().any(|f| f.name == self.coupled_feature) {
            return bad("coupled_feature must name one of the features");
        }
        if self.features.iter().any(|f| f.name == "demand" || !(f.sd >= 0.0)) {
            return bad("features need a non-demand name and sd >= 0");
        }
        if let Coupling::TargetPc { rho } = self.coupling {
            if !(rho.abs() < 1.0) {
                return bad("target rho must lie in (-1, 1)");
            }
        }
        if let Some(g) = &self.planted_group {
            if g.size == 0 || g.size >= self.stations {
                return bad("planted group size must be in [1, stations)");
            }
            if !(g.noise_ar.abs() < 1.0) || !(g.noise_scale_factor >= 0.0) {
                return bad("planted group noise parameters out of range");
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Panel, GroundTruth), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_s, n_t) = (spec.stations, spec.timestamps);
    let planted: Vec<usize> = match &spec.planted_group {
        Some(g) => (n_s - g.size..n_s).collect(),
        None => Vec::new(),
    };

    // Per-station feature bases, then per-step values.
    let mut features = Vec::with_capacity(spec.features.len());
    let mut coupled_bases = Vec::new();
    for f in &spec.features {
        let bases: Vec<f64> = (0..n_s)
            .map(|s| {
                let shift = match &spec.planted_group {
                    Some(g) if f.name == spec.coupled_feature && planted.contains(&s) => g.shift,
                    _ => 0.0,
                };
                f.mean + f.sd * (normal(&mut rng) + shift)
            })
            .collect();
        let mut values = Vec::with_capacity(n_s * n_t);
        for &base in &bases {
            for t in 0..n_t {
                let jitter = if f.temporal_noise > 0.0 {
                    f.temporal_noise * normal(&mut rng)
                } else {
                    0.0
                };
                values.push(base + f.drift_per_step * t as f64 + jitter);
            }
        }
        if f.name == spec.coupled_feature {
            coupled_bases = bases;
        }
        features.push((f.name.clone(), values, f.mean));
    }
    let (coupled_values, coupled_mean) = features
        .iter()
        .find(|(n, _, _)| *n == spec.coupled_feature)
        .map(|(_, v, m)| (v.clone(), *m))
        .expect("validated");

    let spatial_sd = {
        let m = coupled_bases.iter().sum::<f64>() / n_s as f64;
        (coupled_bases.iter().map(|b| (b - m).powi(2)).sum::<f64>() / n_s as f64).sqrt()
    };
    let beta: Vec<f64> = (0..n_t)
        .map(|t| match spec.coupling {
            Coupling::Constant { beta } => beta,
            Coupling::SignFlip { beta, at } => {
                if t < at {
                    beta
                } else {
                    -beta
                }
            }
            Coupling::Sinusoid { amplitude, period } => {
                amplitude * (2.0 * std::f64::consts::PI * t as f64 / period).sin()
            }
            Coupling::TargetPc { rho } => {
                if spatial_sd == 0.0 {
                    0.0
                } else {
                    rho * spec.noise_scale / (spatial_sd * (1.0 - rho * rho).sqrt())
                }
            }
        })
        .collect();
    let expected_pc: Vec<f64> = beta
        .iter()
        .map(|&b| match spec.coupling {
            Coupling::TargetPc { rho } => rho,
            _ => {
                let signal = b * spatial_sd;
                let denom = (signal * signal + spec.noise_scale * spec.noise_scale).sqrt();
                if denom == 0.0 {
                    0.0
                } else {
                    signal / denom
                }
            }
        })
        .collect();

    let mut demand = Vec::with_capacity(n_s * n_t);
    for s in 0..n_s {
        let (phi, scale) = match &spec.planted_group {
            Some(g) if planted.contains(&s) => (g.noise_ar, spec.noise_scale * g.noise_scale_factor),
            _ => (spec.noise_ar, spec.noise_scale),
        };
        let innovation = (1.0 - phi * phi).sqrt();
        let mut e = scale * normal(&mut rng);
        for t in 0..n_t {
            if t > 0 {
                e = phi * e + innovation * scale * normal(&mut rng);
            }
            let seasonal = spec.seasonal_amplitude
                * (2.0 * std::f64::consts::PI * t as f64 / spec.seasonal_period).sin();
            let x = coupled_values[s * n_t + t] - coupled_mean;
            let mut v = spec.base_level + seasonal + beta[t] * x + e;
            if spec.clamp_nonnegative && v < 0.0 {
                v = 0.0;
            }
            demand.push(v);
        }
    }

    let stations = (0..n_s).map(|s| format!("S{s:03}")).collect();
    let grid = TimeGrid {
        start: spec.start,
        step_seconds: spec.step_hours * 3600,
        len: n_t,
    };
    let panel = Panel::new(
        stations,
        grid,
        demand,
        features.into_iter().map(|(n, v, _)| (n, v)).collect(),
        Provenance::Synthetic,
    )?;
    Ok((
        panel,
        GroundTruth {
            coupled_feature: spec.coupled_feature.clone(),
            beta,
            expected_pc,
            planted_stations: planted,
            seed: spec.seed,
        },
    ))
}
