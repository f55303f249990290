//! Time series windows, normalization and the reference autoregressive
//! student.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DynamicError, GroupAssignment};
use crate::dataio::Panel;

/// A stations × steps matrix, station-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub n_stations: usize,
    pub n_steps: usize,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(n_stations: usize, n_steps: usize, values: Vec<f64>) -> Result<Self, DynamicError> {
        if values.len() != n_stations * n_steps {
            return Err(DynamicError::ShapeMismatch(format!(
                "{} values for {n_stations} x {n_steps}",
                values.len()
            )));
        }
        Ok(Series {
            n_stations,
            n_steps,
            values,
        })
    }

    pub fn demand(panel: &Panel) -> Self {
        Series {
            n_stations: panel.n_stations(),
            n_steps: panel.n_steps(),
            values: panel.demand().to_vec(),
        }
    }

    pub fn at(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.n_steps + t]
    }

    /// Steps `[start, end)` of every station.
    pub fn slice(&self, start: usize, end: usize) -> Series {
        let mut values = Vec::with_capacity(self.n_stations * (end - start));
        for s in 0..self.n_stations {
            values.extend_from_slice(&self.values[s * self.n_steps + start..s * self.n_steps + end]);
        }
        Series {
            n_stations: self.n_stations,
            n_steps: end - start,
            values,
        }
    }

    /// Steps `[t - lag, t)`, station-major (`s * lag + j`, oldest first).
    pub fn history(&self, t: usize, lag: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_stations * lag);
        for s in 0..self.n_stations {
            out.extend_from_slice(&self.values[s * self.n_steps + t - lag..s * self.n_steps + t]);
        }
        out
    }

    /// Steps `[t, t + horizon)`, step-major (`h * stations + s`).
    pub fn block(&self, t: usize, horizon: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_stations * horizon);
        for h in 0..horizon {
            for s in 0..self.n_stations {
                out.push(self.at(s, t + h));
            }
        }
        out
    }

    /// Forecast origins `t` with a full history and target, every `stride`
    /// steps.
    pub fn origins(&self, lag: usize, horizon: usize, stride: usize) -> Vec<usize> {
        if self.n_steps < lag + horizon {
            return Vec::new();
        }
        (lag..=self.n_steps - horizon).step_by(stride.max(1)).collect()
    }
}

/// Per-station z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit on the first `upto` steps; missing cells are skipped and a
    /// constant station gets unit scale.
    pub fn fit(series: &Series, upto: usize) -> Self {
        let upto = upto.min(series.n_steps);
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for s in 0..series.n_stations {
            let row: Vec<f64> = (0..upto).map(|t| series.at(s, t)).filter(|v| v.is_finite()).collect();
            let n = row.len().max(1) as f64;
            let m = row.iter().sum::<f64>() / n;
            let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            mean.push(m);
            std.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Normalizer { mean, std }
    }

    pub fn apply(&self, series: &Series) -> Series {
        let mut out = series.clone();
        for s in 0..series.n_stations {
            for v in &mut out.values[s * series.n_steps..(s + 1) * series.n_steps] {
                *v = (*v - self.mean[s]) / self.std[s];
            }
        }
        out
    }

    /// Undo the z-score on a step-major block.
    pub fn invert_block(&self, block: &[f64]) -> Vec<f64> {
        let n_s = self.mean.len();
        block
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % n_s] + self.mean[i % n_s])
            .collect()
    }
}

/// A trainable multi-step forecaster over station vectors.
pub trait Predictor {
    fn lag(&self) -> usize;
    fn horizon(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// `history` is station-major `stations × lag`; the prediction is
    /// step-major `horizon × stations`.
    fn forward(&self, history: &[f64], stations: usize) -> Vec<f64>;

    /// Add `dL/dθ` to `grad` given `dL/dσ̂` of one forward pass.
    fn backward(&self, history: &[f64], stations: usize, grad_out: &[f64], grad: &mut [f64]);

    fn step(&mut self, grad: &[f64], learning_rate: f64) {
        for (p, g) in self.params_mut().iter_mut().zip(grad) {
            *p -= learning_rate * g;
        }
    }
}

/// Linear map from a station's last `lag` values to its next `horizon`
/// values. Weights are shared by all stations:
/// `σ̂[h, s] = b[h] + Σ_j W[h, j] x[s, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArPredictor {
    lag: usize,
    horizon: usize,
    /// `W` row-major (`horizon × lag`), then `b`.
    params: Vec<f64>,
}

impl ArPredictor {
    /// Small Gaussian weights drawn from `seed`, zero bias.
    pub fn new(lag: usize, horizon: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, 0.01).expect("valid sd");
        let mut params: Vec<f64> = (0..lag * horizon).map(|_| init.sample(&mut rng)).collect();
        params.extend(std::iter::repeat_n(0.0, horizon));
        ArPredictor { lag, horizon, params }
    }

    pub fn from_params(lag: usize, horizon: usize, params: Vec<f64>) -> Result<Self, DynamicError> {
        if params.len() != horizon * (lag + 1) {
            return Err(DynamicError::ShapeMismatch(format!(
                "{} parameters for lag {lag}, horizon {horizon}",
                params.len()
            )));
        }
        Ok(ArPredictor { lag, horizon, params })
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.lag * self.horizon]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.lag * self.horizon..]
    }
}

impl Predictor for ArPredictor {
    fn lag(&self) -> usize {
        self.lag
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, history: &[f64], stations: usize) -> Vec<f64> {
        let (n, m) = (self.lag, self.horizon);
        let (w, b) = self.params.split_at(n * m);
        let mut out = vec![0.0; m * stations];
        for h in 0..m {
            let row = &w[h * n..(h + 1) * n];
            for s in 0..stations {
                let x = &history[s * n..(s + 1) * n];
                out[h * stations + s] = b[h] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        out
    }

    fn backward(&self, history: &[f64], stations: usize, grad_out: &[f64], grad: &mut [f64]) {
        let (n, m) = (self.lag, self.horizon);
        let (gw, gb) = grad.split_at_mut(n * m);
        for h in 0..m {
            for s in 0..stations {
                let g = grad_out[h * stations + s];
                if g == 0.0 {
                    continue;
                }
                gb[h] += g;
                let x = &history[s * n..(s + 1) * n];
                for (acc, v) in gw[h * n..(h + 1) * n].iter_mut().zip(x) {
                    *acc += g * v;
                }
            }
        }
    }
}

pub const MODEL_FORMAT: &str = "fairguard-ar";
pub const MODEL_VERSION: u32 = 1;

/// Serialized student: shape header, row-major weights, bias, the
/// normalization it was trained under and its protected groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub lag: usize,
    pub horizon: usize,
    /// `[horizon, lag]`
    pub weight_shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub normalizer: Normalizer,
    pub groups: GroupAssignment,
    /// Free-form provenance line of the run that wrote the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<String>,
}

impl ModelFile {
    pub fn new(model: &ArPredictor, normalizer: Normalizer, groups: GroupAssignment) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            lag: model.lag,
            horizon: model.horizon,
            weight_shape: [model.horizon, model.lag],
            weights: model.weights().to_vec(),
            bias: model.bias().to_vec(),
            normalizer,
            groups,
            meta: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, DynamicError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(DynamicError::InvalidConfig(format!(
                "unsupported model {} v{}",
                file.format, file.version
            )));
        }
        if file.weight_shape != [file.horizon, file.lag]
            || file.weights.len() != file.horizon * file.lag
            || file.bias.len() != file.horizon
            || file.normalizer.mean.len() != file.groups.labels.len()
            || file.normalizer.std.len() != file.groups.labels.len()
        {
            return Err(DynamicError::ShapeMismatch("model file arrays disagree with its header".into()));
        }
        Ok(file)
    }

    pub fn model(&self) -> ArPredictor {
        let mut params = self.weights.clone();
        params.extend_from_slice(&self.bias);
        ArPredictor::from_params(self.lag, self.horizon, params).expect("checked on load")
    }
}
