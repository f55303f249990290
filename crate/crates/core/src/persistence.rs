//! Persistence testing: do predictions stay fair after an adjusted panel
//! stops being enforced?
//!
//! Both panels are cut into equal segments of `observation + induction`
//! steps. Per trial, a random 80% of segments trains one predictor per
//! panel (observation phase → induction phase); each predictor then
//! forecasts the induction phase of one held-out segment from its own
//! panel, and the correlation of each forecast with the protected
//! attribute is compared.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, Panel};
use crate::dynamic_guard::{batch_loss, Normalizer, Predictor, Sample, Series};
use crate::metrics::pearson;
use crate::static_guard::improvement;

#[derive(Debug, Error)]
pub enum PtError {
    #[error("panel has {steps} steps, persistence testing needs at least two segments of {segment}")]
    TooShortPanel { steps: usize, segment: usize },
    #[error("attribute {0:?} is constant over the evaluation block")]
    DegenerateAttribute(String),
    #[error("panels differ in shape")]
    ShapeMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtConfig {
    pub segment_len: usize,
    pub observation: usize,
    pub induction: usize,
    /// Share of segments used to build the predictors; the rest are
    /// candidates for evaluation.
    pub build_fraction: f64,
    pub trials: usize,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PtConfig {
    fn default() -> Self {
        PtConfig {
            segment_len: 40,
            observation: 30,
            induction: 10,
            build_fraction: 0.8,
            trials: 5,
            train_fraction: 0.8,
            test_fraction: 0.15,
            validation_fraction: 0.05,
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl PtConfig {
    pub fn validate(&self) -> Result<(), PtError> {
        let bad = |m: &str| Err(PtError::InvalidConfig(m.to_string()));
        if self.observation == 0 || self.induction == 0 || self.observation + self.induction != self.segment_len {
            return bad("observation + induction must equal the segment length, both positive");
        }
        if !(self.build_fraction > 0.0 && self.build_fraction < 1.0) {
            return bad("build fraction must lie in (0, 1)");
        }
        let fractions = [self.train_fraction, self.test_fraction, self.validation_fraction];
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("train, test and validation fractions must be non-negative and sum to 1");
        }
        if self.train_fraction == 0.0 {
            return bad("train fraction must be positive");
        }
        if self.trials == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("trials, batch size and learning rate must be positive");
        }
        Ok(())
    }
}

/// Mean squared error of a predictor on the build splits, in normalized
/// units. A split with no segments reports `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub train_mse: f64,
    pub test_mse: Option<f64>,
    pub validation_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// 1-based, as in the report table.
    pub trial: usize,
    pub seed: u64,
    pub eval_segment: usize,
    /// PC of the unadjusted predictor's forecast with the attribute.
    pub unadjusted: f64,
    /// PC of the adjusted predictor's forecast with the attribute.
    pub fairguard: f64,
    pub improvement: f64,
    pub fit_unadjusted: FitMetrics,
    pub fit_fairguard: FitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtReport {
    pub attribute: String,
    pub segments: usize,
    /// Trailing steps that do not fill a segment.
    pub discarded_steps: usize,
    pub trials: Vec<TrialResult>,
}

impl PtReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,unadjusted,fairguard,improvement\n");
        for t in &self.trials {
            out.push_str(&format!("{},{},{},{}\n", t.trial, t.unadjusted, t.fairguard, t.improvement));
        }
        out
    }

    /// Trials where the adjusted forecast is less correlated.
    pub fn improved(&self) -> usize {
        self.trials.iter().filter(|t| t.fairguard.abs() < t.unadjusted.abs()).count()
    }

    pub fn mean_improvement(&self) -> f64 {
        self.trials.iter().map(|t| t.improvement).sum::<f64>() / self.trials.len().max(1) as f64
    }
}

/// Split `n` items by fractions, rounding the first parts and giving the
/// remainder to the last.
fn split_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut used = 0;
    for f in &fractions[..fractions.len() - 1] {
        let k = ((n as f64 * f).round() as usize).min(n - used);
        out.push(k);
        used += k;
    }
    out.push(n - used);
    out
}

/// Station-major concatenation of the given segments.
fn gather_segments(series: &Series, starts: &[usize], len: usize) -> Series {
    let mut values = Vec::with_capacity(series.n_stations * starts.len() * len);
    for s in 0..series.n_stations {
        for &t in starts {
            values.extend_from_slice(&series.values[s * series.n_steps + t..s * series.n_steps + t + len]);
        }
    }
    Series {
        n_stations: series.n_stations,
        n_steps: starts.len() * len,
        values,
    }
}

struct Fitted<P> {
    model: P,
    normalizer: Normalizer,
    fit: FitMetrics,
}

fn fit_one<P: Predictor>(
    series: &Series,
    splits: [&[usize]; 3],
    mut model: P,
    config: &PtConfig,
    rng: &mut ChaCha8Rng,
) -> Fitted<P> {
    let (obs, ind, seg) = (config.observation, config.induction, config.segment_len);
    let normalizer = Normalizer::fit(&gather_segments(series, splits[0], seg), usize::MAX);
    let z = normalizer.apply(series);
    let samples = |starts: &[usize]| -> Vec<Sample> {
        starts
            .iter()
            .map(|&t| Sample {
                history: z.history(t + obs, obs),
                truth: z.block(t + obs, ind),
                teacher: None,
            })
            .collect()
    };
    let mut train = samples(splits[0]);
    let mut grad = vec![0.0; model.params().len()];
    for _ in 0..config.epochs {
        train.shuffle(rng);
        for batch in train.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            batch_loss(&model, batch, z.n_stations, 0.0, Some(&mut grad));
            model.step(&grad, config.learning_rate);
        }
    }
    let mse = |starts: &[usize]| {
        (!starts.is_empty()).then(|| batch_loss(&model, &samples(starts), z.n_stations, 0.0, None).supervised)
    };
    let fit = FitMetrics {
        train_mse: mse(splits[0]).unwrap_or(0.0),
        test_mse: mse(splits[1]),
        validation_mse: mse(splits[2]),
    };
    Fitted {
        model,
        normalizer,
        fit,
    }
}

impl<P: Predictor> Fitted<P> {
    /// Induction-phase forecast of the segment at `start`, original units.
    fn forecast(&self, series: &Series, start: usize, config: &PtConfig) -> Vec<f64> {
        let z = self.normalizer.apply(series);
        let t = start + config.observation;
        self.normalizer
            .invert_block(&self.model.forward(&z.history(t, config.observation), series.n_stations))
    }
}

/// Run every trial of a persistence test of `y1` (adjusted) against `y0`.
///
/// `factory(lag, horizon, seed)` builds an untrained predictor; both
/// predictors of a trial start from the same seed. Trial seeds are drawn
/// from `config.seed`, so reports are reproducible bit for bit.
pub fn run_pt<P, F>(y0: &Panel, y1: &Panel, attribute: &str, factory: F, config: &PtConfig) -> Result<PtReport, PtError>
where
    P: Predictor,
    F: Fn(usize, usize, u64) -> P + Sync,
{
    config.validate()?;
    if !y0.same_shape(y1) {
        return Err(PtError::ShapeMismatch);
    }
    let seg = config.segment_len;
    let n_t = y0.n_steps();
    let segments = n_t / seg;
    if segments < 2 {
        return Err(PtError::TooShortPanel {
            steps: n_t,
            segment: seg,
        });
    }
    let attr = y0.channel(attribute)?;
    let (s0, s1) = (Series::demand(y0), Series::demand(y1));
    let x = Series::new(y0.n_stations(), n_t, attr.to_vec()).expect("panel shape");

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<u64> = (0..config.trials).map(|_| master.random()).collect();
    let trials = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| -> Result<TrialResult, PtError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..segments).collect();
            order.shuffle(&mut rng);
            let n_build = ((segments as f64 * config.build_fraction).round() as usize).clamp(1, segments - 1);
            let (build, eval) = order.split_at(n_build);
            let counts = split_counts(
                build.len(),
                &[config.train_fraction, config.test_fraction, config.validation_fraction],
            );
            let starts: Vec<usize> = build.iter().map(|k| k * seg).collect();
            let (train, rest) = starts.split_at(counts[0].max(1).min(starts.len()));
            let (test, validation) = rest.split_at(counts[1].min(rest.len()));
            let eval_segment = *eval.choose(&mut rng).expect("at least one eval segment");
            let start = eval_segment * seg;

            let model_seed: u64 = rng.random();
            let mut fit_rng = rng.clone();
            let f0 = fit_one(&s0, [train, test, validation], factory(config.observation, config.induction, model_seed), config, &mut fit_rng);
            let mut fit_rng = rng.clone();
            let f1 = fit_one(&s1, [train, test, validation], factory(config.observation, config.induction, model_seed), config, &mut fit_rng);

            let xs = x.block(start + config.observation, config.induction);
            let pc = |pred: &[f64]| pearson(&xs, pred).map_err(|_| PtError::DegenerateAttribute(attribute.to_string()));
            if xs.iter().all(|v| *v == xs[0]) {
                return Err(PtError::DegenerateAttribute(attribute.to_string()));
            }
            let unadjusted = pc(&f0.forecast(&s0, start, config))?;
            let fairguard = pc(&f1.forecast(&s1, start, config))?;
            Ok(TrialResult {
                trial: i + 1,
                seed,
                eval_segment,
                unadjusted,
                fairguard,
                improvement: improvement(unadjusted, fairguard),
                fit_unadjusted: f0.fit,
                fit_fairguard: f1.fit,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PtReport {
        attribute: attribute.to_string(),
        segments,
        discarded_steps: n_t - segments * seg,
        trials,
    })
}
