//! Minibatch gradient descent on `L(σ̂, σ) + γ L(σ̂, σ')`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{teacher_correct, DynamicError, GroupAssignment, Predictor, Series, TeacherStatus, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Supervised MSE against the ground truth.
    pub loss: f64,
    /// MSE against the teacher's correction (zero when `gamma` is zero).
    pub distill_loss: f64,
    /// Supervised MSE over protected stations.
    pub mse_pa: f64,
    pub corrected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,distill_loss,mse_pa\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.distill_loss, e.mse_pa));
        }
        out
    }
}

/// One training example: a history window, the true block and, when the
/// teacher was consulted, its correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub history: Vec<f64>,
    pub truth: Vec<f64>,
    pub teacher: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    /// `mean (σ̂-σ)²`
    pub supervised: f64,
    /// `mean (σ̂-σ')²` over samples with a correction, averaged over all cells.
    pub distill: f64,
}

impl BatchLoss {
    pub fn total(&self, gamma: f64) -> f64 {
        self.supervised + gamma * self.distill
    }
}

/// Composite loss of a batch; with `grad`, also adds its gradient with
/// respect to the student's parameters (corrections held fixed).
pub fn batch_loss<P: Predictor + ?Sized>(
    student: &P,
    batch: &[Sample],
    stations: usize,
    gamma: f64,
    mut grad: Option<&mut [f64]>,
) -> BatchLoss {
    let cells = batch.iter().map(|s| s.truth.len()).sum::<usize>().max(1) as f64;
    let mut out = BatchLoss::default();
    for sample in batch {
        let p = student.forward(&sample.history, stations);
        let mut g = vec![0.0; p.len()];
        for i in 0..p.len() {
            let e = p[i] - sample.truth[i];
            out.supervised += e * e;
            g[i] = 2.0 * e / cells;
            if let Some(t) = &sample.teacher {
                let d = p[i] - t[i];
                out.distill += d * d;
                g[i] += gamma * 2.0 * d / cells;
            }
        }
        if let Some(grad) = grad.as_deref_mut() {
            student.backward(&sample.history, stations, &g, grad);
        }
    }
    out.supervised /= cells;
    out.distill /= cells;
    out
}

/// Train `student` on a normalized series.
///
/// Every epoch visits all forecast origins in a seeded shuffle. For each
/// origin the teacher corrects the prediction against the true block, and
/// each minibatch takes one gradient step on [`batch_loss`]. With
/// `gamma == 0` the teacher is not consulted.
pub fn train<P: Predictor>(
    mut student: P,
    series: &Series,
    groups: &GroupAssignment,
    config: &TrainConfig,
) -> Result<(P, TrainLog), DynamicError> {
    config.validate()?;
    groups.validate()?;
    if groups.labels.len() != series.n_stations {
        return Err(DynamicError::ShapeMismatch(format!(
            "{} group labels for {} stations",
            groups.labels.len(),
            series.n_stations
        )));
    }
    if student.lag() != config.lag || student.horizon() != config.horizon {
        return Err(DynamicError::InvalidConfig("student shape differs from the config".into()));
    }
    let (lag, m, n_s) = (config.lag, config.horizon, series.n_stations);
    if series.n_steps < lag + m {
        return Err(DynamicError::InsufficientHistory {
            needed: lag + m,
            got: series.n_steps,
        });
    }
    let mut origins: Vec<usize> = series
        .origins(lag, m, 1)
        .into_iter()
        .filter(|&t| {
            series.history(t, lag).iter().all(|v| v.is_finite()) && series.block(t, m).iter().all(|v| v.is_finite())
        })
        .collect();
    if origins.is_empty() {
        return Err(DynamicError::InsufficientHistory {
            needed: lag + m,
            got: 0,
        });
    }
    let protected = groups.protected_stations();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut grad = vec![0.0; student.params().len()];

    for epoch in 0..config.epochs {
        origins.shuffle(&mut rng);
        let (mut sup, mut distill, mut pa) = (0.0, 0.0, 0.0);
        let (mut corrected, mut failed) = (0, 0);
        for chunk in origins.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &t in chunk {
                let history = series.history(t, lag);
                let truth = series.block(t, m);
                let p = student.forward(&history, n_s);
                for h in 0..m {
                    for &s in &protected {
                        pa += (p[h * n_s + s] - truth[h * n_s + s]).powi(2);
                    }
                }
                let teacher = if config.gamma > 0.0 {
                    let out = teacher_correct(&p, &truth, n_s, groups, config)?;
                    match out.status {
                        TeacherStatus::Corrected { .. } => corrected += 1,
                        TeacherStatus::Failed { .. } => failed += 1,
                        TeacherStatus::Satisfied => {}
                    }
                    Some(out.corrected)
                } else {
                    None
                };
                batch.push(Sample { history, truth, teacher });
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_loss(&student, &batch, n_s, config.gamma, Some(&mut grad));
            sup += loss.supervised * chunk.len() as f64;
            distill += loss.distill * chunk.len() as f64;
            student.step(&grad, config.learning_rate);
        }
        let samples = origins.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: sup / samples,
            distill_loss: distill / samples,
            mse_pa: pa / (samples * (m * protected.len()) as f64),
            corrected,
            failed,
        });
    }
    Ok((student, log))
}
