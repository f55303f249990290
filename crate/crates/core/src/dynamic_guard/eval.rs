//! Raw and guarded prediction, and the MSE / MSE(PA) / BGL% table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    group_losses, teacher_correct, DynamicError, GroupAssignment, Predictor, Series, TeacherStatus, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Raw,
    Guarded,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Raw => "raw",
            Mode::Guarded => "guarded",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Step-major `horizon × stations`, in the series' units.
    pub values: Vec<f64>,
    /// Teacher verdict in guarded mode.
    pub teacher: Option<TeacherStatus>,
}

/// Forecast the `horizon` steps after the end of `history`.
///
/// Guarded mode corrects the forecast against the last `horizon` realized
/// steps of `history`, the only reference available at deployment.
pub fn predict<P: Predictor + ?Sized>(
    student: &P,
    history: &Series,
    mode: Mode,
    groups: &GroupAssignment,
    config: &TrainConfig,
) -> Result<Prediction, DynamicError> {
    let (lag, m) = (student.lag(), student.horizon());
    let needed = match mode {
        Mode::Raw => lag,
        Mode::Guarded => lag.max(m),
    };
    if history.n_steps < needed {
        return Err(DynamicError::InsufficientHistory {
            needed,
            got: history.n_steps,
        });
    }
    let t = history.n_steps;
    let raw = student.forward(&history.history(t, lag), history.n_stations);
    match mode {
        Mode::Raw => Ok(Prediction {
            values: raw,
            teacher: None,
        }),
        Mode::Guarded => {
            let reference = history.block(t - m, m);
            let out = teacher_correct(&raw, &reference, history.n_stations, groups, config)?;
            Ok(Prediction {
                values: out.corrected,
                teacher: Some(out.status),
            })
        }
    }
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub mode: Mode,
    pub mse: f64,
    /// MSE over protected stations.
    pub mse_pa: f64,
    /// Percentage of protected stations whose MSE is below the overall MSE.
    pub bgl_pct: f64,
    pub blocks: usize,
    pub corrected: usize,
    pub failed: usize,
    /// Percentage of blocks the teacher passed or corrected whose output
    /// meets the bound against the teacher's reference.
    pub guard_satisfied_pct: f64,
}

struct Block {
    pred: Vec<f64>,
    truth: Vec<f64>,
    status: Option<TeacherStatus>,
    bound_holds: bool,
}

/// Score each model in each mode on non-overlapping forecast blocks of a
/// normalized test series.
pub fn evaluate_models<P: Predictor + Sync + ?Sized>(
    models: &[(&str, &P)],
    test: &Series,
    groups: &GroupAssignment,
    config: &TrainConfig,
    modes: &[Mode],
) -> Result<Vec<EvalRow>, DynamicError> {
    groups.validate()?;
    if groups.labels.len() != test.n_stations {
        return Err(DynamicError::ShapeMismatch(format!(
            "{} group labels for {} stations",
            groups.labels.len(),
            test.n_stations
        )));
    }
    let protected = groups.protected_stations();
    let named = groups.protected_groups();
    let n_s = test.n_stations;
    let mut rows = Vec::new();
    for &(name, model) in models {
        let (lag, m) = (model.lag(), model.horizon());
        let start = lag.max(m);
        if test.n_steps < start + m {
            return Err(DynamicError::InsufficientHistory {
                needed: start + m,
                got: test.n_steps,
            });
        }
        let origins: Vec<usize> = (start..=test.n_steps - m).step_by(m).collect();
        for &mode in modes {
            let blocks: Vec<Block> = origins
                .par_iter()
                .map(|&t| -> Result<Block, DynamicError> {
                    let p = predict(model, &test.slice(0, t), mode, groups, config)?;
                    let bound_holds = match mode {
                        Mode::Raw => true,
                        Mode::Guarded => {
                            let reference = test.block(t - m, m);
                            group_losses(&p.values, &reference, n_s, &named)
                                .iter()
                                .all(|l| *l <= config.zeta + crate::stl::DEFAULT_TOLERANCE)
                        }
                    };
                    Ok(Block {
                        pred: p.values,
                        truth: test.block(t, m),
                        status: p.teacher,
                        bound_holds,
                    })
                })
                .collect::<Result<_, _>>()?;

            let mut total = 0.0;
            let mut cells = 0usize;
            let mut per_station = vec![(0.0, 0usize); n_s];
            for b in &blocks {
                for (i, (p, y)) in b.pred.iter().zip(&b.truth).enumerate() {
                    if !y.is_finite() {
                        continue;
                    }
                    let e = (p - y).powi(2);
                    total += e;
                    cells += 1;
                    per_station[i % n_s].0 += e;
                    per_station[i % n_s].1 += 1;
                }
            }
            let mse = total / cells.max(1) as f64;
            let (pa_sum, pa_cells) = protected
                .iter()
                .fold((0.0, 0), |(s, c), &i| (s + per_station[i].0, c + per_station[i].1));
            let below = protected
                .iter()
                .filter(|&&i| per_station[i].1 > 0 && per_station[i].0 / (per_station[i].1 as f64) < mse)
                .count();
            let count = |f: fn(&TeacherStatus) -> bool| blocks.iter().filter(|b| b.status.as_ref().is_some_and(f)).count();
            let passed: Vec<&Block> = blocks
                .iter()
                .filter(|b| !matches!(b.status, Some(TeacherStatus::Failed { .. })))
                .collect();
            rows.push(EvalRow {
                model: name.to_string(),
                mode,
                mse,
                mse_pa: pa_sum / pa_cells.max(1) as f64,
                bgl_pct: if mse == 0.0 && pa_sum == 0.0 {
                    100.0
                } else {
                    below as f64 / protected.len() as f64 * 100.0
                },
                blocks: blocks.len(),
                corrected: count(|s| matches!(s, TeacherStatus::Corrected { .. })),
                failed: count(|s| matches!(s, TeacherStatus::Failed { .. })),
                guard_satisfied_pct: if passed.is_empty() {
                    100.0
                } else {
                    passed.iter().filter(|b| b.bound_holds).count() as f64 / passed.len() as f64 * 100.0
                },
            });
        }
    }
    Ok(rows)
}
