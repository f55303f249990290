//! The teacher: checks a prediction block against the bounded-group-loss
//! formula and corrects it with the decoder when it fails.

use serde::{Deserialize, Serialize};

use super::{DynamicError, GroupAssignment, TrainConfig};
use crate::decoder::{decode, DecodeProblem, Target};
use crate::metrics::{mean, Axis};
use crate::stl::{evaluate, Formula, Metric, MetricAtom, Predicate, StlError, Trace};

/// Group losses of a step-major `horizon × stations` block, read either
/// as one step (the whole block) or one step per predicted timestep.
#[derive(Debug, Clone)]
pub struct GroupLossTrace<'a> {
    pred: &'a [f64],
    reference: &'a [f64],
    stations: usize,
    per_timestep: bool,
    groups: &'a [(String, Vec<usize>)],
}

impl<'a> GroupLossTrace<'a> {
    pub fn new(
        pred: &'a [f64],
        reference: &'a [f64],
        stations: usize,
        per_timestep: bool,
        groups: &'a [(String, Vec<usize>)],
    ) -> Result<Self, DynamicError> {
        if pred.len() != reference.len() || stations == 0 || pred.len() % stations != 0 {
            return Err(DynamicError::ShapeMismatch(format!(
                "prediction of {} and reference of {} values over {stations} stations",
                pred.len(),
                reference.len()
            )));
        }
        Ok(GroupLossTrace {
            pred,
            reference,
            stations,
            per_timestep,
            groups,
        })
    }

    fn steps(&self) -> usize {
        self.pred.len() / self.stations
    }

    /// Loss of `group` at trace step `t`.
    pub fn loss(&self, group: &[usize], t: usize) -> f64 {
        let rows = if self.per_timestep { t..t + 1 } else { 0..self.steps() };
        let mut sum = 0.0;
        let mut count = 0;
        for h in rows {
            for &s in group {
                let i = h * self.stations + s;
                sum += (self.pred[i] - self.reference[i]).powi(2);
                count += 1;
            }
        }
        sum / count as f64
    }
}

impl Trace for GroupLossTrace<'_> {
    fn len(&self) -> usize {
        if self.per_timestep {
            self.steps()
        } else {
            1
        }
    }

    fn value(&self, p: &Predicate, t: usize) -> Result<Option<f64>, StlError> {
        match p {
            Predicate::Metric(m) if m.metric == Metric::GroupLoss => {
                let name = &m.args[0];
                let Some((_, members)) = self.groups.iter().find(|(g, _)| g == name) else {
                    return Err(StlError::UnknownSignal(name.clone()));
                };
                Ok(Some(self.loss(members, t)))
            }
            Predicate::Metric(m) => Err(StlError::UnsupportedAtom(m.to_string())),
            Predicate::Signal(s) => Err(StlError::UnknownSignal(s.name.clone())),
        }
    }
}

/// `always[0, len-1] (gloss(a) <= zeta)` for every group, conjoined;
/// `None` without groups.
pub fn bgl_formula(groups: &[(String, Vec<usize>)], zeta: f64, len: usize) -> Option<Formula> {
    Formula::conjunction(groups.iter().map(|(name, _)| {
        Formula::always(
            0,
            len.saturating_sub(1),
            Formula::metric(MetricAtom::group_loss(Axis::Temporal, name, zeta)),
        )
    }))
}

/// Whole-block loss of every group.
pub fn group_losses(pred: &[f64], reference: &[f64], stations: usize, groups: &[(String, Vec<usize>)]) -> Vec<f64> {
    match GroupLossTrace::new(pred, reference, stations, false, groups) {
        Ok(trace) => groups.iter().map(|(_, m)| trace.loss(m, 0)).collect(),
        Err(_) => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TeacherStatus {
    /// The formula already held; the prediction is returned as is.
    Satisfied,
    Corrected { groups: Vec<String>, restarts: usize },
    /// The decoder did not converge; the prediction is returned as is and
    /// still violates the formula.
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutcome {
    pub corrected: Vec<f64>,
    pub status: TeacherStatus,
}

impl TeacherOutcome {
    pub fn changed(&self) -> bool {
        matches!(self.status, TeacherStatus::Corrected { .. })
    }
}

/// Correct one `horizon × stations` block (step-major) so every protected
/// group's loss against `reference` is at most `zeta`.
///
/// Violated groups get the equality `loss = zeta (1 - margin)` and the
/// block mean is held fixed. A group pushed over the bound by the
/// correction of another joins the violated set and the decode is rerun.
pub fn teacher_correct(
    pred: &[f64],
    reference: &[f64],
    stations: usize,
    groups: &GroupAssignment,
    config: &TrainConfig,
) -> Result<TeacherOutcome, DynamicError> {
    groups.validate()?;
    let named = groups.protected_groups();
    let trace = GroupLossTrace::new(pred, reference, stations, config.per_timestep, &named)?;
    let phi = bgl_formula(&named, config.zeta, trace.len()).expect("validated groups");
    if evaluate(&phi, &trace, 0)? {
        return Ok(TeacherOutcome {
            corrected: pred.to_vec(),
            status: TeacherStatus::Satisfied,
        });
    }

    let steps = pred.len() / stations;
    let mut out = pred.to_vec();
    let mut fixed: Vec<String> = Vec::new();
    let mut restarts = 0;
    let chunks: Vec<(usize, usize)> = if config.per_timestep {
        (0..steps).map(|h| (h * stations, (h + 1) * stations)).collect()
    } else {
        vec![(0, pred.len())]
    };
    for (lo, hi) in chunks {
        let y0 = &pred[lo..hi];
        let r = &reference[lo..hi];
        let rows = (hi - lo) / stations;
        let cells = |members: &[usize]| -> Vec<usize> {
            (0..rows)
                .flat_map(|h| members.iter().map(move |&s| h * stations + s))
                .collect()
        };
        let loss = |y: &[f64], c: &[usize]| c.iter().map(|&i| (y[i] - r[i]).powi(2)).sum::<f64>() / c.len() as f64;
        let group_cells: Vec<Vec<usize>> = named.iter().map(|(_, m)| cells(m)).collect();
        let mut active: Vec<bool> = group_cells.iter().map(|c| loss(y0, c) > config.zeta).collect();
        if !active.contains(&true) {
            continue;
        }
        let y1 = loop {
            let mut targets: Vec<Target> = group_cells
                .iter()
                .zip(&active)
                .filter(|(_, &on)| on)
                .map(|(c, _)| Target::GroupLoss {
                    members: c.clone(),
                    reference: r.to_vec(),
                    value: config.zeta * (1.0 - config.margin),
                })
                .collect();
            targets.push(Target::Mean(mean(y0)));
            let problem = DecodeProblem {
                y0: y0.to_vec(),
                targets,
            };
            let result = match decode(&problem, &config.solver) {
                Ok(r) => r,
                Err(e) => {
                    return Ok(TeacherOutcome {
                        corrected: pred.to_vec(),
                        status: TeacherStatus::Failed { reason: e.to_string() },
                    })
                }
            };
            restarts += result.restarts;
            let mut grew = false;
            for (on, c) in active.iter_mut().zip(&group_cells) {
                if !*on && loss(&result.y1, c) > config.zeta {
                    *on = true;
                    grew = true;
                }
            }
            if !grew {
                break result.y1;
            }
        };
        out[lo..hi].copy_from_slice(&y1);
        for ((name, _), on) in named.iter().zip(&active) {
            if *on && !fixed.contains(name) {
                fixed.push(name.clone());
            }
        }
    }

    let check = GroupLossTrace::new(&out, reference, stations, config.per_timestep, &named)?;
    if !evaluate(&phi, &check, 0)? {
        return Ok(TeacherOutcome {
            corrected: pred.to_vec(),
            status: TeacherStatus::Failed {
                reason: "corrected block still violates the formula".into(),
            },
        });
    }
    Ok(TeacherOutcome {
        corrected: out,
        status: TeacherStatus::Corrected { groups: fixed, restarts },
    })
}
