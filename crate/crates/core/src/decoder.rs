//! Fairness atoms compiled into square residual systems.
//!
//! Each target contributes one residual row; the system is padded with zero
//! rows up to the length of the state vector and solved by the dogleg
//! kernel starting from the original states, so the adjusted vector stays
//! close to them.
//!
//! Mean, std and group-loss rows are divided by `max(1, |target|)`, which
//! turns the solver's residual tolerance into a relative one for large
//! magnitudes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{mean, std_dev};
use crate::trsolve::{solve, Matrix, ResidualSystem, SolveOutcome, SolveStatus, SolverConfig, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("attribute vector is constant")]
    ConstantAttribute,
    #[error("{atoms} constraint(s) need at least {needed} points, got {n}")]
    TooFewPoints { n: usize, atoms: usize, needed: usize },
    #[error("vector of length {got} where {expected} was expected")]
    LengthMismatch { expected: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("group-loss target has no members in range")]
    EmptyGroup,
    #[error("solver stopped ({status:?}) with residual norm {residual_norm:e}")]
    NoConvergence {
        status: SolveStatus,
        residual_norm: f64,
        best: Vec<f64>,
        iterations: usize,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// One equality the adjusted vector must meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// `PC(attribute, y) = c`
    Correlation { attribute: Vec<f64>, c: f64 },
    /// `mean(y) = value`
    Mean(f64),
    /// `std(y) = value` (population)
    Std(f64),
    /// `mean_{i in members} (y_i - reference_i)^2 = value`
    GroupLoss {
        members: Vec<usize>,
        reference: Vec<f64>,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeProblem {
    pub y0: Vec<f64>,
    pub targets: Vec<Target>,
}

impl DecodeProblem {
    /// Drive `PC(x, y)` to `c` while keeping the mean and std of `y0`.
    pub fn decorrelate(x: &[f64], y0: &[f64], c: f64) -> Self {
        DecodeProblem {
            y0: y0.to_vec(),
            targets: vec![
                Target::Correlation {
                    attribute: x.to_vec(),
                    c,
                },
                Target::Mean(mean(y0)),
                Target::Std(std_dev(y0)),
            ],
        }
    }
}

enum Row {
    Pc { xc: Vec<f64>, norm_x: f64, c: f64 },
    Mean { value: f64, scale: f64 },
    Std { value: f64, scale: f64 },
    Loss { members: Vec<usize>, reference: Vec<f64>, value: f64, scale: f64 },
}

/// The compiled residual system of a [`DecodeProblem`].
pub struct DecodeSystem {
    n: usize,
    rows: Vec<Row>,
}

fn scale(v: f64) -> f64 {
    v.abs().max(1.0)
}

pub fn compile(problem: &DecodeProblem) -> Result<DecodeSystem, DecodeError> {
    let n = problem.y0.len();
    let atoms = problem.targets.len();
    if problem.y0.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite);
    }
    let needs_spread = problem
        .targets
        .iter()
        .any(|t| matches!(t, Target::Correlation { .. } | Target::Std(_)));
    let needed = atoms.max(if needs_spread { 3 } else { 1 });
    if n < needed {
        return Err(DecodeError::TooFewPoints { n, atoms, needed });
    }
    let mut rows = Vec::with_capacity(atoms);
    for t in &problem.targets {
        rows.push(match t {
            Target::Correlation { attribute, c } => {
                if attribute.len() != n {
                    return Err(DecodeError::LengthMismatch {
                        expected: n,
                        got: attribute.len(),
                    });
                }
                if attribute.iter().any(|v| !v.is_finite()) || !c.is_finite() {
                    return Err(DecodeError::NonFinite);
                }
                let m = mean(attribute);
                let xc: Vec<f64> = attribute.iter().map(|v| v - m).collect();
                let norm_x = xc.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm_x > 0.0) {
                    return Err(DecodeError::ConstantAttribute);
                }
                Row::Pc { xc, norm_x, c: *c }
            }
            Target::Mean(v) => Row::Mean {
                value: *v,
                scale: scale(*v),
            },
            Target::Std(v) => Row::Std {
                value: *v,
                scale: scale(*v),
            },
            Target::GroupLoss {
                members,
                reference,
                value,
            } => {
                if reference.len() != n {
                    return Err(DecodeError::LengthMismatch {
                        expected: n,
                        got: reference.len(),
                    });
                }
                if members.is_empty() || members.iter().any(|&i| i >= n) {
                    return Err(DecodeError::EmptyGroup);
                }
                Row::Loss {
                    members: members.clone(),
                    reference: reference.clone(),
                    value: *value,
                    scale: scale(*value),
                }
            }
        });
    }
    Ok(DecodeSystem { n, rows })
}

impl DecodeSystem {
    /// Unscaled `metric(y) - target` per atom.
    pub fn atom_residuals(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.residuals(y, &mut out);
        self.rows
            .iter()
            .zip(out)
            .map(|(row, r)| match row {
                Row::Pc { .. } => r,
                Row::Mean { scale, .. } | Row::Std { scale, .. } | Row::Loss { scale, .. } => r * scale,
            })
            .collect()
    }
}

struct Centered {
    yc: Vec<f64>,
    norm_y: f64,
}

fn center(y: &[f64]) -> Centered {
    let m = mean(y);
    let yc: Vec<f64> = y.iter().map(|v| v - m).collect();
    let norm_y = yc.iter().map(|v| v * v).sum::<f64>().sqrt();
    Centered { yc, norm_y }
}

impl ResidualSystem for DecodeSystem {
    fn dim(&self) -> usize {
        self.n
    }

    fn residuals(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let c = center(y);
        for (row, o) in self.rows.iter().zip(out.iter_mut()) {
            *o = match row {
                Row::Pc { xc, norm_x, c: target } => {
                    let r = if c.norm_y > 0.0 {
                        xc.iter().zip(&c.yc).map(|(a, b)| a * b).sum::<f64>() / (norm_x * c.norm_y)
                    } else {
                        0.0
                    };
                    r - target
                }
                Row::Mean { value, scale } => (mean(y) - value) / scale,
                Row::Std { value, scale } => (c.norm_y / (self.n as f64).sqrt() - value) / scale,
                Row::Loss {
                    members,
                    reference,
                    value,
                    scale,
                } => {
                    let l = members.iter().map(|&i| (y[i] - reference[i]).powi(2)).sum::<f64>()
                        / members.len() as f64;
                    (l - value) / scale
                }
            };
        }
    }

    fn jacobian(&self, y: &[f64], out: &mut Matrix) {
        out.fill(0.0);
        let c = center(y);
        let n = self.n as f64;
        for (i, row) in self.rows.iter().enumerate() {
            let dst = out.row_mut(i);
            match row {
                // d/dy_j of <xc, yc> / (|xc| |yc|) = xc_j / (|xc||yc|) - r yc_j / |yc|^2
                Row::Pc { xc, norm_x, .. } => {
                    if c.norm_y > 0.0 {
                        let r = xc.iter().zip(&c.yc).map(|(a, b)| a * b).sum::<f64>() / (norm_x * c.norm_y);
                        for j in 0..dst.len() {
                            dst[j] = xc[j] / (norm_x * c.norm_y) - r * c.yc[j] / (c.norm_y * c.norm_y);
                        }
                    } else {
                        for j in 0..dst.len() {
                            dst[j] = xc[j] / norm_x;
                        }
                    }
                }
                Row::Mean { scale, .. } => dst.fill(1.0 / (n * scale)),
                Row::Std { scale, .. } => {
                    if c.norm_y > 0.0 {
                        for j in 0..dst.len() {
                            dst[j] = c.yc[j] / (n.sqrt() * c.norm_y * scale);
                        }
                    }
                }
                Row::Loss {
                    members,
                    reference,
                    scale,
                    ..
                } => {
                    let k = members.len() as f64;
                    for &m in members {
                        dst[m] = 2.0 * (y[m] - reference[m]) / (k * scale);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub y1: Vec<f64>,
    /// `metric(y1) - target` per atom, unscaled.
    pub residuals: Vec<f64>,
    /// Outcome of the final solver run.
    pub outcome: SolveOutcome,
    /// Solver runs restarted from a nudged start.
    pub restarts: usize,
    pub changed: bool,
}

/// Relative sizes of the nudges tried when the solver stalls.
const NUDGES: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Solve for an adjusted vector meeting every target, starting from `y0`.
///
/// A start that already meets the targets is returned unchanged. When the
/// solver stalls at a stationary point that is not a root (`y0 = x` is the
/// maximum of the correlation, for one), it is restarted from `y0` plus a
/// small deterministic perturbation that is orthogonal to the constant
/// vector and to every attribute. Anything short of residual convergence
/// after the last restart is a [`DecodeError::NoConvergence`].
pub fn decode(problem: &DecodeProblem, config: &SolverConfig) -> Result<DecodeResult, DecodeError> {
    let system = compile(problem)?;
    let mut outcome = solve(&system, &problem.y0, config)?;
    let mut restarts = 0;
    while outcome.status != SolveStatus::ResidualConverged && restarts < NUDGES.len() {
        if outcome.status == SolveStatus::MaxIterations {
            break;
        }
        let start = nudge(&problem.y0, &system, NUDGES[restarts], restarts as u64);
        outcome = solve(&system, &start, config)?;
        restarts += 1;
    }
    if outcome.status != SolveStatus::ResidualConverged {
        return Err(DecodeError::NoConvergence {
            status: outcome.status,
            residual_norm: outcome.residual_norm,
            best: outcome.x,
            iterations: outcome.iterations,
        });
    }
    let y1 = outcome.x.clone();
    let changed = y1 != problem.y0;
    Ok(DecodeResult {
        residuals: system.atom_residuals(&y1),
        y1,
        outcome,
        restarts,
        changed,
    })
}

fn nudge(y0: &[f64], system: &DecodeSystem, size: f64, stream: u64) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let n = y0.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6e75_6467_65 ^ stream);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    // Gram-Schmidt against 1 and each centred attribute
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    for row in &system.rows {
        if let Row::Pc { xc, .. } = row {
            let mut u = xc.clone();
            for b in &basis {
                let d: f64 = u.iter().zip(b).map(|(p, q)| p * q).sum();
                u.iter_mut().zip(b).for_each(|(p, q)| *p -= d * q);
            }
            let norm = u.iter().map(|p| p * p).sum::<f64>().sqrt();
            if norm > 1e-12 {
                basis.push(u.into_iter().map(|p| p / norm).collect());
            }
        }
    }
    for b in &basis {
        let d: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
        v.iter_mut().zip(b).for_each(|(p, q)| *p -= d * q);
    }
    let norm_v = v.iter().map(|p| p * p).sum::<f64>().sqrt();
    let spread = center(y0).norm_y.max(1.0);
    if norm_v == 0.0 {
        return y0.to_vec();
    }
    y0.iter().zip(&v).map(|(y, p)| y + size * spread * p / norm_v).collect()
}

/// Whether `y` meets every target of `problem` to `tol` (relative for mean,
/// std and group loss, as in the residual rows).
pub fn satisfied(problem: &DecodeProblem, y: &[f64], tol: f64) -> Result<bool, DecodeError> {
    let system = compile(problem)?;
    let mut r = vec![0.0; y.len()];
    system.residuals(y, &mut r);
    Ok(r.iter().all(|v| v.abs() <= tol))
}
