//! Powell's hybrid (dogleg) trust-region method for square systems
//! `f(x) = 0`, minimizing `F(x) = ½‖f(x)‖²`.
//!
//! Each iteration builds the Cauchy step and a Gauss-Newton step from a
//! perturbed Cholesky factorization, combines them with the dogleg rule,
//! and adapts the trust radius from the agreement between the actual and
//! the model-predicted reduction of `F`.

mod linalg;
mod steps;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use linalg::{axpy, cholesky_shifted, cholesky_solve, dot, norm, Matrix};
pub use steps::{
    cauchy_step, dogleg_step, gauss_newton_dense, gauss_newton_step, update_radius, DoglegCase,
    GaussNewtonStep,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("gradient vanishes; the iterate is stationary")]
    ZeroGradient,
    #[error("no perturbation in the schedule made JᵀJ + λI factor")]
    JacobianFailure,
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("residuals are not finite at the starting point")]
    NonFiniteStart,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// A square residual function `f: Rⁿ → Rⁿ`.
pub trait ResidualSystem {
    fn dim(&self) -> usize;

    fn residuals(&self, x: &[f64], out: &mut [f64]);

    /// Jacobian `∂f_i/∂x_j` into `out` (n × n). Defaults to forward
    /// differences.
    fn jacobian(&self, x: &[f64], out: &mut Matrix) {
        finite_difference_jacobian(self, x, out);
    }
}

/// Forward-difference Jacobian with steps `h_j = √ε · max(1, |x_j|)`.
pub fn finite_difference_jacobian<S: ResidualSystem + ?Sized>(system: &S, x: &[f64], out: &mut Matrix) {
    let n = system.dim();
    let mut base = vec![0.0; n];
    system.residuals(x, &mut base);
    let mut probe = x.to_vec();
    let mut shifted = vec![0.0; n];
    let sqrt_eps = f64::EPSILON.sqrt();
    for j in 0..n {
        let h = sqrt_eps * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let h = probe[j] - x[j];
        system.residuals(&probe, &mut shifted);
        for i in 0..n {
            out[(i, j)] = (shifted[i] - base[i]) / h;
        }
        probe[j] = x[j];
    }
}

/// Closure-backed system, mostly for tests and small problems.
pub struct FnSystem<F, J = fn(&[f64], &mut Matrix)> {
    dim: usize,
    f: F,
    jac: Option<J>,
}

impl<F: Fn(&[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnSystem { dim, f, jac: None }
    }
}

impl<F: Fn(&[f64], &mut [f64]), J: Fn(&[f64], &mut Matrix)> FnSystem<F, J> {
    pub fn with_jacobian(dim: usize, f: F, jac: J) -> Self {
        FnSystem {
            dim,
            f,
            jac: Some(jac),
        }
    }
}

impl<F: Fn(&[f64], &mut [f64]), J: Fn(&[f64], &mut Matrix)> ResidualSystem for FnSystem<F, J> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    fn jacobian(&self, x: &[f64], out: &mut Matrix) {
        match &self.jac {
            Some(j) => j(x, out),
            None => finite_difference_jacobian(self, x, out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Initial trust radius; `None` means `max(1, ‖x0‖)`.
    pub initial_radius: Option<f64>,
    pub max_iterations: usize,
    /// Stop when `‖f(x)‖ ≤ tol_f`.
    pub tol_f: f64,
    /// Stop when the step (or the trust radius) falls to `tol_x` or below.
    pub tol_x: f64,
    pub expand_factor: f64,
    pub shrink_factor: f64,
    /// Expand when the reduction ratio exceeds this and the step hit the boundary.
    pub expand_above: f64,
    /// Shrink when the reduction ratio is below this.
    pub shrink_below: f64,
    /// Cholesky perturbations are `10^e · τ` for `e` in this range, after `λ = 0`.
    pub perturbation_min_exp: i32,
    pub perturbation_max_exp: i32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            initial_radius: None,
            max_iterations: 200,
            tol_f: 1e-10,
            tol_x: 1e-12,
            expand_factor: 2.0,
            shrink_factor: 0.25,
            expand_above: 0.75,
            shrink_below: 0.25,
            perturbation_min_exp: -10,
            perturbation_max_exp: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.tol_f > 0.0 && self.tol_x > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(0.0 < self.shrink_factor && self.shrink_factor < 1.0 && self.expand_factor > 1.0) {
            return bad("need 0 < shrink_factor < 1 < expand_factor");
        }
        if !(self.shrink_below <= self.expand_above) {
            return bad("shrink_below must not exceed expand_above");
        }
        if self.perturbation_min_exp > self.perturbation_max_exp {
            return bad("empty perturbation schedule");
        }
        if let Some(r) = self.initial_radius {
            if !(r > 0.0) {
                return bad("initial radius must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    ResidualConverged,
    StepConverged,
    MaxIterations,
    JacobianFailure,
}

/// One trial step of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Radius the step was constrained by.
    pub radius: f64,
    pub step_norm: f64,
    /// `F` before and at the trial point.
    pub objective_before: f64,
    pub objective_trial: f64,
    pub ratio: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Trust radius at the start of each iteration, then the final radius.
    pub radius_trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

impl SolveOutcome {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::ResidualConverged
    }
}

fn objective(r: &[f64]) -> f64 {
    0.5 * dot(r, r)
}

/// Run the dogleg iteration from `x0`.
pub fn solve<S: ResidualSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    config: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    config.validate()?;
    let n = system.dim();
    if x0.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    system.residuals(&x, &mut f);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteStart);
    }
    let mut radius = config.initial_radius.unwrap_or_else(|| norm(x0).max(1.0));
    let mut outcome = SolveOutcome {
        x: Vec::new(),
        status: SolveStatus::MaxIterations,
        residual_norm: norm(&f),
        iterations: 0,
        radius_trace: Vec::new(),
        steps: Vec::new(),
    };
    if outcome.residual_norm <= config.tol_f {
        outcome.status = SolveStatus::ResidualConverged;
        outcome.radius_trace.push(radius);
        outcome.x = x;
        return Ok(outcome);
    }

    let mut jac = Matrix::zeros(n, n);
    let mut trial = vec![0.0; n];
    let mut f_trial = vec![0.0; n];
    let mut need_jacobian = true;
    let mut sd = Vec::new();
    let mut gn = Vec::new();
    let mut g = Vec::new();

    let status = loop {
        if outcome.iterations >= config.max_iterations {
            break SolveStatus::MaxIterations;
        }
        if need_jacobian {
            system.jacobian(&x, &mut jac);
            g = jac.tr_mul_vec(&f);
            sd = match cauchy_step(&g, &jac) {
                Ok(s) => s,
                // stationary but not a root: nothing left to descend
                Err(_) => break SolveStatus::StepConverged,
            };
            gn = match gauss_newton_step(&jac, &f, config) {
                Ok(s) => s.step,
                Err(_) => break SolveStatus::JacobianFailure,
            };
            need_jacobian = false;
        }
        outcome.iterations += 1;
        outcome.radius_trace.push(radius);

        let (step, _) = dogleg_step(&sd, &gn, radius);
        let step_norm = norm(&step);
        for i in 0..n {
            trial[i] = x[i] + step[i];
        }
        system.residuals(&trial, &mut f_trial);

        let before = objective(&f);
        let after = if f_trial.iter().all(|v| v.is_finite()) {
            objective(&f_trial)
        } else {
            f64::INFINITY
        };
        // L(0) - L(δ) = -gᵀδ - ½‖Jδ‖²
        let jd = jac.mul_vec(&step);
        let predicted = -dot(&g, &step) - 0.5 * dot(&jd, &jd);
        let actual = before - after;
        let ratio = if predicted > 0.0 {
            actual / predicted
        } else if actual > 0.0 {
            1.0
        } else {
            -1.0
        };
        let at_boundary = step_norm >= radius * (1.0 - 1e-12);
        let accepted = ratio > 0.0 && after < before;
        outcome.steps.push(StepRecord {
            radius,
            step_norm,
            objective_before: before,
            objective_trial: after,
            ratio,
            accepted,
        });
        radius = update_radius(ratio, radius, at_boundary, config);

        if accepted {
            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut f, &mut f_trial);
            need_jacobian = true;
            if norm(&f) <= config.tol_f {
                break SolveStatus::ResidualConverged;
            }
        }
        if step_norm <= config.tol_x || radius <= config.tol_x {
            break SolveStatus::StepConverged;
        }
    };
    outcome.radius_trace.push(radius);
    outcome.status = status;
    outcome.residual_norm = norm(&f);
    outcome.x = x;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock() -> impl ResidualSystem {
        FnSystem::with_jacobian(
            2,
            |x: &[f64], out: &mut [f64]| {
                out[0] = 10.0 * (x[1] - x[0] * x[0]);
                out[1] = 1.0 - x[0];
            },
            |x: &[f64], j: &mut Matrix| {
                j[(0, 0)] = -20.0 * x[0];
                j[(0, 1)] = 10.0;
                j[(1, 0)] = -1.0;
                j[(1, 1)] = 0.0;
            },
        )
    }

    #[test]
    fn linear_converges_fast() {
        // root within the initial radius max(1, ‖x0‖)
        let a = [3.0, -1.0, 0.5];
        let sys = FnSystem::new(3, move |x: &[f64], out: &mut [f64]| {
            for i in 0..3 {
                out[i] = x[i] - a[i];
            }
        });
        let out = solve(&sys, &[2.0, -1.0, 1.0], &SolverConfig::default()).unwrap();
        assert_eq!(out.status, SolveStatus::ResidualConverged);
        assert!(out.iterations <= 2);
        for (x, e) in out.x.iter().zip(a) {
            assert!((x - e).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock_root() {
        let out = solve(&rosenbrock(), &[-1.2, 1.0], &SolverConfig::default()).unwrap();
        assert_eq!(out.status, SolveStatus::ResidualConverged);
        assert!(out.residual_norm <= 1e-8);
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn accepted_steps_descend_and_stay_in_region() {
        let out = solve(&rosenbrock(), &[-1.2, 1.0], &SolverConfig::default()).unwrap();
        let mut last = f64::INFINITY;
        for s in &out.steps {
            assert!(s.step_norm <= s.radius + 1e-12);
            if s.accepted {
                assert!(s.objective_trial <= s.objective_before);
                assert!(s.objective_trial <= last);
                last = s.objective_trial;
            }
        }
    }

    #[test]
    fn already_solved_takes_no_steps() {
        let out = solve(&rosenbrock(), &[1.0, 1.0], &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![1.0, 1.0]);
    }

    #[test]
    fn max_iterations_reported() {
        let cfg = SolverConfig {
            max_iterations: 1,
            ..SolverConfig::default()
        };
        let out = solve(&rosenbrock(), &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(out.status, SolveStatus::MaxIterations);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn stationary_non_root_stops() {
        // f(x) = x² + 1 has no root; x = 0 is stationary
        let sys = FnSystem::new(1, |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] + 1.0);
        let out = solve(&sys, &[0.0], &SolverConfig::default()).unwrap();
        assert_ne!(out.status, SolveStatus::ResidualConverged);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SolverConfig {
            shrink_factor: 1.5,
            ..SolverConfig::default()
        };
        assert!(matches!(
            solve(&rosenbrock(), &[0.0, 0.0], &cfg),
            Err(SolverError::InvalidConfig(_))
        ));
        assert!(matches!(
            solve(&rosenbrock(), &[0.0], &SolverConfig::default()),
            Err(SolverError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn finite_differences_close_to_analytic() {
        let sys = rosenbrock();
        let x = [0.3, -0.7];
        let mut a = Matrix::zeros(2, 2);
        let mut fd = Matrix::zeros(2, 2);
        sys.jacobian(&x, &mut a);
        finite_difference_jacobian(&sys, &x, &mut fd);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a[(i, j)] - fd[(i, j)]).abs() <= 1e-6 * (1.0 + a[(i, j)].abs()));
            }
        }
    }
}
