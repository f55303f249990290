use super::linalg::{cholesky_shifted, cholesky_solve, dot, norm, Matrix};
use super::{SolverConfig, SolverError};

/// Steepest-descent (Cauchy) step of the quadratic model
/// `L(δ) = ½‖ε + Jδ‖²`, with `g = Jᵀε`:
///
/// `δ_sd = -(gᵀg / gᵀJᵀJg) g`
pub fn cauchy_step(g: &[f64], jacobian: &Matrix) -> Result<Vec<f64>, SolverError> {
    let gg = dot(g, g);
    if gg == 0.0 {
        return Err(SolverError::ZeroGradient);
    }
    let jg = jacobian.mul_vec(g);
    let curvature = dot(&jg, &jg);
    if !(curvature > 0.0) {
        return Err(SolverError::ZeroGradient);
    }
    let alpha = gg / curvature;
    Ok(g.iter().map(|v| -alpha * v).collect())
}

/// Gauss-Newton step from a perturbed Cholesky factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonStep {
    pub step: Vec<f64>,
    /// Perturbation that made the system factor.
    pub lambda: f64,
}

/// Solves `(JᵀJ + λI) δ = -Jᵀε` with the first λ of the schedule
/// `{0, 10^lo·τ, …, 10^hi·τ}`, `τ = trace(JᵀJ)/n`, that factors.
///
/// When `J` has zero rows, `JᵀJ` is singular and λ = 0 cannot factor; the
/// perturbed systems are then solved through the equivalent row-space form
/// `δ = -J_rᵀ (J_r J_rᵀ + λI)⁻¹ ε_r` over the nonzero rows `J_r`, which costs
/// O(r³) instead of O(n³).
pub fn gauss_newton_step(
    jacobian: &Matrix,
    residual: &[f64],
    config: &SolverConfig,
) -> Result<GaussNewtonStep, SolverError> {
    let n = jacobian.cols();
    let active = jacobian.nonzero_rows();
    if active.len() < jacobian.rows() && active.len() < n {
        return gauss_newton_row_space(jacobian, residual, &active, config);
    }
    gauss_newton_dense(jacobian, residual, config)
}

fn schedule(config: &SolverConfig, tau: f64) -> impl Iterator<Item = f64> + '_ {
    let tau = if tau > 0.0 && tau.is_finite() { tau } else { 1.0 };
    std::iter::once(0.0).chain(
        (config.perturbation_min_exp..=config.perturbation_max_exp).map(move |e| 10f64.powi(e) * tau),
    )
}

const PIVOT_RELATIVE_FLOOR: f64 = 1e-13;

/// Normal-equation route over the full `n × n` system.
pub fn gauss_newton_dense(
    jacobian: &Matrix,
    residual: &[f64],
    config: &SolverConfig,
) -> Result<GaussNewtonStep, SolverError> {
    let n = jacobian.cols();
    let gram = jacobian.gram();
    let g = jacobian.tr_mul_vec(residual);
    let tau = (0..n).map(|i| gram[(i, i)]).sum::<f64>() / n as f64;
    let max_diag = (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    for lambda in schedule(config, tau) {
        let floor = PIVOT_RELATIVE_FLOOR * (max_diag + lambda);
        if let Some(l) = cholesky_shifted(&gram, lambda, floor) {
            let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
            let step = cholesky_solve(&l, &neg_g);
            if step.iter().all(|v| v.is_finite()) {
                return Ok(GaussNewtonStep { step, lambda });
            }
        }
    }
    Err(SolverError::JacobianFailure)
}

fn gauss_newton_row_space(
    jacobian: &Matrix,
    residual: &[f64],
    active: &[usize],
    config: &SolverConfig,
) -> Result<GaussNewtonStep, SolverError> {
    let n = jacobian.cols();
    let r = active.len();
    let mut gram = Matrix::zeros(r, r);
    for (a, &i) in active.iter().enumerate() {
        for (b, &k) in active.iter().enumerate().take(a + 1) {
            let v = dot(jacobian.row(i), jacobian.row(k));
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    // trace(J_r J_rᵀ) = trace(JᵀJ)
    let tau = (0..r).map(|a| gram[(a, a)]).sum::<f64>() / n as f64;
    let max_diag = (0..r).map(|a| gram[(a, a)]).fold(0.0, f64::max);
    let eps: Vec<f64> = active.iter().map(|&i| residual[i]).collect();
    // λ = 0 is skipped: the n × n normal matrix has rank ≤ r < n.
    for lambda in schedule(config, tau).skip(1) {
        let floor = PIVOT_RELATIVE_FLOOR * (max_diag + lambda);
        if let Some(l) = cholesky_shifted(&gram, lambda, floor) {
            let u = cholesky_solve(&l, &eps);
            let mut step = vec![0.0; n];
            for (a, &i) in active.iter().enumerate() {
                super::linalg::axpy(-u[a], jacobian.row(i), &mut step);
            }
            if step.iter().all(|v| v.is_finite()) {
                return Ok(GaussNewtonStep { step, lambda });
            }
        }
    }
    Err(SolverError::JacobianFailure)
}

/// Which branch of the dogleg produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoglegCase {
    GaussNewton,
    ScaledSteepest,
    Interpolated,
}

/// Dogleg step inside a trust region of radius `radius`:
/// - `‖δ_gn‖ ≤ Δ`: the Gauss-Newton step;
/// - `‖δ_sd‖ > Δ` (and `‖δ_gn‖ > Δ`): steepest descent scaled to the boundary;
/// - otherwise: where the segment from `δ_sd` to `δ_gn` crosses `‖δ‖ = Δ`.
pub fn dogleg_step(sd: &[f64], gn: &[f64], radius: f64) -> (Vec<f64>, DoglegCase) {
    let gn_norm = norm(gn);
    if gn_norm <= radius {
        return (gn.to_vec(), DoglegCase::GaussNewton);
    }
    let sd_norm = norm(sd);
    if sd_norm > radius {
        let scale = radius / sd_norm;
        return (sd.iter().map(|v| scale * v).collect(), DoglegCase::ScaledSteepest);
    }
    // ‖sd + s (gn - sd)‖² = Δ², positive root s ∈ [0, 1]
    let d: Vec<f64> = gn.iter().zip(sd).map(|(a, b)| a - b).collect();
    let a = dot(&d, &d);
    let b = 2.0 * dot(sd, &d);
    let c = sd_norm * sd_norm - radius * radius;
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    let s = if b <= 0.0 {
        (-b + disc) / (2.0 * a)
    } else {
        -2.0 * c / (b + disc)
    };
    let s = s.clamp(0.0, 1.0);
    (
        sd.iter().zip(&d).map(|(p, q)| p + s * q).collect(),
        DoglegCase::Interpolated,
    )
}

/// Trust radius after a step with agreement `ratio` between actual and
/// predicted reduction.
pub fn update_radius(ratio: f64, radius: f64, step_at_boundary: bool, config: &SolverConfig) -> f64 {
    if !(ratio >= config.shrink_below) {
        radius * config.shrink_factor
    } else if ratio > config.expand_above && step_at_boundary {
        radius * config.expand_factor
    } else {
        radius
    }
}
