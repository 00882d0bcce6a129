//! Levenberg-Marquardt for small dense problems.
//!
//! Minimizes `cost = sum r_i(p)^2` with Marquardt diagonal scaling
//! `(J^T J + lambda diag(J^T J)) delta = -J^T r`. Accepted costs never increase.
//! Steps into an infeasible region are rejected like uphill steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Damping above this means no acceptable step exists.
const MAX_DAMPING: f64 = 1e20;
const MIN_DAMPING: f64 = 1e-20;

pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    /// Weighted residuals.
    fn residuals(&self, params: &[f64]) -> Vec<f64>;
    /// Row per residual, column per parameter.
    fn jacobian(&self, params: &[f64]) -> DMatrix<f64>;
    fn is_feasible(&self, _params: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_tolerance: 1e-10,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
        }
    }
}

impl LmSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations >= 1
            && self.rel_tolerance > 0.0
            && self.initial_damping > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 0.0
            && self.damping_down < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid LM settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No acceptable step at any damping; `infeasible` when the last
    /// rejected trial left the feasible region.
    Stalled {
        infeasible: bool,
    },
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub damping: f64,
    pub converged: bool,
    pub termination: Termination,
    /// `J^T J` at `params`.
    pub normal_matrix: DMatrix<f64>,
}

impl LmOutcome {
    /// Parameter covariance, `(J^T J)^-1` at the optimum.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        invert_spd(&self.normal_matrix).ok_or(Error::SingularJacobian)
    }
}

/// Inverse of a symmetric positive-definite matrix via a Jacobi-scaled
/// Cholesky factorization.
pub(crate) fn invert_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = DVector::from_iterator(n, (0..n).map(|i| a[(i, i)].sqrt().recip()));
    if scale.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let d = DMatrix::from_diagonal(&scale);
    let chol = (&d * a * &d).cholesky()?;
    let inv = &d * chol.inverse() * &d;
    Some((&inv + inv.transpose()) * 0.5)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn all_finite<'a>(xs: impl IntoIterator<Item = &'a f64>) -> bool {
    xs.into_iter().all(|x| x.is_finite())
}

pub fn lm_minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    initial: &[f64],
    settings: &LmSettings,
) -> Result<LmOutcome> {
    settings.validate()?;
    let n = problem.n_params();
    if initial.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} parameters, got {}",
            initial.len()
        )));
    }
    let tol = settings.rel_tolerance;
    let mut params = initial.to_vec();
    let mut r = problem.residuals(&params);
    let mut jac = problem.jacobian(&params);
    if !all_finite(&r) || !all_finite(jac.iter()) {
        return Err(Error::NonFiniteResidual);
    }
    let mut cost = sum_sq(&r);
    let mut damping = settings.initial_damping;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < settings.max_iterations {
        let normal = jac.transpose() * &jac;
        let gradient = jac.transpose() * DVector::from_column_slice(&r);
        let diag: Vec<f64> = (0..n).map(|i| normal[(i, i)].max(f64::MIN_POSITIVE)).collect();

        let mut accepted = None;
        let mut last_infeasible = false;
        let mut hit_barrier = false;
        while damping <= MAX_DAMPING {
            let mut damped = normal.clone();
            for (i, di) in diag.iter().enumerate() {
                damped[(i, i)] += damping * di;
            }
            let Some(chol) = damped.cholesky() else {
                damping *= settings.damping_up;
                continue;
            };
            let step = -chol.solve(&gradient);
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
            if !problem.is_feasible(&trial) {
                last_infeasible = true;
                hit_barrier = true;
                damping *= settings.damping_up;
                continue;
            }
            let r_trial = problem.residuals(&trial);
            let cost_trial = sum_sq(&r_trial);
            if cost_trial.is_finite() && cost_trial <= cost {
                accepted = Some((trial, r_trial, cost_trial, step));
                damping = (damping * settings.damping_down).max(MIN_DAMPING);
                break;
            }
            last_infeasible = false;
            damping *= settings.damping_up;
        }

        let Some((trial, r_trial, cost_trial, step)) = accepted else {
            termination = Termination::Stalled {
                infeasible: last_infeasible,
            };
            break;
        };
        iterations += 1;
        let small_step = step.iter().zip(&params).all(|(s, p)| s.abs() <= tol * (p.abs() + tol));
        let small_decrease = cost - cost_trial <= tol * cost_trial || cost_trial == 0.0;
        params = trial;
        r = r_trial;
        cost = cost_trial;
        jac = problem.jacobian(&params);
        if !all_finite(jac.iter()) {
            return Err(Error::NonFiniteResidual);
        }
        if small_step && small_decrease {
            // Creeping along the fence is not a minimum.
            termination = if hit_barrier {
                Termination::Stalled { infeasible: true }
            } else {
                Termination::Converged
            };
            break;
        }
    }

    let normal_matrix = jac.transpose() * &jac;
    let converged = match termination {
        Termination::Converged => true,
        // At a minimum resolved to rounding no step can lower the cost any
        // further; accept when the Gauss-Newton predicted decrease is negligible.
        Termination::Stalled { infeasible: false } => {
            let gradient = jac.transpose() * DVector::from_column_slice(&r);
            match invert_spd(&normal_matrix) {
                Some(inv) => gradient.dot(&(inv * &gradient)) <= tol * cost + 1e-24,
                None => false,
            }
        }
        _ => false,
    };
    if converged {
        termination = Termination::Converged;
    }
    Ok(LmOutcome {
        params,
        cost,
        iterations,
        damping,
        converged,
        termination,
        normal_matrix,
    })
}
