//! Small dense Levenberg–Marquardt solver shared by anchor autocalibration
//! and tag multilateration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A residual vector `r(x)` with an analytic Jacobian.
pub trait ResidualProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `n_residuals × n_params` Jacobian of [`Self::residuals`].
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>);

    /// `Σ rᵢ(x)²`.
    fn cost(&self, x: &[f64]) -> f64 {
        let mut r = vec![0.0; self.n_residuals()];
        self.residuals(x, &mut r);
        r.iter().map(|v| v * v).sum()
    }

    /// Gradient of [`Self::cost`], `2·Jᵀr`.
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n_residuals()];
        self.residuals(x, &mut r);
        let mut jac = DMatrix::zeros(self.n_residuals(), self.n_params());
        self.jacobian(x, &mut jac);
        let g = jac.transpose() * DVector::from_vec(r);
        g.iter().map(|v| 2.0 * v).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_iterations: usize,
    /// Converged once the largest parameter update falls below this (meters).
    pub step_tolerance: f64,
    /// Converged once `‖∇cost‖∞` falls below this.
    pub gradient_tolerance: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_iterations: 100,
            step_tolerance: 1e-9,
            gradient_tolerance: 1e-12,
        }
    }
}

const MIN_DAMPING: f64 = 1e-15;
const MAX_DAMPING: f64 = 1e15;

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub x: Vec<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `Σ rᵢ(x)²` from `x0`. Only steps that strictly lower the cost
/// are accepted, so `report.cost ≤ cost(x0)` always holds.
///
/// The damped normal equations are `(JᵀJ + λ·I)·δ = −Jᵀr`. When they cannot
/// be factored even at the largest damping the solve fails with
/// [`Error::SingularUpdate`].
pub fn minimize<P: ResidualProblem>(problem: &P, x0: &[f64], settings: &LmSettings) -> Result<LmReport> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    assert_eq!(x0.len(), n, "parameter vector length");

    let mut x = x0.to_vec();
    let mut r = vec![0.0; m];
    let mut jac = DMatrix::zeros(m, n);
    problem.residuals(&x, &mut r);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let initial_cost = cost;
    let mut lambda = settings.initial_damping;
    let mut trial = vec![0.0; n];
    let mut trial_r = vec![0.0; m];

    let mut iterations = 0;
    let mut converged = false;
    let mut refresh = true;
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);

    while iterations < settings.max_iterations {
        if refresh {
            problem.jacobian(&x, &mut jac);
            let rv = DVector::from_column_slice(&r);
            jtj = jac.transpose() * &jac;
            jtr = jac.transpose() * rv;
            refresh = false;
        }
        if 2.0 * jtr.amax() < settings.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let mut damped = jtj.clone();
        for i in 0..n {
            damped[(i, i)] += lambda;
        }
        let Some(chol) = damped.cholesky() else {
            if lambda >= MAX_DAMPING {
                return Err(Error::SingularUpdate);
            }
            lambda = (lambda * settings.damping_increase).min(MAX_DAMPING);
            continue;
        };
        let step = chol.solve(&(-&jtr));
        let max_step = step.amax();
        for i in 0..n {
            trial[i] = x[i] + step[i];
        }
        problem.residuals(&trial, &mut trial_r);
        let trial_cost: f64 = trial_r.iter().map(|v| v * v).sum();

        if trial_cost < cost {
            x.copy_from_slice(&trial);
            r.copy_from_slice(&trial_r);
            cost = trial_cost;
            lambda = (lambda / settings.damping_decrease).max(MIN_DAMPING);
            refresh = true;
            if max_step < settings.step_tolerance {
                converged = true;
                break;
            }
        } else {
            if max_step < settings.step_tolerance {
                // no representable improvement left along the damped direction
                converged = true;
                break;
            }
            if lambda >= MAX_DAMPING {
                break;
            }
            lambda = (lambda * settings.damping_increase).min(MAX_DAMPING);
        }
    }

    Ok(LmReport {
        x,
        cost,
        initial_cost,
        iterations,
        converged,
    })
}

/// Central-difference gradient of `f` with step `h`.
pub fn numerical_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
