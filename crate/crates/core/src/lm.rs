//! Levenberg-Marquardt minimisation of `0.5 * |r(x)|^2`.
//!
//! Marquardt's diagonal scaling is used, so the damped normal equations are
//! `(J^T J + lambda diag(J^T J)) dx = -J^T r`. A step is accepted only if it
//! lowers the cost, which makes the recorded cost history non-increasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A least-squares problem with an analytic Jacobian.
pub trait LeastSquaresProblem {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `m x n` matrix of `d r_i / d x_j`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Relative step size at which iteration stops.
    pub xtol: f64,
    /// Relative cost decrease of an accepted step at which iteration stops.
    pub ftol: f64,
    /// Infinity norm of the gradient at which iteration stops.
    pub gtol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            xtol: 1e-10,
            ftol: 1e-15,
            gtol: 1e-14,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    SmallStep,
    SmallCostChange,
    SmallGradient,
    MaxIterations,
    /// Damping grew without bound and no step lowered the cost.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub x: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// `0.5 * |r|^2` at `x`.
    pub cost: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Cost after the starting point and after every accepted step.
    pub cost_history: Vec<f64>,
}

impl LmReport {
    /// Linearised parameter covariance `s^2 (J^T J)^-1`, with `s^2` the
    /// residual variance per degree of freedom.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let (m, n) = self.jacobian.shape();
        let dof = m.saturating_sub(n).max(1) as f64;
        let s2 = 2.0 * self.cost / dof;
        let jtj = self.jacobian.transpose() * &self.jacobian;
        invert_spd(&jtj).map(|inv| inv * s2)
    }
}

/// Inverse of a symmetric positive-definite matrix, equilibrated by its
/// diagonal so badly scaled parameters do not trip the Cholesky test.
pub fn invert_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateFit(
            "a parameter has no influence on the residuals".into(),
        ));
    }
    let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * s[i] * s[j]);
    let chol = scaled
        .cholesky()
        .ok_or_else(|| Error::DegenerateFit("normal equations are singular".into()))?;
    let inv = chol.inverse();
    // reject near-singular systems whose inverse is numerically meaningless
    if inv.iter().any(|v| !v.is_finite()) || inv.diagonal().max() > 1e14 {
        return Err(Error::DegenerateFit("normal equations are singular".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * s[i] * s[j]))
}

fn half_norm_sq(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    config: &LmConfig,
) -> Result<LmReport> {
    if config.max_iter < 1 {
        return Err(Error::invalid("max_iter", "must be at least 1"));
    }
    let mut x = x0;
    let mut r = problem.residuals(&x);
    let mut cost = half_norm_sq(&r);
    if !cost.is_finite() {
        return Err(Error::DegenerateFit("non-finite residuals at the starting point".into()));
    }
    let mut jac = problem.jacobian(&x);
    if jac.ncols() != x.len() || jac.nrows() != r.len() {
        return Err(Error::DegenerateFit("jacobian has the wrong shape".into()));
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite jacobian at the starting point".into()));
    }

    let mut lambda = config.lambda_init;
    let mut history = vec![cost];
    let mut termination = Termination::MaxIterations;
    let mut n_iter = 0;

    'outer: while n_iter < config.max_iter {
        n_iter += 1;
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        if grad.amax() <= config.gtol {
            termination = Termination::SmallGradient;
            break;
        }
        let diag: Vec<f64> = (0..jtj.nrows()).map(|i| jtj[(i, i)].max(1e-300)).collect();

        loop {
            let mut damped = jtj.clone();
            for (i, d) in diag.iter().enumerate() {
                damped[(i, i)] += lambda * d;
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&grad)),
                None => {
                    lambda *= config.lambda_up;
                    if lambda > 1e16 {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                    continue;
                }
            };

            if step.norm() <= config.xtol * (x.norm() + config.xtol) {
                termination = Termination::SmallStep;
                break 'outer;
            }

            let x_new = &x + &step;
            let r_new = problem.residuals(&x_new);
            let cost_new = half_norm_sq(&r_new);
            if cost_new.is_finite() && cost_new < cost {
                let decrease = cost - cost_new;
                x = x_new;
                r = r_new;
                cost = cost_new;
                jac = problem.jacobian(&x);
                history.push(cost);
                lambda = (lambda * config.lambda_down).max(1e-12);
                if decrease <= config.ftol * cost.max(f64::MIN_POSITIVE) {
                    termination = Termination::SmallCostChange;
                    break 'outer;
                }
                break;
            }
            lambda *= config.lambda_up;
            if lambda > 1e16 {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }

    // A stalled search at an exact zero-residual point is still a solution.
    let converged = match termination {
        Termination::MaxIterations => false,
        Termination::Stalled => cost <= f64::EPSILON * f64::EPSILON,
        _ => true,
    };

    Ok(LmReport {
        x,
        residuals: r,
        jacobian: jac,
        cost,
        n_iter,
        converged,
        termination,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as residuals `(1 - x, 10 (y - x^2))`.
    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![1.0 - x[0], 10.0 * (x[1] - x[0] * x[0])])
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * x[0], 10.0])
        }
    }

    /// `y = a exp(b t)` sampled with a fixed perturbation.
    struct ExpDecay {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquaresProblem for ExpDecay {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_iterator(
                self.t.len(),
                self.t.iter().zip(&self.y).map(|(t, y)| x[0] * (x[1] * t).exp() - y),
            )
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_fn(self.t.len(), 2, |i, j| {
                let e = (x[1] * self.t[i]).exp();
                if j == 0 {
                    e
                } else {
                    x[0] * self.t[i] * e
                }
            })
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let rep = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &LmConfig::default()).unwrap();
        assert!(rep.converged);
        assert!((rep.x[0] - 1.0).abs() < 1e-8 && (rep.x[1] - 1.0).abs() < 1e-8, "{}", rep.x);
    }

    #[test]
    fn cost_history_never_increases() {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, t)| 2.5 * (-0.7 * t).exp() + 0.01 * ((i * 7919 % 13) as f64 - 6.0) / 6.0)
            .collect();
        let p = ExpDecay { t, y };
        let rep = minimize(&p, DVector::from_vec(vec![1.0, 0.5]), &LmConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!((rep.x[0] - 2.5).abs() < 0.05 && (rep.x[1] + 0.7).abs() < 0.05);
        let cov = rep.covariance().unwrap();
        assert!(cov[(0, 0)] > 0.0 && cov[(1, 1)] > 0.0);
    }

    #[test]
    fn singular_problem_is_reported() {
        struct Flat;
        impl LeastSquaresProblem for Flat {
            fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0] - 1.0, x[0] + 1.0])
            }
            fn jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0])
            }
        }
        let rep = minimize(&Flat, DVector::from_vec(vec![3.0, 0.0]), &LmConfig::default()).unwrap();
        assert!(matches!(rep.covariance(), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn iteration_cap_is_respected() {
        let cfg = LmConfig { max_iter: 2, ..LmConfig::default() };
        let rep = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &cfg).unwrap();
        assert_eq!(rep.n_iter, 2);
        assert!(!rep.converged);
    }
}
