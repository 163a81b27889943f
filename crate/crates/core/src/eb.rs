//! Entropy-balancing weights through the unconstrained convex dual.
//!
//! Primal: minimize `sum p_i log(n p_i)` over the simplex subject to
//! `sum_i p_i g_ik = 0` for centered constraint functions `g`. The dual is
//! the log-sum-exp objective `log sum_i exp(lambda . g_i)`, minimized here
//! by damped Newton with step halving; the optimal primal point is the
//! softmax of the dual scores.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Clone)]
pub struct EbSolution {
    /// Simplex point (sums to one); callers scale by `n` for weights.
    pub p: Vec<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub max_residual: f64,
}

/// Softmax of `g lambda` with the max score factored out; also returns the
/// dual value `log sum exp(scores)`.
fn primal_point(g: &DMatrix<f64>, lambda: &DVector<f64>) -> (Vec<f64>, f64) {
    let scores = g * lambda;
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = p.iter().sum();
    for pi in &mut p {
        *pi /= z;
    }
    (p, m + z.ln())
}

fn residuals(g: &DMatrix<f64>, p: &[f64]) -> DVector<f64> {
    let k = g.ncols();
    let mut r = DVector::zeros(k);
    for (i, pi) in p.iter().enumerate() {
        for j in 0..k {
            r[j] += pi * g[(i, j)];
        }
    }
    r
}

/// Solve for balancing weights given the centered constraint matrix `g`
/// (rows are observations, columns constraint functions with target zero).
///
/// Columns are equilibrated to unit scale internally (rare dummies
/// otherwise leave the dual Newton system badly conditioned); residuals
/// are reported and checked in the caller's units.
pub fn solve(
    g_raw: &DMatrix<f64>,
    labels: &[String],
    tol: f64,
    max_iter: usize,
) -> Result<EbSolution> {
    let (n, k) = (g_raw.nrows(), g_raw.ncols());
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    if k == 0 {
        return Ok(EbSolution {
            p: vec![1.0 / n as f64; n],
            lambda: DVector::zeros(0),
            iterations: 0,
            max_residual: 0.0,
        });
    }

    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let ss: f64 = (0..n).map(|i| g_raw[(i, j)] * g_raw[(i, j)]).sum();
            (ss / n as f64).sqrt().max(1e-12)
        })
        .collect();
    let g = &DMatrix::from_fn(n, k, |i, j| g_raw[(i, j)] / scale[j]);

    let mut lambda = DVector::zeros(k);
    let (mut p, mut dual) = primal_point(g, &lambda);

    for iter in 0..max_iter {
        let grad = residuals(g, &p);
        // Convergence is judged on the caller's units.
        let max_res = (0..k)
            .map(|j| (grad[j] * scale[j]).abs())
            .fold(0.0f64, f64::max);
        if max_res <= tol {
            return Ok(EbSolution {
                p,
                lambda,
                iterations: iter,
                max_residual: max_res,
            });
        }

        // Hessian = weighted covariance of the constraint functions.
        let mut h = DMatrix::zeros(k, k);
        for (i, pi) in p.iter().enumerate() {
            for a in 0..k {
                let ga = pi * g[(i, a)];
                for b in a..k {
                    h[(a, b)] += ga * g[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        for a in 0..k {
            for b in 0..k {
                h[(a, b)] -= grad[a] * grad[b];
            }
        }
        // Tiny ridge keeps the solve defined when constraints are nearly
        // redundant; the Newton direction stays a descent direction.
        let ridge = 1e-12 * (1.0 + h.diagonal().amax());
        for a in 0..k {
            h[(a, a)] += ridge;
        }

        let dir = match Cholesky::new(h) {
            Some(ch) => -ch.solve(&grad),
            None => -&grad,
        };

        // Armijo backtracking on the dual.
        let slope = grad.dot(&dir);
        let mut step = 1.0f64;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lambda + &dir * step;
            let (p_cand, dual_cand) = primal_point(g, &cand);
            if dual_cand.is_finite() && dual_cand <= dual + 1e-4 * step * slope {
                lambda = cand;
                p = p_cand;
                dual = dual_cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }

    let final_res = residuals(g, &p);
    let report: Vec<(String, f64)> = (0..k)
        .map(|j| {
            (
                labels.get(j).cloned().unwrap_or_else(|| format!("g{j}")),
                final_res[j] * scale[j],
            )
        })
        .collect();
    Err(Error::EbNoConvergence {
        iterations: max_iter,
        max_residual: report.iter().map(|(_, r)| r.abs()).fold(0.0, f64::max),
        residuals: report,
    })
}

/// KL divergence of a simplex point from uniform, `sum p log(n p)`.
pub fn kl_from_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .map(|&pi| if pi > 0.0 { pi * (n * pi).ln() } else { 0.0 })
        .sum()
}
