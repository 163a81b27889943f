//! Small deterministic optimizers: a bracketed 1-D minimizer and a dense
//! BFGS for low-dimensional smooth objectives.

use nalgebra::{DMatrix, DVector};

use crate::num::Scalar;

/// One accepted improvement of the 1-D search.
#[derive(Debug, Clone, Copy)]
pub struct TraceStep<T> {
    pub x: T,
    pub value: T,
}

/// Golden-section search over `[lo, hi]` followed by one parabolic
/// refinement, returning the best point and the trace of accepted
/// improvements (non-increasing in `value` by construction).
pub fn golden_section<T: Scalar>(
    mut f: impl FnMut(T) -> T,
    lo: T,
    hi: T,
    tol_x: T,
) -> (T, T, Vec<TraceStep<T>>) {
    let inv_phi = T::of(0.618_033_988_749_894_9);
    let mut a = lo;
    let mut b = hi;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);

    let mut best_x;
    let mut best_f;
    if fc <= fd {
        best_x = c;
        best_f = fc;
    } else {
        best_x = d;
        best_f = fd;
    }
    // Include the endpoints in the search: a flat or boundary-minimized
    // criterion must be allowed to settle at the bracket edge.
    let fa = f(a);
    if fa < best_f {
        best_x = a;
        best_f = fa;
    }
    let fb = f(b);
    if fb < best_f {
        best_x = b;
        best_f = fb;
    }
    let mut trace = vec![TraceStep {
        x: best_x,
        value: best_f,
    }];

    let push_best = |x: T, v: T, bx: &mut T, bf: &mut T, tr: &mut Vec<TraceStep<T>>| {
        if v < *bf {
            *bx = x;
            *bf = v;
            tr.push(TraceStep { x, value: v });
        }
    };

    for _ in 0..200 {
        if (b - a).abs() <= tol_x {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
            push_best(c, fc, &mut best_x, &mut best_f, &mut trace);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
            push_best(d, fd, &mut best_x, &mut best_f, &mut trace);
        }
    }

    // Parabolic refinement through the final bracket.
    let m = (a + b) / T::of(2.0);
    let fm = f(m);
    push_best(m, fm, &mut best_x, &mut best_f, &mut trace);
    let denom = (a - m) * (fm - fb) - (m - b) * (fa - fm);
    if denom.abs() > T::zero() {
        let num = (a - m) * (a - m) * (fm - fb) - (m - b) * (m - b) * (fa - fm);
        let cand = m - num / (T::of(2.0) * denom);
        if cand > lo && cand < hi && cand.is_finite() {
            let fcand = f(cand);
            push_best(cand, fcand, &mut best_x, &mut best_f, &mut trace);
        }
    }

    (best_x, best_f, trace)
}

pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize a smooth function with analytic gradient. The callback returns
/// `(value, gradient)`.
pub fn bfgs(
    mut fg: impl FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    x0: DVector<f64>,
    max_iter: usize,
    grad_tol: f64,
) -> BfgsResult {
    let dim = x0.len();
    let mut x = x0;
    let (mut value, mut grad) = fg(&x);
    let mut h_inv = DMatrix::<f64>::identity(dim, dim);

    for iter in 0..max_iter {
        let gnorm = grad.amax();
        if gnorm <= grad_tol {
            return BfgsResult {
                x,
                value,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            };
        }

        let mut dir = -(&h_inv * &grad);
        if dir.dot(&grad) >= 0.0 {
            // Reset on loss of descent.
            h_inv = DMatrix::identity(dim, dim);
            dir = -grad.clone();
        }

        // Backtracking Armijo line search.
        let slope = grad.dot(&dir);
        let mut step = 1.0f64;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            let (v, g) = fg(&cand);
            if v.is_finite() && v <= value + 1e-4 * step * slope {
                accepted = Some((cand, v, g));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            return BfgsResult {
                x,
                value,
                grad_norm: gnorm,
                iterations: iter,
                converged: false,
            };
        };

        let s = &x_new - &x;
        let yv = &g_new - &grad;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let sy_outer = &s * yv.transpose();
            let eye = DMatrix::<f64>::identity(dim, dim);
            let left = &eye - &sy_outer * rho;
            let right = &eye - (&yv * s.transpose()) * rho;
            h_inv = &left * h_inv * right + (&s * s.transpose()) * rho;
        }

        x = x_new;
        value = v_new;
        grad = g_new;
    }

    let gnorm = grad.amax();
    BfgsResult {
        x,
        value,
        grad_norm: gnorm,
        iterations: max_iter,
        converged: gnorm <= grad_tol,
    }
}
