//! Weighted single-random-intercept linear mixed model, fit by profiling
//! the restricted (or full) likelihood over the variance ratio.
//!
//! The model is `y = X b + Z u + e` with one intercept per group,
//! `u_l ~ N(0, sigma_u^2)` and `Var(e_i) = sigma_e^2 / w_i`. Profiling over
//! `theta = sigma_u / sigma_e` leaves a one-dimensional criterion; the
//! generalized-least-squares solve at each `theta` uses the Woodbury
//! identity group by group, so an evaluation costs O(n p + p^3).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optim::{golden_section, TraceStep};

/// Which likelihood the variance ratio is profiled against.
///
/// `Reml` gives the usual unbiased variance components for outcome models;
/// `Ml` divides the residual sum by `n`, which keeps propensity density
/// ratios internally consistent (an intercept-only conditional model then
/// reproduces the marginal fit exactly).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitCriterion {
    Reml,
    Ml,
}

/// Upper end of the profiled `theta = sigma_u / sigma_e` bracket.
pub const THETA_BRACKET_HI: f64 = 10.0;
/// `theta` below this collapses to an exactly-zero variance component
/// ("singular fit", reported, not an error).
pub const THETA_SNAP_ZERO: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub beta: DVector<f64>,
    pub vcov_beta: DMatrix<f64>,
    pub sigma_u: f64,
    pub sigma_eps: f64,
    pub theta: f64,
    /// Predicted (shrunken) group intercepts, indexed like the group ids
    /// passed to [`fit`].
    pub u_hat: Vec<f64>,
    /// Accepted improvements of the profiled criterion.
    pub fit_log: Vec<(f64, f64)>,
    pub criterion: FitCriterion,
    pub singular: bool,
}

struct GroupBlocks {
    /// X' W X (theta-independent part).
    gram: DMatrix<f64>,
    /// X' W y.
    xty: DVector<f64>,
    /// y' W y.
    yty: f64,
    /// Per-group X_l' w_l.
    h: Vec<DVector<f64>>,
    /// Per-group w_l . y_l.
    d: Vec<f64>,
    /// Per-group sum of weights.
    s: Vec<f64>,
}

fn precompute(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    groups: &[usize],
    w: &[f64],
    n_groups: usize,
) -> GroupBlocks {
    let (n, p) = (x.nrows(), x.ncols());
    let mut gram = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut yty = 0.0;
    let mut h = vec![DVector::zeros(p); n_groups];
    let mut d = vec![0.0; n_groups];
    let mut s = vec![0.0; n_groups];

    for i in 0..n {
        let wi = w[i];
        let g = groups[i];
        let row = x.row(i);
        for a in 0..p {
            let xa = row[a];
            xty[a] += wi * xa * y[i];
            h[g][a] += wi * xa;
            for b in a..p {
                gram[(a, b)] += wi * xa * row[b];
            }
        }
        yty += wi * y[i] * y[i];
        d[g] += wi * y[i];
        s[g] += wi;
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    GroupBlocks {
        gram,
        xty,
        yty,
        h,
        d,
        s,
    }
}

struct ProfileEval {
    chol: Cholesky<f64, nalgebra::Dyn>,
    beta: DVector<f64>,
    rss: f64,
    log_det_v: f64,
    log_det_a: f64,
}

/// GLS solve and criterion pieces at a fixed theta. `None` when the
/// normal-equation matrix is not positive definite.
fn profile_eval(blocks: &GroupBlocks, theta: f64, w: &[f64]) -> Option<ProfileEval> {
    let p = blocks.gram.ncols();
    let t2 = theta * theta;

    let mut a = blocks.gram.clone();
    let mut b = blocks.xty.clone();
    let mut yv = blocks.yty;
    let mut log_det_v: f64 = w.iter().map(|wi| -wi.ln()).sum();
    for l in 0..blocks.s.len() {
        let kappa = t2 / (1.0 + t2 * blocks.s[l]);
        let hl = &blocks.h[l];
        let dl = blocks.d[l];
        if kappa != 0.0 {
            for r in 0..p {
                let hr = hl[r];
                b[r] -= kappa * dl * hr;
                for c in 0..p {
                    a[(r, c)] -= kappa * hr * hl[c];
                }
            }
            yv -= kappa * dl * dl;
        }
        log_det_v += (1.0 + t2 * blocks.s[l]).ln();
    }

    let chol = Cholesky::new(a)?;
    let beta = chol.solve(&b);
    let rss = yv - b.dot(&beta);
    let log_det_a = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|x| x.ln())
            .sum::<f64>();
    Some(ProfileEval {
        chol,
        beta,
        rss,
        log_det_v,
        log_det_a,
    })
}

/// Fit the weighted random-intercept model.
///
/// `groups[i]` indexes the group of observation `i` in `0..n_groups`;
/// `labels` name the design columns for rank-deficiency diagnostics.
pub fn fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    groups: &[usize],
    n_groups: usize,
    w: &[f64],
    criterion: FitCriterion,
    labels: &[String],
) -> Result<LmmFit> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n || groups.len() != n || w.len() != n {
        return Err(Error::InvalidInput("mismatched model input lengths".into()));
    }
    if n <= p {
        return Err(Error::FitFailed(format!(
            "need more observations ({n}) than design columns ({p})"
        )));
    }
    if w.iter().any(|wi| !(wi.is_finite() && *wi > 0.0)) {
        return Err(Error::InvalidInput(
            "weights must be positive and finite".into(),
        ));
    }
    if groups.iter().any(|&g| g >= n_groups) {
        return Err(Error::InvalidInput("group index out of range".into()));
    }

    let bad = collinear_columns(x, labels);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    let blocks = precompute(y, x, groups, w, n_groups);
    if profile_eval(&blocks, 0.0, w).is_none() {
        return Err(Error::RankDeficient {
            columns: detect_collinear(x, labels),
        });
    }

    let dof = match criterion {
        FitCriterion::Reml => (n - p) as f64,
        FitCriterion::Ml => n as f64,
    };
    // A perfect (interpolating) fit leaves residual dust that may round to
    // zero or slightly negative; flooring keeps the criterion finite there
    // and the profile settles on the boundary as usual.
    let rss_floor = 1e-25 * (1.0 + blocks.yty.abs());
    let objective = |theta: f64| -> f64 {
        match profile_eval(&blocks, theta, w) {
            Some(ev) => {
                if !ev.rss.is_finite() {
                    return f64::INFINITY;
                }
                let mut crit = ev.log_det_v + dof * ev.rss.max(rss_floor).ln();
                if criterion == FitCriterion::Reml {
                    crit += ev.log_det_a;
                }
                crit
            }
            None => f64::INFINITY,
        }
    };

    let (theta_opt, best_crit, trace) = golden_section(objective, 0.0, THETA_BRACKET_HI, 1e-8);
    if !best_crit.is_finite() {
        return Err(Error::FitFailed("non-finite profiled criterion".into()));
    }
    // A flat profile (e.g. the group effect confounded with the intercept)
    // settles on the boundary rather than an arbitrary interior point.
    let boundary_tie = objective(0.0) <= best_crit + 1e-7 * (1.0 + best_crit.abs());
    let singular = boundary_tie || theta_opt <= THETA_SNAP_ZERO;
    let theta = if singular { 0.0 } else { theta_opt };

    let ev = profile_eval(&blocks, theta, w)
        .ok_or_else(|| Error::FitFailed("normal equations lost definiteness at optimum".into()))?;
    let sigma_eps2 = ev.rss.max(0.0) / dof;
    if !sigma_eps2.is_finite() {
        return Err(Error::FitFailed("non-finite residual variance".into()));
    }
    let sigma_eps = sigma_eps2.max(f64::MIN_POSITIVE).sqrt();
    let sigma_u = theta * sigma_eps;

    // BLUP of the group intercepts: u_l = theta^2 sum(w r) / (1 + theta^2 s_l).
    let t2 = theta * theta;
    let mut u_hat = vec![0.0; n_groups];
    if theta > 0.0 {
        let mut wr = vec![0.0; n_groups];
        for i in 0..n {
            let resid = y[i] - x.row(i).transpose().dot(&ev.beta);
            wr[groups[i]] += w[i] * resid;
        }
        for l in 0..n_groups {
            u_hat[l] = t2 * wr[l] / (1.0 + t2 * blocks.s[l]);
        }
    }

    let p_eye = DMatrix::identity(p, p);
    let vcov_beta = ev.chol.solve(&p_eye) * sigma_eps2;

    Ok(LmmFit {
        beta: ev.beta,
        vcov_beta,
        sigma_u,
        sigma_eps,
        theta,
        u_hat,
        fit_log: trace
            .iter()
            .map(|TraceStep { x, value }| (*x, *value))
            .collect(),
        criterion,
        singular,
    })
}

/// Pivot threshold on the column-equilibrated Gram matrix. Equilibration
/// (unit diagonal) keeps raw-polynomial designs comfortably above it while
/// exact duplicates and zero columns fall many orders below.
const PIVOT2_TOL: f64 = 1e-12;

fn equilibrated_gram(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
    let p = x.ncols();
    let gram = x.transpose() * x;
    let zero_col: Vec<bool> = (0..p).map(|j| gram[(j, j)] <= 0.0).collect();
    let scale: Vec<f64> = (0..p)
        .map(|j| if zero_col[j] { 1.0 } else { gram[(j, j)].sqrt() })
        .collect();
    let eq = DMatrix::from_fn(p, p, |r, c| gram[(r, c)] / (scale[r] * scale[c]));
    (eq, zero_col)
}

fn pivots_ok(m: DMatrix<f64>) -> bool {
    Cholesky::new(m)
        .map(|ch| ch.l_dirty().diagonal().iter().all(|d| d * d > PIVOT2_TOL))
        .unwrap_or(false)
}

/// Empty when the design has full numerical rank, otherwise the names of
/// the columns a greedy scan could not add to a well-conditioned set.
pub fn collinear_columns(x: &DMatrix<f64>, labels: &[String]) -> Vec<String> {
    let (eq, zero_col) = equilibrated_gram(x);
    if !zero_col.iter().any(|z| *z) && pivots_ok(eq.clone()) {
        return Vec::new();
    }
    let p = x.ncols();
    let mut kept: Vec<usize> = Vec::new();
    let mut collinear = Vec::new();
    for j in 0..p {
        let name = || labels.get(j).cloned().unwrap_or_else(|| format!("col{j}"));
        if zero_col[j] {
            collinear.push(name());
            continue;
        }
        let mut trial = kept.clone();
        trial.push(j);
        let sub = DMatrix::from_fn(trial.len(), trial.len(), |r, c| eq[(trial[r], trial[c])]);
        if pivots_ok(sub) {
            kept.push(j);
        } else {
            collinear.push(name());
        }
    }
    if collinear.is_empty() {
        collinear.push("unidentified".into());
    }
    collinear
}

/// Collinear-column report for the error path (never empty).
pub fn detect_collinear(x: &DMatrix<f64>, labels: &[String]) -> Vec<String> {
    let found = collinear_columns(x, labels);
    if found.is_empty() {
        vec!["unidentified".into()]
    } else {
        found
    }
}

/// Weighted ordinary least squares (no random intercept), sharing the exact
/// accumulation order of the mixed-model path. Returns the coefficient
/// vector, the maximum-likelihood residual variance, and the coefficient
/// covariance.
pub fn weighted_ols(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &[f64],
    labels: &[String],
) -> Result<(DVector<f64>, f64, DMatrix<f64>)> {
    let bad = collinear_columns(x, labels);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    let groups = vec![0usize; y.len()];
    let blocks = precompute(y, x, &groups, w, 1);
    let ev = profile_eval(&blocks, 0.0, w).ok_or_else(|| Error::RankDeficient {
        columns: detect_collinear(x, labels),
    })?;
    let n = y.len() as f64;
    let sigma2_ml = ev.rss.max(0.0) / n;
    let p_eye = DMatrix::identity(x.ncols(), x.ncols());
    let vcov = ev.chol.solve(&p_eye) * sigma2_ml;
    Ok((ev.beta, sigma2_ml, vcov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn labels(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    /// Simulate y = X b + u_group + e with the given SDs.
    fn simulate(
        n: usize,
        n_groups: usize,
        beta: &[f64],
        sigma_u: f64,
        sigma_eps: f64,
        seed: u64,
    ) -> (DVector<f64>, DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let p = beta.len();
        let mut x = DMatrix::zeros(n, p);
        let mut groups = Vec::with_capacity(n);
        let u: Vec<f64> = (0..n_groups)
            .map(|_| sigma_u * norm.sample(&mut rng))
            .collect();
        let mut y = DVector::zeros(n);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for j in 1..p {
                x[(i, j)] = norm.sample(&mut rng);
            }
            let g = i % n_groups;
            groups.push(g);
            let mean: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
            y[i] = mean + u[g] + sigma_eps * norm.sample(&mut rng);
        }
        (y, x, groups)
    }

    #[test]
    fn collapses_to_wls_when_variance_is_absent() {
        let (y, x, groups) = simulate(300, 10, &[2.0, -1.0, 0.5], 0.0, 1.0, 42);
        let w: Vec<f64> = (0..300).map(|i| 0.5 + (i % 4) as f64 * 0.5).collect();
        let fit = fit(&y, &x, &groups, 10, &w, FitCriterion::Reml, &labels(3)).unwrap();
        let (beta_wls, _, _) = weighted_ols(&y, &x, &w, &labels(3)).unwrap();
        if fit.singular {
            for j in 0..3 {
                assert_abs_diff_eq!(fit.beta[j], beta_wls[j], epsilon = 1e-8);
            }
        } else {
            // A near-boundary fit must still agree closely.
            assert!(fit.theta < 0.2, "theta = {}", fit.theta);
            for j in 0..3 {
                assert_abs_diff_eq!(fit.beta[j], beta_wls[j], epsilon = 2e-2);
            }
        }
    }

    #[test]
    fn recovers_variance_components() {
        let (y, x, groups) = simulate(2000, 20, &[1.0, 2.0, -3.0, 0.0], 1.0, 2.0, 7);
        let w = vec![1.0; 2000];
        let fit = fit(&y, &x, &groups, 20, &w, FitCriterion::Reml, &labels(4)).unwrap();
        assert!(
            (fit.sigma_u - 1.0).abs() < 0.5,
            "sigma_u = {}",
            fit.sigma_u
        );
        assert!(
            (fit.sigma_eps - 2.0).abs() / 2.0 < 0.1,
            "sigma_eps = {}",
            fit.sigma_eps
        );
        for (j, b) in [1.0, 2.0, -3.0, 0.0].iter().enumerate() {
            let se = fit.vcov_beta[(j, j)].sqrt();
            assert!((fit.beta[j] - b).abs() < 3.0 * se.max(0.05));
        }
    }

    #[test]
    fn criterion_trace_is_monotone() {
        let (y, x, groups) = simulate(400, 8, &[1.0, 0.5], 0.8, 1.0, 3);
        let w = vec![1.0; 400];
        let fit = fit(&y, &x, &groups, 8, &w, FitCriterion::Reml, &labels(2)).unwrap();
        assert!(fit.fit_log.len() > 1);
        for pair in fit.fit_log.windows(2) {
            assert!(pair[1].1 <= pair[0].1);
        }
    }

    #[test]
    fn weight_scaling_is_absorbed() {
        let (y, x, groups) = simulate(500, 10, &[1.0, -2.0], 1.0, 1.5, 11);
        let w1 = vec![1.0; 500];
        let w3: Vec<f64> = w1.iter().map(|v| v * 3.0).collect();
        let f1 = fit(&y, &x, &groups, 10, &w1, FitCriterion::Reml, &labels(2)).unwrap();
        let f3 = fit(&y, &x, &groups, 10, &w3, FitCriterion::Reml, &labels(2)).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(f1.beta[j], f3.beta[j], epsilon = 1e-6);
        }
        // Tripling the weights rescales theta by sqrt(3) and sigma_eps by
        // 1/sqrt(3); sigma_u is invariant.
        assert_abs_diff_eq!(f1.sigma_u, f3.sigma_u, epsilon = 1e-4);
    }

    #[test]
    fn group_relabeling_leaves_beta_unchanged() {
        let (y, x, groups) = simulate(300, 6, &[1.0, 0.7], 0.9, 1.0, 5);
        let w = vec![1.0; 300];
        let f1 = fit(&y, &x, &groups, 6, &w, FitCriterion::Reml, &labels(2)).unwrap();
        let perm = [3usize, 5, 0, 2, 4, 1];
        let relabeled: Vec<usize> = groups.iter().map(|&g| perm[g]).collect();
        let f2 = fit(&y, &x, &relabeled, 6, &w, FitCriterion::Reml, &labels(2)).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(f1.beta[j], f2.beta[j], epsilon = 1e-9);
        }
        for g in 0..6 {
            assert_abs_diff_eq!(f1.u_hat[g], f2.u_hat[perm[g]], epsilon = 1e-9);
        }
    }

    #[test]
    fn rank_deficiency_names_the_duplicate_column() {
        let n = 50;
        let mut x = DMatrix::zeros(n, 3);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = i as f64;
            x[(i, 2)] = 2.0 * i as f64; // collinear with column 1
            y[i] = i as f64;
        }
        let groups = vec![0usize; n];
        let err = fit(
            &y,
            &x,
            &groups,
            1,
            &vec![1.0; n],
            FitCriterion::Reml,
            &["intercept".into(), "a".into(), "twice_a".into()],
        )
        .unwrap_err();
        match err {
            Error::RankDeficient { columns } => {
                assert_eq!(columns, vec!["twice_a".to_string()])
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ml_and_reml_differ_in_dof_only_at_theta_zero() {
        let (y, x, _) = simulate(100, 1, &[4.0, 1.5], 0.0, 1.0, 9);
        let groups = vec![0usize; 100];
        let w = vec![1.0; 100];
        let ml = fit(&y, &x, &groups, 1, &w, FitCriterion::Ml, &labels(2)).unwrap();
        let reml = fit(&y, &x, &groups, 1, &w, FitCriterion::Reml, &labels(2)).unwrap();
        assert!(ml.singular && reml.singular);
        let ratio = (ml.sigma_eps / reml.sigma_eps).powi(2);
        assert_abs_diff_eq!(ratio, (100.0 - 2.0) / 100.0, epsilon = 1e-9);
    }
}
