//! Covariate balance for the continuous commuting-time exposure: propensity
//! models (pooled, fixed-effect, random-effect), stabilized inverse
//! probability weights, entropy-balancing weights with an optional
//! multilevel correction, and the balance diagnostics.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::eb;
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::lmm::{self, FitCriterion};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Income {
    High,
    Middle,
    Low,
    Grant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsTrack {
    Scientific,
    Humanistic,
    Technical,
    Other,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Some(Gender::Male),
            "f" | "female" => Some(Gender::Female),
            _ => None,
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

impl Income {
    pub fn parse(s: &str) -> Option<Income> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Some(Income::High),
            "middle" => Some(Income::Middle),
            "low" => Some(Income::Low),
            "grant" => Some(Income::Grant),
            _ => None,
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            Income::High => "high",
            Income::Middle => "middle",
            Income::Low => "low",
            Income::Grant => "grant",
        }
    }
}

impl HsTrack {
    pub fn parse(s: &str) -> Option<HsTrack> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scientific" => Some(HsTrack::Scientific),
            "humanistic" => Some(HsTrack::Humanistic),
            "technical" => Some(HsTrack::Technical),
            "other" => Some(HsTrack::Other),
            _ => None,
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            HsTrack::Scientific => "scientific",
            HsTrack::Humanistic => "humanistic",
            HsTrack::Technical => "technical",
            HsTrack::Other => "other",
        }
    }
}

/// One student: covariates, treatment (commuting hours), and outcomes.
/// `gpa` is present exactly when the student passed at least one exam.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentRecord {
    pub student_id: String,
    pub gender: Gender,
    /// Years above 18 at admission.
    pub admission_age: f64,
    pub income: Income,
    /// Standardized final high-school grade in [0.6, 1].
    pub hs_grade: f64,
    pub hs_track: HsTrack,
    pub program_id: usize,
    /// Treatment: commuting time in hours.
    pub commute_hours: f64,
    /// Points above 18, in [0, 12]; present iff `passed_any`.
    pub gpa: Option<f64>,
    pub passed_any: bool,
    /// Home location in map coordinates, when known.
    pub home: Option<Point2<f64>>,
}

impl StudentRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.commute_hours >= 0.0 && self.commute_hours.is_finite()) {
            return Err(format!("commute_hours {} must be >= 0", self.commute_hours));
        }
        if !(0.6..=1.0).contains(&self.hs_grade) {
            return Err(format!("hs_grade {} outside [0.6, 1]", self.hs_grade));
        }
        if self.gpa.is_some() != self.passed_any {
            return Err("gpa must be present exactly when passed_any".into());
        }
        if let Some(g) = self.gpa {
            if !(0.0..=12.0).contains(&g) {
                return Err(format!("gpa {g} outside [0, 12]"));
            }
        }
        Ok(())
    }
}

/// Whether program dummies enter a design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncludeProgram {
    None,
    Dummies,
}

/// Sorted distinct program ids; the first is the dummy-coding base.
pub fn program_levels(records: &[StudentRecord]) -> Vec<usize> {
    let set: BTreeSet<usize> = records.iter().map(|r| r.program_id).collect();
    set.into_iter().collect()
}

/// Dummy-coded design matrix with an intercept. Baselines follow the
/// cohort description: male, high income, scientific track, and the lowest
/// program id when program dummies are requested.
pub fn design_matrix(
    records: &[StudentRecord],
    include_program: IncludeProgram,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    if records.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut labels: Vec<String> = vec![
        "intercept".into(),
        "gender_female".into(),
        "admission_age".into(),
        "income_middle".into(),
        "income_low".into(),
        "income_grant".into(),
        "hs_grade".into(),
        "track_humanistic".into(),
        "track_technical".into(),
        "track_other".into(),
    ];
    let programs = program_levels(records);
    let dummy_programs: &[usize] = match include_program {
        IncludeProgram::None => &[],
        IncludeProgram::Dummies => &programs[1..],
    };
    for pid in dummy_programs {
        labels.push(format!("program_{pid}"));
    }

    let p = labels.len();
    let mut x = DMatrix::zeros(records.len(), p);
    for (i, r) in records.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = if r.gender == Gender::Female { 1.0 } else { 0.0 };
        x[(i, 2)] = r.admission_age;
        x[(i, 3)] = if r.income == Income::Middle { 1.0 } else { 0.0 };
        x[(i, 4)] = if r.income == Income::Low { 1.0 } else { 0.0 };
        x[(i, 5)] = if r.income == Income::Grant { 1.0 } else { 0.0 };
        x[(i, 6)] = r.hs_grade;
        x[(i, 7)] = if r.hs_track == HsTrack::Humanistic { 1.0 } else { 0.0 };
        x[(i, 8)] = if r.hs_track == HsTrack::Technical { 1.0 } else { 0.0 };
        x[(i, 9)] = if r.hs_track == HsTrack::Other { 1.0 } else { 0.0 };
        for (j, pid) in dummy_programs.iter().enumerate() {
            x[(i, 10 + j)] = if r.program_id == *pid { 1.0 } else { 0.0 };
        }
    }
    Ok((x, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsModelMode {
    Glm,
    Fem,
    Rem,
}

/// Fitted conditional model of the treatment given covariates; supplies the
/// Gaussian conditional density behind inverse probability weights.
#[derive(Debug, Clone)]
pub struct GpsModel {
    pub mode: GpsModelMode,
    /// Coefficients of the covariate design (no program columns).
    pub gamma: DVector<f64>,
    pub labels: Vec<String>,
    /// Program levels aligned with `program_effects`; empty for `Glm`.
    pub program_ids: Vec<usize>,
    /// Fixed offsets (Fem, base program at zero) or predicted intercepts (Rem).
    pub program_effects: Vec<f64>,
    /// Maximum-likelihood residual SD (hours).
    pub sigma_eps: f64,
    /// Program-intercept SD, `Rem` only.
    pub sigma_z: Option<f64>,
}

impl GpsModel {
    /// Conditional mean of the treatment for each record, including the
    /// program effect where the model has one.
    pub fn conditional_means(&self, records: &[StudentRecord]) -> Result<Vec<f64>> {
        let (x, _) = design_matrix(records, IncludeProgram::None)?;
        let mut means = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let mut m = 0.0;
            for j in 0..self.gamma.len() {
                m += x[(i, j)] * self.gamma[j];
            }
            if !self.program_ids.is_empty() {
                let idx = self
                    .program_ids
                    .iter()
                    .position(|pid| *pid == r.program_id)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "record {} references program {} unseen at fit time",
                            r.student_id, r.program_id
                        ))
                    })?;
                m += self.program_effects[idx];
            }
            means.push(m);
        }
        Ok(means)
    }
}

fn treatment_vector(records: &[StudentRecord]) -> DVector<f64> {
    DVector::from_iterator(records.len(), records.iter().map(|r| r.commute_hours))
}

/// Fit the conditional treatment model. Residual SD is maximum likelihood
/// (divide by n) so stabilized density ratios are internally consistent.
pub fn fit_gps_model(records: &[StudentRecord], mode: GpsModelMode) -> Result<GpsModel> {
    let a = treatment_vector(records);
    let n = records.len();
    let uniform = vec![1.0; n];

    match mode {
        GpsModelMode::Glm => {
            let (x, labels) = design_matrix(records, IncludeProgram::None)?;
            check_size(n, x.ncols())?;
            let (gamma, sigma2, _) = lmm::weighted_ols(&a, &x, &uniform, &labels)?;
            Ok(GpsModel {
                mode,
                gamma,
                labels,
                program_ids: Vec::new(),
                program_effects: Vec::new(),
                sigma_eps: sigma2.sqrt(),
                sigma_z: None,
            })
        }
        GpsModelMode::Fem => {
            let (x, labels) = design_matrix(records, IncludeProgram::Dummies)?;
            check_size(n, x.ncols())?;
            let (coef, sigma2, _) = lmm::weighted_ols(&a, &x, &uniform, &labels)?;
            let programs = program_levels(records);
            let p_base = labels.len() - (programs.len() - 1);
            let gamma = DVector::from_iterator(p_base, coef.iter().take(p_base).copied());
            let mut effects = vec![0.0];
            effects.extend(coef.iter().skip(p_base).copied());
            Ok(GpsModel {
                mode,
                gamma,
                labels: labels[..p_base].to_vec(),
                program_ids: programs,
                program_effects: effects,
                sigma_eps: sigma2.sqrt(),
                sigma_z: None,
            })
        }
        GpsModelMode::Rem => {
            let programs = program_levels(records);
            if programs.len() < 2 {
                return Err(Error::InvalidInput(
                    "random-effect treatment model needs at least 2 programs".into(),
                ));
            }
            let (x, labels) = design_matrix(records, IncludeProgram::None)?;
            check_size(n, x.ncols())?;
            let groups: Vec<usize> = records
                .iter()
                .map(|r| programs.binary_search(&r.program_id).expect("level present"))
                .collect();
            let fit = lmm::fit(
                &a,
                &x,
                &groups,
                programs.len(),
                &uniform,
                FitCriterion::Ml,
                &labels,
            )?;
            Ok(GpsModel {
                mode,
                gamma: fit.beta,
                labels,
                program_ids: programs,
                program_effects: fit.u_hat,
                sigma_eps: fit.sigma_eps,
                sigma_z: Some(fit.sigma_u),
            })
        }
    }
}

fn check_size(n: usize, p: usize) -> Result<()> {
    if n <= p {
        return Err(Error::FitFailed(format!(
            "need more students ({n}) than design columns ({p})"
        )));
    }
    Ok(())
}

/// Marginal Normal fit of the treatment by maximum likelihood, computed
/// through the same least-squares path as an intercept-only conditional
/// model so the stabilized self-ratio is exactly one.
pub fn marginal_treatment_fit(records: &[StudentRecord]) -> Result<(f64, f64)> {
    let a = treatment_vector(records);
    let n = records.len();
    let x = DMatrix::from_element(n, 1, 1.0);
    let (beta, sigma2, _) = lmm::weighted_ols(&a, &x, &vec![1.0; n], &["intercept".into()])?;
    Ok((beta[0], sigma2.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMethod {
    Uniform,
    Glm,
    Fem,
    Rem,
    Eb,
    EbMl,
}

impl WeightMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            WeightMethod::Uniform => "uniform",
            WeightMethod::Glm => "glm",
            WeightMethod::Fem => "fem",
            WeightMethod::Rem => "rem",
            WeightMethod::Eb => "eb",
            WeightMethod::EbMl => "eb_ml",
        }
    }

    pub fn parse(s: &str) -> Option<WeightMethod> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "no" | "none" => Some(WeightMethod::Uniform),
            "glm" => Some(WeightMethod::Glm),
            "fem" => Some(WeightMethod::Fem),
            "rem" => Some(WeightMethod::Rem),
            "eb" => Some(WeightMethod::Eb),
            "eb_ml" | "ebml" => Some(WeightMethod::EbMl),
            _ => None,
        }
    }
}

/// Per-student balancing weights, rescaled to sum to the sample size.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub method: WeightMethod,
    pub w: Vec<f64>,
}

impl WeightVector {
    pub fn new(method: WeightMethod, raw: Vec<f64>) -> Result<Self> {
        let n = raw.len();
        if n == 0 {
            return Err(Error::EmptySamples);
        }
        if raw.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(
                "weights must be positive and finite".into(),
            ));
        }
        let total: f64 = raw.iter().sum();
        let scale = n as f64 / total;
        let w: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        Ok(WeightVector { method, w })
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector {
            method: WeightMethod::Uniform,
            w: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn ess(&self) -> f64 {
        stats::effective_sample_size(&self.w)
    }

    /// Optional tail trimming: weights above the given percentile are
    /// clamped to it and the vector renormalized. Off by default.
    pub fn trimmed(&self, percentile: f64) -> Result<WeightVector> {
        let cap = stats::weighted_quantile(&self.w, &vec![1.0; self.w.len()], percentile);
        let raw: Vec<f64> = self.w.iter().map(|v| v.min(cap)).collect();
        WeightVector::new(self.method, raw)
    }
}

/// Stabilized (default) or plain inverse-probability weights from a fitted
/// conditional model.
pub fn ipw_weights(
    model: &GpsModel,
    records: &[StudentRecord],
    stabilized: bool,
) -> Result<WeightVector> {
    let means = model.conditional_means(records)?;
    let (m_mean, m_sd) = marginal_treatment_fit(records)?;
    let mut raw = Vec::with_capacity(records.len());
    for (r, cond_mean) in records.iter().zip(&means) {
        let dens = stats::normal_pdf(r.commute_hours, *cond_mean, model.sigma_eps);
        if dens == 0.0 || !dens.is_finite() {
            return Err(Error::ZeroDensity {
                student_id: r.student_id.clone(),
            });
        }
        let num = if stabilized {
            stats::normal_pdf(r.commute_hours, m_mean, m_sd)
        } else {
            1.0
        };
        raw.push(num / dens);
    }
    let method = match model.mode {
        GpsModelMode::Glm => WeightMethod::Glm,
        GpsModelMode::Fem => WeightMethod::Fem,
        GpsModelMode::Rem => WeightMethod::Rem,
    };
    WeightVector::new(method, raw)
}

/// Which moment constraints the entropy solve enforces. The full set (all
/// true) reproduces the balance diagnostics directly: covariate means,
/// standardized-treatment mean and variance, zero treatment-covariate
/// covariance, and second-moment balance of the continuous covariates
/// (their variances are preserved and their squares decorrelated from the
/// treatment, the nonparametric-balancing extension of the first-moment
/// set).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomentSpec {
    pub covariate_means: bool,
    pub treatment_mean: bool,
    pub treatment_variance: bool,
    pub cross_covariance: bool,
    pub continuous_second_moments: bool,
}

impl Default for MomentSpec {
    fn default() -> Self {
        MomentSpec {
            covariate_means: true,
            treatment_mean: true,
            treatment_variance: true,
            cross_covariance: true,
            continuous_second_moments: true,
        }
    }
}

/// Design columns covered by second-moment balance. Admission age is
/// deliberately excluded: it is integer-valued with a long right tail, and
/// a quadratic constraint on it turns infeasible on small samples whenever
/// the handful of extreme ages falls on one side of the treatment mean.
const CONTINUOUS_COLUMNS: [&str; 1] = ["hs_grade"];

/// Entropy-balancing weights; `multilevel` adds the program dummies to the
/// constrained covariate set.
pub fn eb_weights(
    records: &[StudentRecord],
    moments: &MomentSpec,
    multilevel: bool,
) -> Result<WeightVector> {
    let include = if multilevel {
        IncludeProgram::Dummies
    } else {
        IncludeProgram::None
    };
    let (x, labels) = design_matrix(records, include)?;
    let n = records.len();
    let uniform = vec![1.0; n];

    let a: Vec<f64> = records.iter().map(|r| r.commute_hours).collect();
    let a_mean = stats::weighted_mean(&a, &uniform);
    let a_sd = stats::weighted_sd(&a, &uniform);
    if a_sd <= 0.0 {
        return Err(Error::InvalidInput(
            "treatment has zero variance; balancing is undefined".into(),
        ));
    }
    let s: Vec<f64> = a.iter().map(|ai| (ai - a_mean) / a_sd).collect();

    let col_means: Vec<f64> = (1..x.ncols())
        .map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64)
        .collect();

    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    if moments.covariate_means {
        for j in 1..x.ncols() {
            let g: Vec<f64> = (0..n).map(|i| x[(i, j)] - col_means[j - 1]).collect();
            cols.push((format!("mean_{}", labels[j]), g));
        }
    }
    if moments.treatment_mean {
        cols.push(("treatment_mean".into(), s.clone()));
    }
    if moments.treatment_variance {
        cols.push((
            "treatment_variance".into(),
            s.iter().map(|si| si * si - 1.0).collect(),
        ));
    }
    if moments.cross_covariance {
        for j in 1..x.ncols() {
            let g: Vec<f64> = (0..n)
                .map(|i| s[i] * (x[(i, j)] - col_means[j - 1]))
                .collect();
            cols.push((format!("cov_treatment_{}", labels[j]), g));
        }
    }
    if moments.continuous_second_moments {
        for j in 1..x.ncols() {
            if !CONTINUOUS_COLUMNS.contains(&labels[j].as_str()) {
                continue;
            }
            let centered_sq: Vec<f64> = (0..n)
                .map(|i| {
                    let d = x[(i, j)] - col_means[j - 1];
                    d * d
                })
                .collect();
            let var_j: f64 = centered_sq.iter().sum::<f64>() / n as f64;
            // Preserve the covariate's variance...
            cols.push((
                format!("var_{}", labels[j]),
                centered_sq.iter().map(|v| v - var_j).collect(),
            ));
            // ...and decorrelate its square from the treatment.
            cols.push((
                format!("cov_treatment_{}_sq", labels[j]),
                (0..n).map(|i| s[i] * (centered_sq[i] - var_j)).collect(),
            ));
        }
    }

    // Identically-zero constraint functions are trivially satisfied; drop
    // them so the Newton system stays well posed.
    cols.retain(|(_, g)| g.iter().any(|v| *v != 0.0));

    let k = cols.len();
    let g = DMatrix::from_fn(n, k, |i, j| cols[j].1[i]);
    let names: Vec<String> = cols.iter().map(|(name, _)| name.clone()).collect();
    let sol = eb::solve(&g, &names, eb::DEFAULT_TOL, eb::DEFAULT_MAX_ITER)?;

    let method = if multilevel {
        WeightMethod::EbMl
    } else {
        WeightMethod::Eb
    };
    WeightVector::new(method, sol.p.iter().map(|pi| pi * n as f64).collect())
}

/// One correlation row of the diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrRow {
    /// Variable group, e.g. `FamilyIncome`.
    pub variable: String,
    /// Design column, e.g. `income_low`.
    pub column: String,
    pub rho: f64,
    pub zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalContinuous {
    pub variable: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalProportion {
    pub variable: String,
    pub level: String,
    pub proportion: f64,
}

/// Weighted balance diagnostics: treatment-covariate correlations (per
/// column and the max-|rho| per variable), marginal summaries, and the
/// effective sample size.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub method: WeightMethod,
    pub correlations: Vec<CorrRow>,
    /// Max |rho| per variable group, the single-cell-per-variable view.
    pub variable_max: Vec<(String, f64)>,
    pub continuous: Vec<MarginalContinuous>,
    pub proportions: Vec<MarginalProportion>,
    pub ess: f64,
}

fn variable_group(column: &str) -> String {
    match column {
        "gender_female" => "Gender".into(),
        "admission_age" => "AdmissionAge".into(),
        c if c.starts_with("income_") => "FamilyIncome".into(),
        "hs_grade" => "HighSchoolGrade".into(),
        c if c.starts_with("track_") => "HighSchoolTrack".into(),
        c if c.starts_with("program_") => "BachelorProgram".into(),
        other => other.into(),
    }
}

pub fn balance_report(records: &[StudentRecord], weights: &WeightVector) -> Result<BalanceReport> {
    if records.len() != weights.len() {
        return Err(Error::InvalidInput(
            "weights and records must be the same length".into(),
        ));
    }
    let (x, labels) = design_matrix(records, IncludeProgram::Dummies)?;
    let n = records.len();
    let w = &weights.w;
    let a: Vec<f64> = records.iter().map(|r| r.commute_hours).collect();

    let mut correlations = Vec::new();
    for j in 1..x.ncols() {
        let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        let (rho, zero_variance) = match stats::weighted_pearson(&a, &col, w) {
            Some(r) => (r, false),
            None => (0.0, true),
        };
        correlations.push(CorrRow {
            variable: variable_group(&labels[j]),
            column: labels[j].clone(),
            rho,
            zero_variance,
        });
    }

    let mut variable_max: Vec<(String, f64)> = Vec::new();
    for row in &correlations {
        match variable_max.iter_mut().find(|(v, _)| *v == row.variable) {
            Some((_, m)) => {
                if row.rho.abs() > m.abs() {
                    *m = row.rho;
                }
            }
            None => variable_max.push((row.variable.clone(), row.rho)),
        }
    }

    let age: Vec<f64> = records.iter().map(|r| r.admission_age).collect();
    let grade: Vec<f64> = records.iter().map(|r| r.hs_grade).collect();
    let continuous = vec![
        MarginalContinuous {
            variable: "AdmissionAge".into(),
            mean: stats::weighted_mean(&age, w),
            sd: stats::weighted_sd(&age, w),
        },
        MarginalContinuous {
            variable: "HighSchoolGrade".into(),
            mean: stats::weighted_mean(&grade, w),
            sd: stats::weighted_sd(&grade, w),
        },
        MarginalContinuous {
            variable: "CommuteHours".into(),
            mean: stats::weighted_mean(&a, w),
            sd: stats::weighted_sd(&a, w),
        },
    ];

    let total_w: f64 = w.iter().sum();
    let mut proportions = Vec::new();
    let mut prop = |variable: &str, level: &str, pred: &dyn Fn(&StudentRecord) -> bool| {
        let mass: f64 = records
            .iter()
            .zip(w)
            .filter(|(r, _)| pred(r))
            .map(|(_, wi)| *wi)
            .sum();
        proportions.push(MarginalProportion {
            variable: variable.into(),
            level: level.into(),
            proportion: mass / total_w,
        });
    };
    prop("Gender", "female", &|r| r.gender == Gender::Female);
    for income in [Income::High, Income::Middle, Income::Low, Income::Grant] {
        prop("FamilyIncome", income.as_str(), &|r| r.income == income);
    }
    for track in [
        HsTrack::Humanistic,
        HsTrack::Scientific,
        HsTrack::Technical,
        HsTrack::Other,
    ] {
        prop("HighSchoolTrack", track.as_str(), &|r| r.hs_track == track);
    }

    Ok(BalanceReport {
        method: weights.method,
        correlations,
        variable_max,
        continuous,
        proportions,
        ess: weights.ess(),
    })
}

impl BalanceReport {
    /// Flat CSV mirroring the three diagnostic tables: correlation rows,
    /// marginal statistics, and the effective sample size.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "section,variable,statistic,value,flag")?;
        for row in &self.correlations {
            writeln!(
                w,
                "correlation,{},rho_{},{},{}",
                row.variable,
                row.column,
                row.rho,
                if row.zero_variance { "zero_variance" } else { "" }
            )?;
        }
        for (variable, rho) in &self.variable_max {
            writeln!(w, "correlation_max,{variable},rho,{rho},")?;
        }
        for c in &self.continuous {
            writeln!(w, "marginal,{},mean,{},", c.variable, c.mean)?;
            writeln!(w, "marginal,{},sd,{},", c.variable, c.sd)?;
        }
        for p in &self.proportions {
            writeln!(
                w,
                "marginal,{},proportion_{},{},",
                p.variable, p.level, p.proportion
            )?;
        }
        writeln!(w, "ess,,ess,{},", self.ess)?;
        Ok(())
    }
}

pub const STUDENTS_CSV_HEADER: &str =
    "student_id,gender,admission_age,income,hs_grade,hs_track,program_id,commute_hours,gpa,passed_any";
pub const STUDENTS_CSV_HEADER_WITH_HOME: &str =
    "student_id,gender,admission_age,income,hs_grade,hs_track,program_id,commute_hours,gpa,passed_any,home_x1,home_x2";

/// Raw student row: commuting time may be deferred to a map lookup, in
/// which case the home location must be present.
#[derive(Debug, Clone)]
pub struct StudentRow {
    pub record: StudentRecord,
    pub commute_known: bool,
}

pub fn write_students_csv(w: &mut impl Write, records: &[StudentRecord]) -> std::io::Result<()> {
    let with_home = records.iter().any(|r| r.home.is_some());
    if with_home {
        writeln!(w, "{STUDENTS_CSV_HEADER_WITH_HOME}")?;
    } else {
        writeln!(w, "{STUDENTS_CSV_HEADER}")?;
    }
    for r in records {
        let gpa = r.gpa.map(|g| g.to_string()).unwrap_or_default();
        write!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.student_id,
            r.gender.as_str(),
            r.admission_age,
            r.income.as_str(),
            r.hs_grade,
            r.hs_track.as_str(),
            r.program_id,
            r.commute_hours,
            gpa,
            u8::from(r.passed_any)
        )?;
        if with_home {
            match r.home {
                Some(h) => write!(w, ",{},{}", h.x1, h.x2)?,
                None => write!(w, ",,")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_students_csv(path: impl AsRef<Path>) -> Result<Vec<StudentRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_students_reader(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn read_students_reader(reader: impl BufRead, label: &str) -> Result<Vec<StudentRow>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => {
            return Err(Error::BadHeader {
                path: label.into(),
                expected: STUDENTS_CSV_HEADER.into(),
                found: String::new(),
            })
        }
    };
    let with_home = match header.trim() {
        h if h == STUDENTS_CSV_HEADER => false,
        h if h == STUDENTS_CSV_HEADER_WITH_HOME => true,
        other => {
            return Err(Error::BadHeader {
                path: label.into(),
                expected: STUDENTS_CSV_HEADER.into(),
                found: other.into(),
            })
        }
    };
    let want = if with_home { 12 } else { 10 };

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(label.to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx as u64 + 1;
        let bad = |message: String| Error::BadRecord {
            path: label.into(),
            line: lineno,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != want {
            return Err(bad(format!("expected {want} fields, found {}", f.len())));
        }
        let gender =
            Gender::parse(f[1]).ok_or_else(|| bad(format!("unknown gender level `{}`", f[1])))?;
        let income =
            Income::parse(f[3]).ok_or_else(|| bad(format!("unknown income level `{}`", f[3])))?;
        let hs_track =
            HsTrack::parse(f[5]).ok_or_else(|| bad(format!("unknown track level `{}`", f[5])))?;
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| bad(format!("bad {what} `{s}`")))
        };
        let admission_age = parse_f64(f[2], "admission_age")?;
        let hs_grade = parse_f64(f[4], "hs_grade")?;
        let program_id: usize = f[6]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad program_id `{}`", f[6])))?;
        let commute_known = !f[7].trim().is_empty();
        let commute_hours = if commute_known {
            parse_f64(f[7], "commute_hours")?
        } else {
            0.0
        };
        let gpa = if f[8].trim().is_empty() {
            None
        } else {
            Some(parse_f64(f[8], "gpa")?)
        };
        let passed_any = match f[9].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("bad passed_any `{other}`"))),
        };
        let home = if with_home && !f[10].trim().is_empty() {
            Some(Point2::new(
                parse_f64(f[10], "home_x1")?,
                parse_f64(f[11], "home_x2")?,
            ))
        } else {
            None
        };

        let record = StudentRecord {
            student_id: f[0].to_string(),
            gender,
            admission_age,
            income,
            hs_grade,
            hs_track,
            program_id,
            commute_hours,
            gpa,
            passed_any,
            home,
        };
        if commute_known {
            record.validate().map_err(bad)?;
        } else if record.home.is_none() {
            return Err(bad(
                "commute_hours empty and no home coordinates to fill it from".into(),
            ));
        }
        rows.push(StudentRow {
            record,
            commute_known,
        });
    }
    Ok(rows)
}

pub const WEIGHTS_CSV_HEADER: &str = "student_id,method,weight";

pub fn write_weights_csv(
    w: &mut impl Write,
    records: &[StudentRecord],
    weights: &WeightVector,
) -> std::io::Result<()> {
    writeln!(w, "{WEIGHTS_CSV_HEADER}")?;
    for (r, wi) in records.iter().zip(&weights.w) {
        writeln!(w, "{},{},{}", r.student_id, weights.method.tag(), wi)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn student(id: usize, commute: f64) -> StudentRecord {
        StudentRecord {
            student_id: format!("s{id:04}"),
            gender: Gender::Male,
            admission_age: 0.0,
            income: Income::High,
            hs_grade: 0.8,
            hs_track: HsTrack::Scientific,
            program_id: 1,
            commute_hours: commute,
            gpa: Some(6.0),
            passed_any: true,
            home: None,
        }
    }

    fn synthetic_cohort(n: usize, seed: u64, confounded: bool) -> Vec<StudentRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = Normal::<f64>::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let female = rng.random::<f64>() < 0.27;
                let age = (norm.sample(&mut rng) * 1.1 + 0.57).clamp(-1.0, 14.0);
                let income = match rng.random::<f64>() {
                    u if u < 0.55 => Income::High,
                    u if u < 0.74 => Income::Middle,
                    u if u < 0.82 => Income::Low,
                    _ => Income::Grant,
                };
                let grade: f64 = (0.82 + 0.11 * norm.sample(&mut rng)).clamp(0.6, 1.0);
                let track = match rng.random::<f64>() {
                    u if u < 0.06 => HsTrack::Humanistic,
                    u if u < 0.94 => HsTrack::Scientific,
                    u if u < 0.99 => HsTrack::Technical,
                    _ => HsTrack::Other,
                };
                let program_id = 1 + (i % 5);
                let mut commute = 0.4 + 0.15 * norm.sample(&mut rng);
                if confounded {
                    // Income drives commuting time.
                    commute += match income {
                        Income::High => -0.12,
                        Income::Middle => 0.0,
                        Income::Low => 0.10,
                        Income::Grant => 0.14,
                    };
                    commute += 0.05 * f64::from(female as u8 as f32);
                }
                StudentRecord {
                    student_id: format!("s{i:05}"),
                    gender: if female { Gender::Female } else { Gender::Male },
                    admission_age: age,
                    income,
                    hs_grade: grade,
                    hs_track: track,
                    program_id,
                    commute_hours: commute.max(0.0),
                    gpa: Some(6.0),
                    passed_any: true,
                    home: None,
                }
            })
            .collect()
    }

    #[test]
    fn design_layout_contract() {
        let mut r = student(1, 0.4);
        r.gender = Gender::Female;
        r.admission_age = 2.0;
        r.income = Income::Low;
        r.hs_grade = 0.9;
        r.hs_track = HsTrack::Technical;
        let (x, labels) = design_matrix(&[r], IncludeProgram::None).unwrap();
        assert_eq!(
            labels,
            vec![
                "intercept",
                "gender_female",
                "admission_age",
                "income_middle",
                "income_low",
                "income_grant",
                "hs_grade",
                "track_humanistic",
                "track_technical",
                "track_other"
            ]
        );
        let row: Vec<f64> = (0..x.ncols()).map(|j| x[(0, j)]).collect();
        assert_eq!(row, vec![1.0, 1.0, 2.0, 0.0, 1.0, 0.0, 0.9, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_baseline_record_has_zero_dummies() {
        let (x, _) = design_matrix(&[student(1, 0.4)], IncludeProgram::None).unwrap();
        for j in [1usize, 3, 4, 5, 7, 8, 9] {
            assert_eq!(x[(0, j)], 0.0);
        }
    }

    #[test]
    fn ten_record_fixture_matches_hand_encoding() {
        let mut records = Vec::new();
        for i in 0..10 {
            let mut r = student(i, 0.3);
            r.program_id = 1 + (i % 3);
            r.gender = if i % 2 == 0 { Gender::Female } else { Gender::Male };
            r.income = [Income::High, Income::Middle, Income::Low, Income::Grant][i % 4];
            r.hs_track = [
                HsTrack::Scientific,
                HsTrack::Humanistic,
                HsTrack::Technical,
                HsTrack::Other,
            ][i % 4];
            records.push(r);
        }
        let (x, labels) = design_matrix(&records, IncludeProgram::Dummies).unwrap();
        assert_eq!(labels.len(), 12); // 10 base + programs 2, 3
        assert_eq!(labels[10], "program_2");
        assert_eq!(labels[11], "program_3");
        for (i, r) in records.iter().enumerate() {
            assert_eq!(x[(i, 1)], f64::from(r.gender == Gender::Female));
            assert_eq!(x[(i, 3)], f64::from(r.income == Income::Middle));
            assert_eq!(x[(i, 4)], f64::from(r.income == Income::Low));
            assert_eq!(x[(i, 5)], f64::from(r.income == Income::Grant));
            assert_eq!(x[(i, 7)], f64::from(r.hs_track == HsTrack::Humanistic));
            assert_eq!(x[(i, 10)], f64::from(r.program_id == 2));
            assert_eq!(x[(i, 11)], f64::from(r.program_id == 3));
        }
    }

    #[test]
    fn independent_treatment_gives_null_slopes() {
        let records = synthetic_cohort(5000, 11, false);
        let model = fit_gps_model(&records, GpsModelMode::Glm).unwrap();
        // Slopes should sit within 3 SEs of zero; compute SEs from an
        // explicit refit to keep this self-contained.
        let (x, labels) = design_matrix(&records, IncludeProgram::None).unwrap();
        let a = DVector::from_iterator(5000, records.iter().map(|r| r.commute_hours));
        let (_, _, vcov) = lmm::weighted_ols(&a, &x, &vec![1.0; 5000], &labels).unwrap();
        for j in 1..x.ncols() {
            let se = vcov[(j, j)].sqrt();
            assert!(
                model.gamma[j].abs() < 3.0 * se,
                "column {j} slope {} vs se {se}",
                model.gamma[j]
            );
        }
    }

    #[test]
    fn fem_recovers_a_shifted_program() {
        let mut records = synthetic_cohort(3000, 13, false);
        for r in &mut records {
            if r.program_id == 3 {
                r.commute_hours += 0.2;
            }
        }
        let model = fit_gps_model(&records, GpsModelMode::Fem).unwrap();
        let idx = model.program_ids.iter().position(|p| *p == 3).unwrap();
        assert!(
            (model.program_effects[idx] - 0.2).abs() < 0.04,
            "effect {}",
            model.program_effects[idx]
        );
    }

    #[test]
    fn rem_boundary_variance_is_legal() {
        // No true program effect: the variance estimate may sit at zero.
        let records = synthetic_cohort(800, 17, false);
        let model = fit_gps_model(&records, GpsModelMode::Rem).unwrap();
        let sigma_z = model.sigma_z.unwrap();
        assert!(sigma_z >= 0.0 && sigma_z < 0.05, "sigma_z = {sigma_z}");
    }

    #[test]
    fn intercept_only_stabilized_weights_are_exactly_one() {
        let records = synthetic_cohort(400, 23, true);
        // Intercept-only conditional model built through the same code path
        // as the marginal fit.
        let (m, sd) = marginal_treatment_fit(&records).unwrap();
        let model = GpsModel {
            mode: GpsModelMode::Glm,
            gamma: DVector::from_vec(vec![m, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            labels: vec!["intercept".into()],
            program_ids: Vec::new(),
            program_effects: Vec::new(),
            sigma_eps: sd,
            sigma_z: None,
        };
        let w = ipw_weights(&model, &records, true).unwrap();
        for wi in &w.w {
            assert_eq!(*wi, 1.0);
        }
    }

    #[test]
    fn three_record_fixture_matches_closed_form_ratio() {
        let records = vec![student(1, 0.2), student(2, 0.5), student(3, 0.8)];
        // Hand-built conditional model with a distinct slope: densities
        // evaluated in closed form.
        let mut gamma = DVector::zeros(10);
        gamma[0] = 0.1;
        gamma[6] = 0.5; // hs_grade column, constant 0.8 here
        let model = GpsModel {
            mode: GpsModelMode::Glm,
            gamma,
            labels: vec!["x".into()],
            program_ids: Vec::new(),
            program_effects: Vec::new(),
            sigma_eps: 0.2,
            sigma_z: None,
        };
        let w = ipw_weights(&model, &records, true).unwrap();
        let (mm, ms) = marginal_treatment_fit(&records).unwrap();
        let cond_mean = 0.1 + 0.5 * 0.8;
        let raw: Vec<f64> = records
            .iter()
            .map(|r| {
                stats::normal_pdf(r.commute_hours, mm, ms)
                    / stats::normal_pdf(r.commute_hours, cond_mean, 0.2)
            })
            .collect();
        let scale = 3.0 / raw.iter().sum::<f64>();
        for (wi, ri) in w.w.iter().zip(&raw) {
            assert_abs_diff_eq!(*wi, ri * scale, epsilon = 1e-12);
        }
    }

    #[test]
    fn unstabilized_weights_are_inverse_densities_rescaled() {
        let records = synthetic_cohort(200, 31, true);
        let model = fit_gps_model(&records, GpsModelMode::Glm).unwrap();
        let w = ipw_weights(&model, &records, false).unwrap();
        let means = model.conditional_means(&records).unwrap();
        let raw: Vec<f64> = records
            .iter()
            .zip(&means)
            .map(|(r, m)| 1.0 / stats::normal_pdf(r.commute_hours, *m, model.sigma_eps))
            .collect();
        let scale = 200.0 / raw.iter().sum::<f64>();
        for (wi, ri) in w.w.iter().zip(&raw) {
            assert_abs_diff_eq!(*wi, ri * scale, epsilon = 1e-12);
        }
    }

    #[test]
    fn ipw_reduces_confounder_correlation() {
        let records = synthetic_cohort(4000, 29, true);
        let model = fit_gps_model(&records, GpsModelMode::Glm).unwrap();
        let w = ipw_weights(&model, &records, true).unwrap();

        let a: Vec<f64> = records.iter().map(|r| r.commute_hours).collect();
        let grant: Vec<f64> = records
            .iter()
            .map(|r| f64::from(r.income == Income::Grant))
            .collect();
        let ones = vec![1.0; records.len()];
        let before = stats::weighted_pearson(&a, &grant, &ones).unwrap().abs();
        let after = stats::weighted_pearson(&a, &grant, &w.w).unwrap().abs();
        assert!(
            after < before,
            "correlation did not shrink: {before} -> {after}"
        );
    }

    #[test]
    fn eb_on_balanced_data_returns_unit_weights() {
        // Treatment orthogonal to the single varying covariate in-sample.
        let mut records: Vec<StudentRecord> = Vec::new();
        for (i, (age, commute)) in [(1.0, 0.2), (1.0, 0.6), (-1.0, 0.2), (-1.0, 0.6)]
            .iter()
            .enumerate()
        {
            let mut r = student(i, *commute);
            r.admission_age = *age;
            records.push(r);
        }
        let w = eb_weights(&records, &MomentSpec::default(), false).unwrap();
        for wi in &w.w {
            assert_eq!(*wi, 1.0);
        }
    }

    #[test]
    fn eb_fixture_matches_independent_oracle() {
        // Four records, one scalar covariate; constraint set reduced to the
        // treatment mean and the cross moment so the feasible region has an
        // interior.
        let mut records: Vec<StudentRecord> = Vec::new();
        for (i, (age, commute)) in [(1.2, 0.1), (-0.4, 0.4), (0.8, 0.7), (-1.6, 0.3)]
            .iter()
            .enumerate()
        {
            let mut r = student(i, *commute);
            r.admission_age = *age;
            records.push(r);
        }
        let moments = MomentSpec {
            covariate_means: false,
            treatment_mean: true,
            treatment_variance: false,
            cross_covariance: true,
            continuous_second_moments: false,
        };
        let w = eb_weights(&records, &moments, false).unwrap();

        // Independent penalty-method oracle over the 3-simplex.
        let a: Vec<f64> = records.iter().map(|r| r.commute_hours).collect();
        let ones = vec![1.0; 4];
        let am = stats::weighted_mean(&a, &ones);
        let asd = stats::weighted_sd(&a, &ones);
        let s: Vec<f64> = a.iter().map(|ai| (ai - am) / asd).collect();
        let age: Vec<f64> = records.iter().map(|r| r.admission_age).collect();
        let age_m = stats::weighted_mean(&age, &ones);
        // Only the age cross moment (the other design columns are constant
        // and were dropped by the solver as identically zero).
        let steps = 300usize;
        let mut best = (f64::INFINITY, [0.25f64; 4]);
        for i1 in 0..=steps {
            for i2 in 0..=(steps - i1) {
                for i3 in 0..=(steps - i1 - i2) {
                    let p = [
                        i1 as f64 / steps as f64,
                        i2 as f64 / steps as f64,
                        i3 as f64 / steps as f64,
                        (steps - i1 - i2 - i3) as f64 / steps as f64,
                    ];
                    let r1: f64 = (0..4).map(|i| p[i] * s[i]).sum();
                    let r2: f64 = (0..4).map(|i| p[i] * s[i] * (age[i] - age_m)).sum();
                    if r1.abs().max(r2.abs()) > 0.004 {
                        continue;
                    }
                    let kl = eb::kl_from_uniform(&p);
                    if kl < best.0 {
                        best = (kl, p);
                    }
                }
            }
        }
        assert!(best.0.is_finite(), "oracle found no feasible grid point");
        for i in 0..4 {
            assert_abs_diff_eq!(w.w[i] / 4.0, best.1[i], epsilon = 0.02);
        }
    }

    #[test]
    fn eb_meets_residual_tolerance_and_beats_ipw_on_correlation() {
        let records = synthetic_cohort(600, 37, true);
        let w = eb_weights(&records, &MomentSpec::default(), false).unwrap();
        let report = balance_report(&records, &w).unwrap();
        for row in &report.correlations {
            if !row.zero_variance && !row.column.starts_with("program_") {
                assert!(
                    row.rho.abs() < 1e-6,
                    "column {} rho {}",
                    row.column,
                    row.rho
                );
            }
        }
        // This cohort is deliberately hard (about one SD of mean shift by
        // income); the weights must still keep a usable effective size.
        assert!(report.ess > 0.2 * records.len() as f64, "ess = {}", report.ess);
    }

    #[test]
    fn report_with_uniform_weights_is_bitwise_unweighted() {
        let records = synthetic_cohort(200, 41, true);
        let w = WeightVector::uniform(200);
        let report = balance_report(&records, &w).unwrap();

        let a: Vec<f64> = records.iter().map(|r| r.commute_hours).collect();
        let age: Vec<f64> = records.iter().map(|r| r.admission_age).collect();
        // Plain unweighted formulas in the same accumulation order.
        let n = 200.0;
        let mean = age.iter().sum::<f64>() / n;
        assert_eq!(report.continuous[0].mean, {
            let mut num = 0.0;
            let mut den = 0.0;
            for x in &age {
                num += 1.0 * *x;
                den += 1.0;
            }
            num / den
        });
        assert_eq!(report.ess, n);
        let _ = (a, mean);

        // Extreme concentration: one record carries all mass.
        let mut raw = vec![1e-12; 200];
        raw[7] = 1.0;
        let spike = WeightVector::new(WeightMethod::Glm, raw).unwrap();
        assert_abs_diff_eq!(stats::effective_sample_size(&spike.w), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn weighted_report_matches_a_second_aggregation_pass() {
        let records = synthetic_cohort(120, 61, true);
        let raw: Vec<f64> = (0..120).map(|i| 0.3 + (i % 5) as f64 * 0.45).collect();
        let wv = WeightVector::new(WeightMethod::Fem, raw).unwrap();
        let report = balance_report(&records, &wv).unwrap();

        // Independent recomputation of a correlation cell, a weighted
        // mean/SD pair, a proportion, and the effective size.
        let w = &wv.w;
        let total: f64 = w.iter().sum();
        let a: Vec<f64> = records.iter().map(|r| r.commute_hours).collect();
        let grade: Vec<f64> = records.iter().map(|r| r.hs_grade).collect();
        let mean = |xs: &[f64]| -> f64 {
            xs.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() / total
        };
        let (ma, mg) = (mean(&a), mean(&grade));
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for ((x, y), wi) in a.iter().zip(&grade).zip(w) {
            sxy += wi * (x - ma) * (y - mg);
            sxx += wi * (x - ma) * (x - ma);
            syy += wi * (y - mg) * (y - mg);
        }
        let rho = report
            .correlations
            .iter()
            .find(|r| r.column == "hs_grade")
            .unwrap()
            .rho;
        assert_abs_diff_eq!(rho, sxy / (sxx * syy).sqrt(), epsilon = 1e-12);

        let grade_row = report
            .continuous
            .iter()
            .find(|c| c.variable == "HighSchoolGrade")
            .unwrap();
        assert_abs_diff_eq!(grade_row.mean, mg, epsilon = 1e-12);
        assert_abs_diff_eq!(grade_row.sd, (syy / total).sqrt(), epsilon = 1e-12);

        let female_mass: f64 = records
            .iter()
            .zip(w)
            .filter(|(r, _)| r.gender == Gender::Female)
            .map(|(_, wi)| *wi)
            .sum();
        let female_row = report
            .proportions
            .iter()
            .find(|p| p.variable == "Gender")
            .unwrap();
        assert_abs_diff_eq!(female_row.proportion, female_mass / total, epsilon = 1e-12);

        let sum_sq: f64 = w.iter().map(|wi| wi * wi).sum();
        assert_abs_diff_eq!(report.ess, total * total / sum_sq, epsilon = 1e-9);
    }

    #[test]
    fn zero_variance_column_is_flagged() {
        // Every student female: the gender column has zero variance.
        let mut records = synthetic_cohort(50, 43, false);
        for r in &mut records {
            r.gender = Gender::Female;
        }
        let report = balance_report(&records, &WeightVector::uniform(50)).unwrap();
        let row = report
            .correlations
            .iter()
            .find(|r| r.column == "gender_female")
            .unwrap();
        assert!(row.zero_variance);
        assert_eq!(row.rho, 0.0);
    }

    #[test]
    fn nesting_with_one_program_makes_all_ipw_methods_agree() {
        let mut records = synthetic_cohort(300, 47, true);
        for r in &mut records {
            r.program_id = 1;
        }
        let glm = ipw_weights(&fit_gps_model(&records, GpsModelMode::Glm).unwrap(), &records, true)
            .unwrap();
        let fem = ipw_weights(&fit_gps_model(&records, GpsModelMode::Fem).unwrap(), &records, true)
            .unwrap();
        for (a, b) in glm.w.iter().zip(&fem.w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        // Rem needs two programs by contract.
        assert!(fit_gps_model(&records, GpsModelMode::Rem).is_err());
    }

    #[test]
    fn students_csv_roundtrip() {
        let mut records = synthetic_cohort(25, 53, true);
        records[3].gpa = None;
        records[3].passed_any = false;
        records[5].home = Some(Point2::new(1234.5, 6789.0));

        let mut buf = Vec::new();
        write_students_csv(&mut buf, &records).unwrap();
        let rows = read_students_reader(buf.as_slice(), "mem").unwrap();
        assert_eq!(rows.len(), 25);
        for (row, rec) in rows.iter().zip(&records) {
            assert_eq!(&row.record, rec);
            assert!(row.commute_known);
        }
    }

    #[test]
    fn unknown_income_level_is_rejected() {
        let data = format!(
            "{STUDENTS_CSV_HEADER}\ns1,M,0,royalty,0.8,scientific,1,0.5,6,1\n"
        );
        let err = read_students_reader(data.as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::BadRecord { .. }));
    }
}
