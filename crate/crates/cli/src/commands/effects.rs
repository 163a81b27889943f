//! `effects`: balancing weights, diagnostics, weighted outcome models, and
//! dose-response / marginal-effect curves for every configured method.

use std::fmt::Write as _;
use std::io::BufReader;

use commute_core::balance::{
    self, balance_report, eb_weights, fit_gps_model, ipw_weights, GpsModelMode, MomentSpec,
    StudentRecord, WeightMethod, WeightVector,
};
use commute_core::kre::AccessibilityMap;
use commute_core::outcome::{self, EffectCurve, LmmSpec};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::{svg, CliError};

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let records = load_students(cfg)?;
    let analysis: Vec<StudentRecord> = records.iter().filter(|r| r.passed_any).cloned().collect();
    if analysis.len() < 20 {
        return Err(CliError::Data(format!(
            "only {} students with a GPA; too few for the outcome stage",
            analysis.len()
        )));
    }

    let mut manifest = Manifest::new(&cfg.out_dir);
    let mut failures = String::new();

    // Polynomial degree: configured, or selected on the unweighted sample.
    let degree = if cfg.effects.degree > 0 {
        cfg.effects.degree
    } else {
        let (d, surface) = outcome::select_degree(
            &analysis,
            None,
            1..=cfg.effects.max_degree,
            0.7,
            commute_core::synth::subseed(cfg.seed, 3, 0),
        )
        .map_err(CliError::from)?;
        let mut csv = String::from("degree,test_mse,selected\n");
        for (deg, mse) in &surface {
            let _ = writeln!(csv, "{deg},{mse},{}", u8::from(*deg == d));
        }
        manifest.put("degree_selection.csv", csv.as_bytes())?;
        d
    };

    // Reference: the unweighted fit and curves.
    let unweighted_fit = outcome::fit_lmm(&analysis, &LmmSpec::unweighted(degree))?;
    let mut report = Vec::new();
    outcome::write_lmm_report(&mut report, &unweighted_fit)
        .map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put("model_uniform.txt", &report)?;
    let adrf_ref = outcome::adrf(&unweighted_fit, &analysis, cfg.effects.n_grid, cfg.effects.level)?;
    let amef_ref = outcome::amef(&unweighted_fit, &analysis, cfg.effects.n_grid, cfg.effects.level)?;
    put_curves(&mut manifest, "uniform", &adrf_ref, &amef_ref)?;
    if cfg.effects.loo {
        let rmse = outcome::loo_rmse(&analysis, &LmmSpec::unweighted(degree))?;
        manifest.put("loo_rmse.txt", format!("loo_rmse = {rmse}\n").as_bytes())?;
    }

    for method_name in &cfg.effects.methods {
        let Some(method) = WeightMethod::parse(method_name) else {
            failures.push_str(&format!("{method_name}: unknown weighting method\n"));
            continue;
        };
        match run_method(cfg, &analysis, method, degree, &adrf_ref, &amef_ref, &mut manifest) {
            Ok(()) => {}
            Err(e) => {
                // Partial outputs stay; downstream steps for this method
                // are skipped.
                failures.push_str(&format!("{}: {e}\n", method.tag()));
            }
        }
    }

    // Binary outcome model on the full population, never weighted.
    let has_both = records.iter().any(|r| r.passed_any) && records.iter().any(|r| !r.passed_any);
    if has_both {
        match outcome::fit_glmm_binary(&records, cfg.effects.loo) {
            Ok(fit) => {
                let mut buf = Vec::new();
                outcome::write_glmm_report(&mut buf, &fit)
                    .map_err(|e| CliError::Data(e.to_string()))?;
                manifest.put("model_passed_any.txt", &buf)?;
            }
            Err(e) => failures.push_str(&format!("passed_any: {e}\n")),
        }
    } else {
        failures.push_str("passed_any: single outcome class, model skipped\n");
    }

    // Cohort comparison in the nested-samples layout.
    let passers = analysis.clone();
    let table = outcome::cohort_compare(
        [&records, &passers, &records, &passers],
        ["population", "passers", "residents", "resident_passers"],
    );
    let mut buf = Vec::new();
    table
        .write_csv(&mut buf)
        .map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put("cohort_comparison.csv", &buf)?;

    // Always written so a rerun into the same directory cannot leave a
    // stale failure report behind.
    manifest.put("failures.txt", failures.as_bytes())?;
    manifest.finish("manifest_effects.txt")?;
    println!(
        "effects: degree {degree}, {} methods over {} passers ({} students total){}",
        cfg.effects.methods.len(),
        analysis.len(),
        records.len(),
        if failures.is_empty() { "" } else { " [with failures]" }
    );
    Ok(())
}

fn run_method(
    cfg: &RunConfig,
    analysis: &[StudentRecord],
    method: WeightMethod,
    degree: usize,
    adrf_ref: &EffectCurve,
    amef_ref: &EffectCurve,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let mut weights = compute_weights(analysis, method)?;
    if cfg.effects.trim > 0.0 {
        weights = weights.trimmed(cfg.effects.trim)?;
    }

    let mut buf = Vec::new();
    balance::write_weights_csv(&mut buf, analysis, &weights)
        .map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put(&format!("weights_{}.csv", method.tag()), &buf)?;

    let report = balance_report(analysis, &weights)?;
    let mut buf = Vec::new();
    report
        .write_csv(&mut buf)
        .map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put(&format!("balance_{}.csv", method.tag()), &buf)?;

    if method == WeightMethod::Uniform {
        // The reference fit already covers the uniform method.
        return Ok(());
    }

    let fit = outcome::fit_lmm(
        analysis,
        &LmmSpec {
            degree,
            weights: Some(weights),
        },
    )?;
    let mut buf = Vec::new();
    outcome::write_lmm_report(&mut buf, &fit).map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put(&format!("model_{}.txt", method.tag()), &buf)?;

    let adrf = outcome::adrf(&fit, analysis, cfg.effects.n_grid, cfg.effects.level)?;
    let amef = outcome::amef(&fit, analysis, cfg.effects.n_grid, cfg.effects.level)?;
    put_curves(manifest, method.tag(), &adrf, &amef)?;
    manifest.put(
        &format!("adrf_{}.svg", method.tag()),
        svg::curves(&format!("dose-response ({})", method.tag()), adrf_ref, Some(&adrf)).as_bytes(),
    )?;
    manifest.put(
        &format!("amef_{}.svg", method.tag()),
        svg::curves(&format!("marginal effect ({})", method.tag()), amef_ref, Some(&amef))
            .as_bytes(),
    )?;

    if cfg.effects.bootstrap > 0 {
        let trim = cfg.effects.trim;
        let weigh = move |sample: &[StudentRecord]| {
            let mut w = compute_weights_core(sample, method)?;
            if trim > 0.0 {
                w = w.trimmed(trim)?;
            }
            Ok(w)
        };
        let (boot_adrf, boot_amef) = outcome::cluster_bootstrap_curves(
            analysis,
            degree,
            cfg.effects.n_grid,
            cfg.effects.level,
            cfg.effects.bootstrap,
            commute_core::synth::subseed(cfg.seed, 4, 0),
            &weigh,
        )?;
        put_curves(manifest, &format!("{}_boot", method.tag()), &boot_adrf, &boot_amef)?;
    }
    Ok(())
}

fn put_curves(
    manifest: &mut Manifest,
    tag: &str,
    adrf: &EffectCurve,
    amef: &EffectCurve,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    adrf.write_csv(&mut buf).map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put(&format!("adrf_{tag}.csv"), &buf)?;
    let mut buf = Vec::new();
    amef.write_csv(&mut buf).map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put(&format!("amef_{tag}.csv"), &buf)?;
    Ok(())
}

fn compute_weights(
    analysis: &[StudentRecord],
    method: WeightMethod,
) -> Result<WeightVector, CliError> {
    compute_weights_core(analysis, method).map_err(CliError::from)
}

fn compute_weights_core(
    analysis: &[StudentRecord],
    method: WeightMethod,
) -> commute_core::Result<WeightVector> {
    Ok(match method {
        WeightMethod::Uniform => WeightVector::uniform(analysis.len()),
        WeightMethod::Glm => ipw_weights(&fit_gps_model(analysis, GpsModelMode::Glm)?, analysis, true)?,
        WeightMethod::Fem => ipw_weights(&fit_gps_model(analysis, GpsModelMode::Fem)?, analysis, true)?,
        WeightMethod::Rem => ipw_weights(&fit_gps_model(analysis, GpsModelMode::Rem)?, analysis, true)?,
        WeightMethod::Eb => eb_weights(analysis, &MomentSpec::default(), false)?,
        WeightMethod::EbMl => eb_weights(analysis, &MomentSpec::default(), true)?,
    })
}

/// Read the student CSV and make sure every record carries a commuting
/// time, filling from the campus accessibility map where required.
fn load_students(cfg: &RunConfig) -> Result<Vec<StudentRecord>, CliError> {
    let rows = balance::read_students_csv(cfg.students_csv_path())?;
    let needs_map = cfg.effects.commute_from_map || rows.iter().any(|r| !r.commute_known);
    let map = if needs_map {
        Some(load_map(cfg, &cfg.effects.campus)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let mut rec = row.record;
        if cfg.effects.commute_from_map || !row.commute_known {
            let map = map.as_ref().expect("map loaded when needed");
            let home = rec.home.ok_or_else(|| {
                CliError::Data(format!(
                    "student {} has no home coordinates to query the map with",
                    rec.student_id
                ))
            })?;
            rec.commute_hours = map.query(&home).map_err(CliError::from)? / 60.0;
        }
        rec.validate()
            .map_err(|m| CliError::Data(format!("student {}: {m}", rec.student_id)))?;
        records.push(rec);
    }
    Ok(records)
}

fn load_map(cfg: &RunConfig, campus: &str) -> Result<AccessibilityMap<f64>, CliError> {
    let csv_path = cfg.out_dir.join(format!("map_{campus}.csv"));
    let meta_path = cfg.out_dir.join(format!("map_{campus}.meta"));
    let data = std::fs::File::open(&csv_path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", csv_path.display())))?;
    let meta = std::fs::File::open(&meta_path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", meta_path.display())))?;
    let (map, _) = AccessibilityMap::read_csv(BufReader::new(data), BufReader::new(meta))?;
    Ok(map)
}
