//! `map`: GPS CSV -> journeys -> labeled samples -> tuned kernel
//! regression -> per-campus accessibility map (CSV + sidecar + SVG).

use std::fmt::Write as _;

use commute_core::kre::{self, SampleSet};
use commute_core::synth::subseed;
use commute_core::trajectory::{self, LabeledSample};

use crate::commands::{filter_for_campus, run_gps_pipeline};
use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::{svg, CliError};

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let pipeline = run_gps_pipeline(cfg)?;
    let mut manifest = Manifest::new(&cfg.out_dir);
    let mut report = String::new();
    let _ = writeln!(report, "points_raw = {}", pipeline.points_raw);
    let _ = writeln!(report, "rows_skipped = {}", pipeline.rows_skipped);
    let _ = writeln!(report, "points_in_window = {}", pipeline.points_in_window);
    let _ = writeln!(report, "journeys_segmented = {}", pipeline.journeys.len());

    for (ci, campus) in cfg.campuses.iter().enumerate() {
        let outcome = filter_for_campus(cfg, pipeline.journeys.clone(), campus);
        let att = &outcome.attrition;
        let _ = writeln!(report, "[campus.{}]", campus.name);
        let _ = writeln!(report, "dropped_not_at_campus = {}", att.not_at_campus);
        let _ = writeln!(report, "dropped_too_few_points = {}", att.too_few_points);
        let _ = writeln!(report, "dropped_low_accuracy = {}", att.low_accuracy);
        let _ = writeln!(report, "dropped_self_loop = {}", att.self_loop);
        let _ = writeln!(report, "dropped_arrival_window = {}", att.outside_arrival_window);
        let _ = writeln!(report, "journeys_retained = {}", outcome.kept.len());

        if outcome.kept.is_empty() {
            // Flush the attrition evidence before failing.
            manifest.put("run_report.txt", report.as_bytes())?;
            manifest.finish("manifest_map.txt")?;
            return Err(CliError::Data(format!(
                "campus {}: zero retained journeys \
                 (not_at_campus {}, too_few_points {}, low_accuracy {}, self_loop {}, arrival_window {})",
                campus.name,
                att.not_at_campus,
                att.too_few_points,
                att.low_accuracy,
                att.self_loop,
                att.outside_arrival_window
            )));
        }

        let stats = trajectory::journey_stats(&outcome.kept);
        let mut stats_txt = Vec::new();
        stats
            .write_report(&mut stats_txt)
            .map_err(|e| CliError::Data(e.to_string()))?;
        manifest.put(&format!("journey_stats_{}.txt", campus.name), &stats_txt)?;

        let samples: Vec<LabeledSample> = outcome
            .kept
            .iter()
            .flat_map(trajectory::label_commute_times)
            .collect();
        let mut samples_csv = Vec::new();
        trajectory::write_samples_csv(&mut samples_csv, &samples)
            .map_err(|e| CliError::Data(e.to_string()))?;
        manifest.put(&format!("samples_{}.csv", campus.name), &samples_csv)?;

        let set = SampleSet::from_labeled(&samples)?;
        let cv = kre::tune_bandwidth(
            &set,
            &cfg.map.k_frac_grid,
            &cfg.map.c_grid,
            subseed(cfg.seed, 2, ci as u64),
        )?;
        let mut cv_csv = Vec::new();
        cv.write_csv(&mut cv_csv).map_err(|e| CliError::Data(e.to_string()))?;
        manifest.put(&format!("cv_{}.csv", campus.name), &cv_csv)?;
        let _ = writeln!(report, "cv_best_k_frac = {}", cv.best.k_frac);
        let _ = writeln!(report, "cv_best_c = {}", cv.best.c);
        let _ = writeln!(report, "cv_mse = {}", cv.cv_mse);
        if let (Some(mse), Some(mae)) = (cv.test_mse, cv.test_mae) {
            let _ = writeln!(report, "test_mse = {mse}");
            let _ = writeln!(report, "test_mae = {mae}");
        }

        let map = kre::build_map(
            &set,
            &cfg.city.bbox,
            cfg.map.spacing,
            cfg.map.buffer,
            &cv.best,
            campus,
        )?;
        let mut map_csv = Vec::new();
        map.write_csv(&mut map_csv).map_err(|e| CliError::Data(e.to_string()))?;
        manifest.put(&format!("map_{}.csv", campus.name), &map_csv)?;
        let mut meta = Vec::new();
        map.write_metadata(&mut meta, &cv.best)
            .map_err(|e| CliError::Data(e.to_string()))?;
        manifest.put(&format!("map_{}.meta", campus.name), &meta)?;
        manifest.put(
            &format!("map_{}.svg", campus.name),
            svg::heatmap(&map).as_bytes(),
        )?;

        println!(
            "map[{}]: {} samples, grid {}x{}, best (k_frac {}, c {})",
            campus.name,
            set.len(),
            map.nx,
            map.ny,
            cv.best.k_frac,
            cv.best.c
        );
    }

    manifest.put("run_report.txt", report.as_bytes())?;
    manifest.finish("manifest_map.txt")?;
    Ok(())
}
