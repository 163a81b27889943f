//! `report`: descriptive statistics of the GPS dataset after filtering and
//! the cohort comparison table, regenerated from the input files.

use std::fmt::Write as _;

use commute_core::balance::{self, StudentRecord};
use commute_core::outcome;
use commute_core::trajectory;

use crate::commands::{filter_for_campus, run_gps_pipeline};
use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let mut manifest = Manifest::new(&cfg.out_dir);

    let pipeline = run_gps_pipeline(cfg)?;
    let mut text = String::new();
    let _ = writeln!(text, "points_raw = {}", pipeline.points_raw);
    let _ = writeln!(text, "rows_skipped = {}", pipeline.rows_skipped);
    let _ = writeln!(text, "points_in_window = {}", pipeline.points_in_window);
    for campus in &cfg.campuses {
        let outcome = filter_for_campus(cfg, pipeline.journeys.clone(), campus);
        let stats = trajectory::journey_stats(&outcome.kept);
        let _ = writeln!(text, "[campus.{}]", campus.name);
        let mut buf = Vec::new();
        stats
            .write_report(&mut buf)
            .map_err(|e| CliError::Data(e.to_string()))?;
        text.push_str(&String::from_utf8_lossy(&buf));
        let _ = writeln!(text, "journeys_dropped = {}", outcome.attrition.total());
    }
    manifest.put("gps_report.txt", text.as_bytes())?;

    let rows = balance::read_students_csv(cfg.students_csv_path())?;
    let records: Vec<StudentRecord> = rows.into_iter().map(|r| r.record).collect();
    let passers: Vec<StudentRecord> = records.iter().filter(|r| r.passed_any).cloned().collect();
    let table = outcome::cohort_compare(
        [&records, &passers, &records, &passers],
        ["population", "passers", "residents", "resident_passers"],
    );
    let mut buf = Vec::new();
    table
        .write_csv(&mut buf)
        .map_err(|e| CliError::Data(e.to_string()))?;
    manifest.put("cohort_comparison.csv", &buf)?;

    manifest.finish("manifest_report.txt")?;
    println!(
        "report: {} journeys across {} campuses, {} students",
        pipeline.journeys.len(),
        cfg.campuses.len(),
        records.len()
    );
    Ok(())
}
