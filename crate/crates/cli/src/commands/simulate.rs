//! `simulate`: emit deterministic synthetic inputs (GPS pings, students,
//! and the ground-truth field) for the configured seed.

use commute_core::ingest::GPS_CSV_HEADER;
use commute_core::synth;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let oracle = synth::build_oracle(&cfg.city)?;
    let points = synth::simulate_journeys(
        &oracle,
        cfg.sim.n_journeys,
        cfg.sim.android_share,
        &cfg.sim.ping,
        &cfg.window,
        cfg.seed,
    )?;
    let raw = synth::to_raw_records(&points, cfg.zone)?;

    let mut gps_csv = String::new();
    gps_csv.push_str(GPS_CSV_HEADER);
    gps_csv.push('\n');
    for r in &raw {
        gps_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.user_id,
            r.device_type.as_str(),
            r.timestamp,
            r.longitude,
            r.latitude,
            r.accuracy
        ));
    }

    let cohort = synth::generate_cohort(&cfg.cohort, &oracle)?;
    let mut students_csv = Vec::new();
    commute_core::balance::write_students_csv(&mut students_csv, &cohort)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mut oracle_csv = Vec::new();
    synth::write_oracle_csv(&mut oracle_csv, &oracle).map_err(|e| CliError::Data(e.to_string()))?;

    let mut manifest = Manifest::new(&cfg.out_dir);
    manifest.put("gps.csv", gps_csv.as_bytes())?;
    manifest.put("students.csv", &students_csv)?;
    manifest.put("oracle.csv", &oracle_csv)?;
    let path = manifest.finish("manifest_simulate.txt")?;

    println!(
        "simulate: {} pings from {} journeys, {} students -> {}",
        raw.len(),
        cfg.sim.n_journeys,
        cohort.len(),
        path.parent().unwrap_or(&cfg.out_dir).display()
    );
    Ok(())
}
