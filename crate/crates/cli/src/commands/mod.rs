//! Subcommand implementations.

pub mod effects;
pub mod map;
pub mod report;
pub mod simulate;

use commute_core::ingest::{self, GpsPoint};
use commute_core::trajectory::{self, FilterOutcome, Journey};

use crate::config::RunConfig;
use crate::CliError;

/// Shared front half of the GPS pipeline: parse, project, window-filter,
/// and segment. Returns the journeys plus the raw/skipped/filtered counts.
pub struct GpsPipeline {
    pub points_raw: usize,
    pub rows_skipped: usize,
    pub points_in_window: usize,
    pub journeys: Vec<Journey>,
}

pub fn run_gps_pipeline(cfg: &RunConfig) -> Result<GpsPipeline, CliError> {
    let parsed = ingest::parse_gps_csv(cfg.gps_csv_path())?;
    let projected = ingest::project_records(&parsed.records, cfg.zone)?;
    let windowed: Vec<GpsPoint> = ingest::filter_window(&projected, &cfg.window, &cfg.city.bbox);
    let journeys = trajectory::extract_journeys(&windowed, &cfg.stops)?;
    Ok(GpsPipeline {
        points_raw: parsed.records.len(),
        rows_skipped: parsed.skipped,
        points_in_window: windowed.len(),
        journeys,
    })
}

/// Campus-level filtering with the configured thresholds.
pub fn filter_for_campus(
    cfg: &RunConfig,
    journeys: Vec<Journey>,
    campus: &trajectory::CampusSite,
) -> FilterOutcome {
    trajectory::filter_journeys(
        journeys,
        campus,
        &cfg.window,
        cfg.map.max_accuracy,
        cfg.map.min_points,
    )
}
