//! Stop detection and journey extraction from per-user ping streams.
//!
//! A journey is a maximal run of moving points terminated by exactly one
//! stopping point; the terminating stop belongs to the journey (it carries
//! the arrival location and the zero commute label).

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::ingest::{DeviceType, GpsPoint, StudyWindow};

/// Thresholds identifying stopping points. The global rules and the two
/// device rules combine by OR; the conjunctions inside each device rule are
/// fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct StopCriteria {
    /// A displacement at or below this is a stop outright (meters).
    pub global_zero_distance: f64,
    /// A gap longer than this is a stop (minutes).
    pub global_min_gap: f64,
    /// Speed below this is a stop (m/s).
    pub global_max_speed: f64,
    /// Android rule: gap shorter than this (minutes) ...
    pub android_max_gap: f64,
    /// ... and speed below this (m/s).
    pub android_max_speed: f64,
    /// iOS rule: displacement shorter than this (meters) ...
    pub ios_max_distance: f64,
    /// ... and speed below this (m/s).
    pub ios_max_speed: f64,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria {
            global_zero_distance: 0.0,
            global_min_gap: 60.0,
            global_max_speed: 0.7,
            android_max_gap: 15.0,
            android_max_speed: 1.0,
            ios_max_distance: 100.0,
            ios_max_speed: 1.0,
        }
    }
}

impl StopCriteria {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.global_zero_distance,
            self.global_min_gap,
            self.global_max_speed,
            self.android_max_gap,
            self.android_max_speed,
            self.ios_max_distance,
            self.ios_max_speed,
        ];
        if all.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidConfig("stop thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ordered movement sequence of one user ending at a stopping point.
#[derive(Debug, Clone)]
pub struct Journey {
    pub id: u64,
    pub user_id: String,
    pub points: Vec<GpsPoint>,
    /// Sum of consecutive segment lengths, meters.
    pub length_m: f64,
    /// Timestamp of the final (stopping) point.
    pub arrival_t: i64,
}

impl Journey {
    fn from_points(id: u64, points: Vec<GpsPoint>) -> Journey {
        debug_assert!(points.len() >= 2);
        let length_m = points
            .windows(2)
            .map(|p| p[0].pos.dist(&p[1].pos))
            .sum();
        Journey {
            id,
            user_id: points[0].user_id.clone(),
            arrival_t: points[points.len() - 1].t,
            length_m,
            points,
        }
    }

    pub fn start(&self) -> &GpsPoint {
        &self.points[0]
    }

    pub fn end(&self) -> &GpsPoint {
        &self.points[self.points.len() - 1]
    }
}

/// Sample position with its commute-time label in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub journey_id: u64,
    pub user_id: String,
    pub t: i64,
    pub pos: Point2<f64>,
    /// Minutes until arrival; exactly zero for the journey's final point.
    pub y_minutes: f64,
}

/// Campus destination with its catchment ball (closed, 250 m by default).
#[derive(Debug, Clone, PartialEq)]
pub struct CampusSite {
    pub name: String,
    pub pos: Point2<f64>,
    pub catchment_radius: f64,
}

impl CampusSite {
    pub fn new(name: impl Into<String>, x1: f64, x2: f64) -> CampusSite {
        CampusSite {
            name: name.into(),
            pos: Point2::new(x1, x2),
            catchment_radius: 250.0,
        }
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        self.pos.dist(p) <= self.catchment_radius
    }
}

/// Displacement (m), elapsed time (s), and average speed (m/s) between two
/// consecutive pings of the same user.
pub fn pair_kinematics(a: &GpsPoint, b: &GpsPoint) -> Result<(f64, f64, f64)> {
    let dt = (b.t - a.t) as f64;
    if dt <= 0.0 {
        return Err(Error::NonPositiveTimeStep {
            user_id: a.user_id.clone(),
            dt,
        });
    }
    let dx = a.pos.dist(&b.pos);
    Ok((dx, dt, dx / dt))
}

/// Flag each point of a sorted single-user stream as stop (`true`) or move.
/// The first point is a stop by convention.
pub fn detect_stops(points: &[GpsPoint], criteria: &StopCriteria) -> Result<Vec<bool>> {
    let mut flags = Vec::with_capacity(points.len());
    for (i, b) in points.iter().enumerate() {
        if i == 0 {
            flags.push(true);
            continue;
        }
        let a = &points[i - 1];
        let (dx, dt, v) = pair_kinematics(a, b)?;
        let dt_min = dt / 60.0;

        let global = dx <= criteria.global_zero_distance
            || dt_min > criteria.global_min_gap
            || v < criteria.global_max_speed;
        let device = match b.device_type {
            DeviceType::Android => dt_min < criteria.android_max_gap && v < criteria.android_max_speed,
            DeviceType::Ios => dx < criteria.ios_max_distance && v < criteria.ios_max_speed,
        };
        flags.push(global || device);
    }
    Ok(flags)
}

/// Cut a flagged stream into journeys: each maximal run of moving points
/// plus its terminating stop. Stop runs yield nothing; a trailing move run
/// without a terminating stop is discarded.
pub fn segment_journeys(points: &[GpsPoint], flags: &[bool]) -> Vec<Vec<GpsPoint>> {
    debug_assert_eq!(points.len(), flags.len());
    let mut journeys = Vec::new();
    let mut run: Vec<GpsPoint> = Vec::new();
    for (p, &is_stop) in points.iter().zip(flags) {
        if is_stop {
            if !run.is_empty() {
                run.push(p.clone());
                journeys.push(std::mem::take(&mut run));
            }
        } else {
            run.push(p.clone());
        }
    }
    journeys
}

/// Group points by user, order each stream by time, and drop duplicate
/// timestamps keeping the more accurate fix.
pub fn per_user_streams(points: &[GpsPoint]) -> BTreeMap<String, Vec<GpsPoint>> {
    let mut by_user: BTreeMap<String, Vec<GpsPoint>> = BTreeMap::new();
    for p in points {
        by_user.entry(p.user_id.clone()).or_default().push(p.clone());
    }
    for stream in by_user.values_mut() {
        stream.sort_by_key(|p| p.t);
        stream.dedup_by(|b, a| {
            if a.t == b.t {
                if b.accuracy < a.accuracy {
                    std::mem::swap(a, b);
                }
                true
            } else {
                false
            }
        });
    }
    by_user
}

/// Full extraction over a mixed point collection: per-user ordering,
/// stop detection, and segmentation, with sequential journey ids assigned
/// in user order.
pub fn extract_journeys(points: &[GpsPoint], criteria: &StopCriteria) -> Result<Vec<Journey>> {
    let mut journeys = Vec::new();
    let mut next_id: u64 = 1;
    for stream in per_user_streams(points).values() {
        let flags = detect_stops(stream, criteria)?;
        for run in segment_journeys(stream, &flags) {
            journeys.push(Journey::from_points(next_id, run));
            next_id += 1;
        }
    }
    Ok(journeys)
}

/// Per-filter drop counts; each journey is attributed to the first check it
/// fails, in the order below.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Attrition {
    pub not_at_campus: usize,
    pub too_few_points: usize,
    pub low_accuracy: usize,
    pub self_loop: usize,
    pub outside_arrival_window: usize,
}

impl Attrition {
    pub fn total(&self) -> usize {
        self.not_at_campus
            + self.too_few_points
            + self.low_accuracy
            + self.self_loop
            + self.outside_arrival_window
    }
}

#[derive(Debug)]
pub struct FilterOutcome {
    pub kept: Vec<Journey>,
    pub attrition: Attrition,
}

pub const DEFAULT_MAX_ACCURACY_M: f64 = 1500.0;
pub const DEFAULT_MIN_POINTS: usize = 6;

/// Keep campus-bound journeys: arrival inside the catchment ball, enough
/// observations, no low-accuracy fix, not a self-loop from the campus, and
/// arrival time-of-day inside the study band.
pub fn filter_journeys(
    journeys: Vec<Journey>,
    site: &CampusSite,
    window: &StudyWindow,
    max_accuracy: f64,
    min_points: usize,
) -> FilterOutcome {
    let mut attrition = Attrition::default();
    let mut kept = Vec::new();
    for j in journeys {
        if !site.contains(&j.end().pos) {
            attrition.not_at_campus += 1;
        } else if j.points.len() < min_points {
            attrition.too_few_points += 1;
        } else if j.points.iter().any(|p| p.accuracy >= max_accuracy) {
            attrition.low_accuracy += 1;
        } else if site.contains(&j.start().pos) {
            attrition.self_loop += 1;
        } else if !window.arrival_time_ok(j.arrival_t) {
            attrition.outside_arrival_window += 1;
        } else {
            kept.push(j);
        }
    }
    FilterOutcome { kept, attrition }
}

/// Label every point of a retained journey with minutes until arrival.
pub fn label_commute_times(journey: &Journey) -> Vec<LabeledSample> {
    journey
        .points
        .iter()
        .map(|p| LabeledSample {
            journey_id: journey.id,
            user_id: journey.user_id.clone(),
            t: p.t,
            pos: p.pos,
            y_minutes: (journey.arrival_t - p.t) as f64 / 60.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMeanMax {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

fn min_mean_max(values: impl Iterator<Item = f64>) -> MinMeanMax {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
        n += 1;
    }
    if n == 0 {
        MinMeanMax {
            min: 0.0,
            mean: 0.0,
            max: 0.0,
        }
    } else {
        MinMeanMax {
            min,
            mean: sum / n as f64,
            max,
        }
    }
}

/// Descriptive statistics of a journey batch (signal counts, lengths, and
/// per-user aggregates).
#[derive(Debug, Clone, PartialEq)]
pub struct JourneyStats {
    pub n_signals: usize,
    pub n_journeys: usize,
    pub n_users: usize,
    pub signals_per_journey: MinMeanMax,
    pub length_km_per_journey: MinMeanMax,
    pub signals_per_user: MinMeanMax,
    pub journeys_per_user: MinMeanMax,
}

pub fn journey_stats(journeys: &[Journey]) -> JourneyStats {
    let mut per_user: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for j in journeys {
        let e = per_user.entry(&j.user_id).or_insert((0, 0));
        e.0 += j.points.len();
        e.1 += 1;
    }
    JourneyStats {
        n_signals: journeys.iter().map(|j| j.points.len()).sum(),
        n_journeys: journeys.len(),
        n_users: per_user.len(),
        signals_per_journey: min_mean_max(journeys.iter().map(|j| j.points.len() as f64)),
        length_km_per_journey: min_mean_max(journeys.iter().map(|j| j.length_m / 1000.0)),
        signals_per_user: min_mean_max(per_user.values().map(|&(s, _)| s as f64)),
        journeys_per_user: min_mean_max(per_user.values().map(|&(_, t)| t as f64)),
    }
}

impl JourneyStats {
    pub fn write_report(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "n_signals = {}", self.n_signals)?;
        writeln!(w, "n_trajectories = {}", self.n_journeys)?;
        writeln!(w, "n_unique_users = {}", self.n_users)?;
        let rows = [
            ("signals_per_trajectory", self.signals_per_journey),
            ("distance_km_per_trajectory", self.length_km_per_journey),
            ("signals_per_user", self.signals_per_user),
            ("trajectories_per_user", self.journeys_per_user),
        ];
        for (name, v) in rows {
            writeln!(w, "{name}.min = {}", v.min)?;
            writeln!(w, "{name}.mean = {}", v.mean)?;
            writeln!(w, "{name}.max = {}", v.max)?;
        }
        Ok(())
    }
}

pub const SAMPLES_CSV_HEADER: &str = "journey_id,user_id,t,x1,x2,y_minutes";

pub fn write_samples_csv(w: &mut impl Write, samples: &[LabeledSample]) -> std::io::Result<()> {
    writeln!(w, "{SAMPLES_CSV_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.journey_id, s.user_id, s.t, s.pos.x1, s.pos.x2, s.y_minutes
        )?;
    }
    Ok(())
}
