//! Flat key-value run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Dotted keys group related
//! settings. Unknown keys are rejected so typos surface immediately;
//! command-line flags override the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use commute_core::geom::{Point2, Rect};
use commute_core::ingest::StudyWindow;
use commute_core::synth::{CityModel, CohortSpec, PingModel, TransitLine};
use commute_core::time::{parse_time_of_day, CivilDate, Weekday};
use commute_core::trajectory::{CampusSite, StopCriteria};
use commute_core::utm::UtmZone;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub zone: UtmZone,
    pub window: StudyWindow,
    pub campuses: Vec<CampusSite>,
    pub city: CityModel,
    pub sim: SimConfig,
    pub cohort: CohortSpec,
    pub gps_csv: Option<PathBuf>,
    pub students_csv: Option<PathBuf>,
    pub stops: StopCriteria,
    pub map: MapConfig,
    pub effects: EffectsConfig,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_journeys: usize,
    pub android_share: f64,
    pub ping: PingModel,
}

#[derive(Debug, Clone)]
pub struct MapConfig {
    pub k_frac_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
    pub spacing: f64,
    pub buffer: f64,
    pub max_accuracy: f64,
    pub min_points: usize,
}

#[derive(Debug, Clone)]
pub struct EffectsConfig {
    pub methods: Vec<String>,
    /// 0 selects the degree by the 70/30 split.
    pub degree: usize,
    pub max_degree: usize,
    pub campus: String,
    pub commute_from_map: bool,
    pub loo: bool,
    pub n_grid: usize,
    pub level: f64,
    /// 0 disables weight trimming; otherwise weights are clamped at this
    /// percentile and renormalized.
    pub trim: f64,
    /// 0 disables the cluster bootstrap; otherwise the replicate count for
    /// the alternative bands.
    pub bootstrap: usize,
}

impl RunConfig {
    /// Built-in demo: an 8 x 8 km city in the Milan UTM frame with one
    /// fast line through the campus.
    pub fn demo() -> RunConfig {
        let bbox = Rect::new(505_000.0, 5_025_000.0, 513_000.0, 5_033_000.0);
        let campus = CampusSite::new("main", 509_000.0, 5_029_000.0);
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            threads: 0,
            zone: UtmZone::new(32, true).expect("valid zone"),
            window: StudyWindow::default_study_period(),
            campuses: vec![campus.clone()],
            city: CityModel {
                bbox,
                walk_speed_ms: 1.4,
                lattice_pitch_m: 100.0,
                boarding_secs: 30.0,
                transit: vec![TransitLine {
                    name: "m1".into(),
                    path: vec![
                        Point2::new(505_000.0, 5_029_000.0),
                        Point2::new(513_000.0, 5_029_000.0),
                    ],
                    speed_ms: 12.0,
                    station_spacing_m: 600.0,
                }],
                campus,
            },
            sim: SimConfig {
                n_journeys: 600,
                android_share: 0.5,
                ping: PingModel::default(),
            },
            cohort: CohortSpec {
                n_students: 2000,
                n_programs: 12,
                dose_response: vec![7.5, -2.0],
                confounding_strength: 1.0,
                noise_sd: 1.2,
                sigma_u: 0.6,
                seed: 42,
            },
            gps_csv: None,
            students_csv: None,
            stops: StopCriteria::default(),
            map: MapConfig {
                k_frac_grid: vec![0.005, 0.01, 0.02, 0.05],
                c_grid: vec![0.25, 1.0 / 3.0, 0.5, 1.0, 2.0],
                spacing: 100.0,
                buffer: 1000.0,
                max_accuracy: 1500.0,
                min_points: 6,
            },
            effects: EffectsConfig {
                methods: vec![
                    "uniform".into(),
                    "glm".into(),
                    "fem".into(),
                    "rem".into(),
                    "eb".into(),
                    "eb_ml".into(),
                ],
                degree: 0,
                max_degree: 5,
                campus: "main".into(),
                commute_from_map: false,
                loo: false,
                n_grid: 60,
                level: 0.90,
                trim: 0.0,
                bootstrap: 0,
            },
        }
    }

    pub fn gps_csv_path(&self) -> PathBuf {
        self.gps_csv
            .clone()
            .unwrap_or_else(|| self.out_dir.join("gps.csv"))
    }

    pub fn students_csv_path(&self) -> PathBuf {
        self.students_csv
            .clone()
            .unwrap_or_else(|| self.out_dir.join("students.csv"))
    }

    pub fn campus_named(&self, name: &str) -> Result<&CampusSite, CliError> {
        self.campuses
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| CliError::Config(format!("no campus named `{name}` configured")))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "config line {}: expected `key = value`, found `{raw}`",
                    lineno + 1
                )));
            };
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(kv)
    }

    fn from_map(mut kv: BTreeMap<String, String>) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::demo();
        let bad = |key: &str, value: &str| CliError::Config(format!("bad value `{value}` for `{key}`"));

        let mut take = |key: &str| kv.remove(key);
        macro_rules! set {
            ($key:expr, $target:expr, $parse:expr) => {
                if let Some(v) = take($key) {
                    $target = $parse(&v).ok_or_else(|| bad($key, &v))?;
                }
            };
        }
        let f64_of = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let usize_of = |s: &str| s.parse::<usize>().ok();
        let bool_of = |s: &str| match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        };
        let floats_of = |s: &str| -> Option<Vec<f64>> {
            let parts: Vec<f64> = s
                .split([' ', ','])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().ok())
                .collect::<Option<Vec<f64>>>()?;
            (!parts.is_empty()).then_some(parts)
        };

        set!("seed", cfg.seed, |v: &str| v.parse::<u64>().ok());
        set!("out_dir", cfg.out_dir, |v: &str| Some(PathBuf::from(v)));
        set!("threads", cfg.threads, usize_of);
        let mut zone_num: i32 = i32::from(cfg.zone.zone);
        let mut zone_north = cfg.zone.north;
        set!("utm_zone", zone_num, |v: &str| v.parse::<i32>().ok());
        set!("utm_north", zone_north, bool_of);
        cfg.zone = UtmZone::new(zone_num, zone_north)
            .map_err(|e| CliError::Config(e.to_string()))?;

        set!("window.date_start", cfg.window.date_start, |v: &str| CivilDate::parse(v).ok());
        set!("window.date_end", cfg.window.date_end, |v: &str| CivilDate::parse(v).ok());
        set!("window.weekdays", cfg.window.weekdays, |v: &str| {
            v.split(',')
                .map(Weekday::parse)
                .collect::<Result<Vec<_>, _>>()
                .ok()
        });
        set!("window.arrival_start", cfg.window.arrival_start, |v: &str| parse_time_of_day(v).ok());
        set!("window.arrival_end", cfg.window.arrival_end, |v: &str| parse_time_of_day(v).ok());
        set!("window.utc_offset_s", cfg.window.utc_offset_secs, |v: &str| v.parse::<i32>().ok());

        set!("city.x1_min", cfg.city.bbox.min.x1, f64_of);
        set!("city.x2_min", cfg.city.bbox.min.x2, f64_of);
        set!("city.x1_max", cfg.city.bbox.max.x1, f64_of);
        set!("city.x2_max", cfg.city.bbox.max.x2, f64_of);
        set!("city.walk_speed", cfg.city.walk_speed_ms, f64_of);
        set!("city.pitch", cfg.city.lattice_pitch_m, f64_of);
        set!("city.boarding_s", cfg.city.boarding_secs, f64_of);

        set!("sim.n_journeys", cfg.sim.n_journeys, usize_of);
        set!("sim.android_share", cfg.sim.android_share, f64_of);
        set!("sim.ios_spacing_m", cfg.sim.ping.ios_spacing_m, f64_of);
        set!("sim.android_period_s", cfg.sim.ping.android_period_s, f64_of);
        set!("sim.accuracy_min", cfg.sim.ping.accuracy_range_m.0, f64_of);
        set!("sim.accuracy_max", cfg.sim.ping.accuracy_range_m.1, f64_of);
        set!("sim.noise_scale", cfg.sim.ping.noise_scale, f64_of);
        set!("sim.dwell_s", cfg.sim.ping.dwell_s, f64_of);

        set!("cohort.n_students", cfg.cohort.n_students, usize_of);
        set!("cohort.n_programs", cfg.cohort.n_programs, usize_of);
        set!("cohort.dose_response", cfg.cohort.dose_response, floats_of);
        set!("cohort.confounding", cfg.cohort.confounding_strength, f64_of);
        set!("cohort.noise_sd", cfg.cohort.noise_sd, f64_of);
        set!("cohort.sigma_u", cfg.cohort.sigma_u, f64_of);

        set!("gps_csv", cfg.gps_csv, |v: &str| Some(Some(PathBuf::from(v))));
        set!("students_csv", cfg.students_csv, |v: &str| Some(Some(PathBuf::from(v))));

        set!("stops.global_zero_distance", cfg.stops.global_zero_distance, f64_of);
        set!("stops.global_min_gap_min", cfg.stops.global_min_gap, f64_of);
        set!("stops.global_max_speed", cfg.stops.global_max_speed, f64_of);
        set!("stops.android_max_gap_min", cfg.stops.android_max_gap, f64_of);
        set!("stops.android_max_speed", cfg.stops.android_max_speed, f64_of);
        set!("stops.ios_max_distance", cfg.stops.ios_max_distance, f64_of);
        set!("stops.ios_max_speed", cfg.stops.ios_max_speed, f64_of);

        set!("map.k_frac_grid", cfg.map.k_frac_grid, floats_of);
        set!("map.c_grid", cfg.map.c_grid, floats_of);
        set!("map.spacing", cfg.map.spacing, f64_of);
        set!("map.buffer", cfg.map.buffer, f64_of);
        set!("map.max_accuracy", cfg.map.max_accuracy, f64_of);
        set!("map.min_points", cfg.map.min_points, usize_of);

        set!("effects.methods", cfg.effects.methods, |v: &str| {
            let out: Vec<String> = v
                .split([' ', ','])
                .filter(|t| !t.is_empty())
                .map(|t| t.to_ascii_lowercase())
                .collect();
            (!out.is_empty()).then_some(out)
        });
        set!("effects.degree", cfg.effects.degree, usize_of);
        set!("effects.max_degree", cfg.effects.max_degree, usize_of);
        set!("effects.campus", cfg.effects.campus, |v: &str| Some(v.to_string()));
        set!("effects.commute_from_map", cfg.effects.commute_from_map, bool_of);
        set!("effects.loo", cfg.effects.loo, bool_of);
        set!("effects.n_grid", cfg.effects.n_grid, usize_of);
        set!("effects.level", cfg.effects.level, f64_of);
        set!("effects.trim", cfg.effects.trim, f64_of);
        set!("effects.bootstrap", cfg.effects.bootstrap, usize_of);

        // Campus and transit-line groups are collected by prefix.
        let campus_keys: Vec<String> = kv
            .keys()
            .filter(|k| k.starts_with("campus."))
            .cloned()
            .collect();
        let mut campuses: BTreeMap<String, CampusSite> = BTreeMap::new();
        for key in campus_keys {
            let value = kv.remove(&key).expect("key just listed");
            let rest = &key["campus.".len()..];
            let Some((name, field)) = rest.split_once('.') else {
                return Err(CliError::Config(format!(
                    "campus keys look like campus.<name>.<field>, found `{key}`"
                )));
            };
            let entry = campuses
                .entry(name.to_string())
                .or_insert_with(|| CampusSite::new(name, 0.0, 0.0));
            let v = f64_of(&value).ok_or_else(|| bad(&key, &value))?;
            match field {
                "x1" => entry.pos.x1 = v,
                "x2" => entry.pos.x2 = v,
                "radius" => entry.catchment_radius = v,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown campus field `{other}` in `{key}`"
                    )))
                }
            }
        }
        if !campuses.is_empty() {
            cfg.campuses = campuses.into_values().collect();
            cfg.city.campus = cfg.campuses[0].clone();
        }

        let line_keys: Vec<String> = kv
            .keys()
            .filter(|k| k.starts_with("city.line."))
            .cloned()
            .collect();
        let mut lines: BTreeMap<String, TransitLine> = BTreeMap::new();
        for key in line_keys {
            let value = kv.remove(&key).expect("key just listed");
            let rest = &key["city.line.".len()..];
            let Some((name, field)) = rest.split_once('.') else {
                return Err(CliError::Config(format!(
                    "transit keys look like city.line.<name>.<field>, found `{key}`"
                )));
            };
            let entry = lines.entry(name.to_string()).or_insert_with(|| TransitLine {
                name: name.to_string(),
                path: Vec::new(),
                speed_ms: 10.0,
                station_spacing_m: 600.0,
            });
            match field {
                "path" => {
                    let mut pts = Vec::new();
                    for pair in value.split(';') {
                        let nums: Vec<&str> = pair.split_whitespace().collect();
                        if nums.len() != 2 {
                            return Err(bad(&key, &value));
                        }
                        let x1 = f64_of(nums[0]).ok_or_else(|| bad(&key, &value))?;
                        let x2 = f64_of(nums[1]).ok_or_else(|| bad(&key, &value))?;
                        pts.push(Point2::new(x1, x2));
                    }
                    entry.path = pts;
                }
                "speed" => entry.speed_ms = f64_of(&value).ok_or_else(|| bad(&key, &value))?,
                "station_spacing" => {
                    entry.station_spacing_m = f64_of(&value).ok_or_else(|| bad(&key, &value))?
                }
                other => {
                    return Err(CliError::Config(format!(
                        "unknown transit field `{other}` in `{key}`"
                    )))
                }
            }
        }
        if !lines.is_empty() {
            cfg.city.transit = lines.into_values().collect();
        }

        if !kv.is_empty() {
            let unknown: Vec<String> = kv.into_keys().collect();
            return Err(CliError::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }

        cfg.cohort.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.window
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.stops
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.city
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.cohort
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.campuses.is_empty() {
            return Err(CliError::Config("at least one campus is required".into()));
        }
        if self.effects.level <= 0.0 || self.effects.level >= 1.0 {
            return Err(CliError::Config("effects.level must lie in (0,1)".into()));
        }
        if self.effects.n_grid < 2 {
            return Err(CliError::Config("effects.n_grid must be >= 2".into()));
        }
        if self.effects.trim != 0.0 && !(0.5..1.0).contains(&self.effects.trim) {
            return Err(CliError::Config(
                "effects.trim must be 0 (off) or a percentile in [0.5, 1)".into(),
            ));
        }
        Ok(())
    }
}
