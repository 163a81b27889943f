//! Synthetic city: a walk lattice with fast transit lines, a ground-truth
//! travel-time field from single-source shortest paths, simulated GPS
//! journeys toward the campus, and a confounded student cohort with a known
//! dose-response. Everything is a pure function of its spec and seed.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::balance::{Gender, HsTrack, Income, StudentRecord};
use crate::error::{Error, Result};
use crate::geom::{Point2, Rect};
use crate::graph::Graph;
use crate::ingest::{DeviceType, GpsPoint, RawGpsRecord, StudyWindow};
use crate::kre::AccessibilityMap;
use crate::time::unix_from_local;
use crate::trajectory::CampusSite;
use crate::utm::{self, UtmZone};

#[derive(Debug, Clone)]
pub struct TransitLine {
    pub name: String,
    pub path: Vec<Point2<f64>>,
    /// Cruise speed between stations, m/s.
    pub speed_ms: f64,
    /// Arc-length distance between stations, meters.
    pub station_spacing_m: f64,
}

#[derive(Debug, Clone)]
pub struct CityModel {
    pub bbox: Rect<f64>,
    pub walk_speed_ms: f64,
    pub lattice_pitch_m: f64,
    /// Fixed boarding/alighting penalty, seconds.
    pub boarding_secs: f64,
    pub transit: Vec<TransitLine>,
    pub campus: CampusSite,
}

impl CityModel {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_well_formed() || self.bbox.width() <= 0.0 || self.bbox.height() <= 0.0 {
            return Err(Error::InvalidConfig("city bbox is degenerate".into()));
        }
        if !(self.walk_speed_ms > 0.0) || !(self.lattice_pitch_m > 0.0) {
            return Err(Error::InvalidConfig("city speeds and pitch must be positive".into()));
        }
        if !self.bbox.contains(&self.campus.pos) {
            return Err(Error::InvalidConfig("campus must lie inside the city bbox".into()));
        }
        for line in &self.transit {
            if !(line.speed_ms > 0.0) || !(line.station_spacing_m > 0.0) || line.path.len() < 2 {
                return Err(Error::InvalidConfig(format!(
                    "transit line {} is degenerate",
                    line.name
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth travel times to the campus on the lattice+transit graph,
/// plus the shortest-path tree used to replay journeys.
#[derive(Debug, Clone)]
pub struct TravelOracle {
    pub origin: Point2<f64>,
    pub pitch: f64,
    pub nx: usize,
    pub ny: usize,
    /// Positions of all graph nodes; the first `nx*ny` are lattice nodes,
    /// stations follow.
    pub node_pos: Vec<Point2<f64>>,
    /// Seconds to the campus per graph node.
    pub times_s: Vec<f64>,
    /// Next node toward the campus (`None` at the campus itself).
    next_hop: Vec<Option<usize>>,
    pub campus_node: usize,
    pub campus: CampusSite,
}

impl TravelOracle {
    pub fn lattice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn nearest_lattice_node(&self, p: &Point2<f64>) -> usize {
        let ix = ((p.x1 - self.origin.x1) / self.pitch).round().max(0.0) as usize;
        let iy = ((p.x2 - self.origin.x2) / self.pitch).round().max(0.0) as usize;
        let ix = ix.min(self.nx - 1);
        let iy = iy.min(self.ny - 1);
        iy * self.nx + ix
    }

    pub fn true_seconds_at(&self, p: &Point2<f64>) -> f64 {
        self.times_s[self.nearest_lattice_node(p)]
    }

    /// Node path from `from` to the campus along the shortest-path tree.
    pub fn path_to_campus(&self, from: usize) -> Vec<usize> {
        let mut path = vec![from];
        let mut cur = from;
        while let Some(next) = self.next_hop[cur] {
            path.push(next);
            cur = next;
        }
        path
    }
}

/// Anything that can report an estimated or true commuting time surface.
pub trait TravelField {
    fn node_count(&self) -> usize;
    fn field_node_pos(&self, i: usize) -> Point2<f64>;
    fn node_minutes(&self, i: usize) -> f64;
    fn minutes_at(&self, p: &Point2<f64>) -> Result<f64>;
}

impl TravelField for TravelOracle {
    fn node_count(&self) -> usize {
        self.lattice_len()
    }
    fn field_node_pos(&self, i: usize) -> Point2<f64> {
        self.node_pos[i]
    }
    fn node_minutes(&self, i: usize) -> f64 {
        self.times_s[i] / 60.0
    }
    fn minutes_at(&self, p: &Point2<f64>) -> Result<f64> {
        Ok(self.true_seconds_at(p) / 60.0)
    }
}

impl TravelField for AccessibilityMap<f64> {
    fn node_count(&self) -> usize {
        self.nx * self.ny
    }
    fn field_node_pos(&self, i: usize) -> Point2<f64> {
        self.node_pos(i % self.nx, i / self.nx)
    }
    fn node_minutes(&self, i: usize) -> f64 {
        self.values[i]
    }
    fn minutes_at(&self, p: &Point2<f64>) -> Result<f64> {
        self.query(p)
    }
}

/// Build the lattice+transit graph and solve the single-source problem
/// rooted at the campus.
pub fn build_oracle(city: &CityModel) -> Result<TravelOracle> {
    city.validate()?;
    let pitch = city.lattice_pitch_m;
    let nx = (city.bbox.width() / pitch).floor() as usize + 1;
    let ny = (city.bbox.height() / pitch).floor() as usize + 1;
    let origin = city.bbox.min;
    let n_lattice = nx * ny;

    let mut node_pos: Vec<Point2<f64>> = (0..n_lattice)
        .map(|i| {
            Point2::new(
                origin.x1 + (i % nx) as f64 * pitch,
                origin.x2 + (i / nx) as f64 * pitch,
            )
        })
        .collect();

    // Stations every `station_spacing_m` of arc length, endpoints included.
    let mut stations: Vec<(usize, Point2<f64>)> = Vec::new(); // (line idx, pos)
    for (li, line) in city.transit.iter().enumerate() {
        let mut arc = 0.0;
        let mut next_at = 0.0;
        for seg in line.path.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let len = a.dist(&b);
            if len == 0.0 {
                continue;
            }
            while next_at <= arc + len {
                let t = (next_at - arc) / len;
                stations.push((
                    li,
                    Point2::new(a.x1 + t * (b.x1 - a.x1), a.x2 + t * (b.x2 - a.x2)),
                ));
                next_at += line.station_spacing_m;
            }
            arc += len;
        }
        let end = *line.path.last().expect("validated path");
        match stations.iter().rev().find(|(l, _)| *l == li) {
            Some((_, last)) if last.dist(&end) > line.station_spacing_m / 2.0 => {
                stations.push((li, end))
            }
            None => stations.push((li, end)),
            _ => {}
        }
    }

    let mut graph = Graph::<f64>::with_nodes(n_lattice + stations.len());

    // 8-connected walk lattice.
    let straight = pitch / city.walk_speed_ms;
    let diagonal = pitch * std::f64::consts::SQRT_2 / city.walk_speed_ms;
    for iy in 0..ny {
        for ix in 0..nx {
            let a = iy * nx + ix;
            if ix + 1 < nx {
                graph.add_undirected(a, a + 1, straight);
            }
            if iy + 1 < ny {
                graph.add_undirected(a, a + nx, straight);
                if ix + 1 < nx {
                    graph.add_undirected(a, a + nx + 1, diagonal);
                }
                if ix > 0 {
                    graph.add_undirected(a, a + nx - 1, diagonal);
                }
            }
        }
    }

    // Ride edges between consecutive stations of a line, boarding edges to
    // the co-located lattice node.
    let snap = |p: &Point2<f64>| -> usize {
        let ix = ((p.x1 - origin.x1) / pitch).round().clamp(0.0, (nx - 1) as f64) as usize;
        let iy = ((p.x2 - origin.x2) / pitch).round().clamp(0.0, (ny - 1) as f64) as usize;
        iy * nx + ix
    };
    for (si, (li, pos)) in stations.iter().enumerate() {
        let node = n_lattice + si;
        node_pos.push(*pos);
        let lattice = snap(pos);
        let board = city.boarding_secs + pos.dist(&node_pos[lattice]) / city.walk_speed_ms;
        graph.add_undirected(node, lattice, board.max(1e-6));
        if si > 0 && stations[si - 1].0 == *li {
            let prev = n_lattice + si - 1;
            let ride = stations[si - 1].1.dist(pos) / city.transit[*li].speed_ms;
            graph.add_undirected(node, prev, ride.max(1e-6));
        }
    }

    let campus_node = {
        let p = &city.campus.pos;
        let ix = ((p.x1 - origin.x1) / pitch).round().clamp(0.0, (nx - 1) as f64) as usize;
        let iy = ((p.x2 - origin.x2) / pitch).round().clamp(0.0, (ny - 1) as f64) as usize;
        iy * nx + ix
    };

    let (times_s, pred) = graph.shortest_paths(campus_node);
    for (i, t) in times_s.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::UnreachableNode(i));
        }
    }
    // The predecessor of `v` on the path from the campus is exactly the
    // next hop from `v` back to the campus (the graph is symmetric).
    let next_hop: Vec<Option<usize>> = pred;

    Ok(TravelOracle {
        origin,
        pitch,
        nx,
        ny,
        node_pos,
        times_s,
        next_hop,
        campus_node,
        campus: city.campus.clone(),
    })
}

/// Ping-generation model for simulated journeys.
#[derive(Debug, Clone)]
pub struct PingModel {
    /// iOS emits a fix roughly every this many meters of displacement.
    pub ios_spacing_m: f64,
    /// Android emits a fix roughly every this many seconds.
    pub android_period_s: f64,
    /// Reported accuracy radius range, meters.
    pub accuracy_range_m: (f64, f64),
    /// Multiplier on the accuracy-scaled position noise (0 disables noise).
    pub noise_scale: f64,
    /// Stationary dwell after arrival before the terminal fix, seconds.
    pub dwell_s: f64,
}

impl Default for PingModel {
    fn default() -> Self {
        PingModel {
            ios_spacing_m: 50.0,
            android_period_s: 300.0,
            accuracy_range_m: (5.0, 35.0),
            noise_scale: 1.0,
            dwell_s: 120.0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent per-item RNG derived from the master seed by counter
/// splitting, so item order never perturbs other items' draws.
pub fn subseed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_mul(0x517c_c1b7_2722_0a95) ^ index))
}

struct SpaceTimePath {
    /// (position, seconds since departure) knots.
    knots: Vec<(Point2<f64>, f64)>,
}

impl SpaceTimePath {
    fn duration(&self) -> f64 {
        self.knots.last().map(|k| k.1).unwrap_or(0.0)
    }

    fn position_at(&self, t: f64) -> Point2<f64> {
        match self.knots.iter().position(|k| k.1 >= t) {
            Some(0) | None => self.knots.last().map(|k| k.0).unwrap_or_default(),
            Some(idx) => {
                let (a, ta) = self.knots[idx - 1];
                let (b, tb) = self.knots[idx];
                if tb <= ta {
                    return b;
                }
                let f = (t - ta) / (tb - ta);
                Point2::new(a.x1 + f * (b.x1 - a.x1), a.x2 + f * (b.x2 - a.x2))
            }
        }
    }

    /// Arc length traveled by time `t`.
    fn displacement_at(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for pair in self.knots.windows(2) {
            let ((a, ta), (b, tb)) = (pair[0], pair[1]);
            if t >= tb {
                acc += a.dist(&b);
            } else if t > ta {
                acc += a.dist(&b) * (t - ta) / (tb - ta);
                break;
            } else {
                break;
            }
        }
        acc
    }
}

/// Simulate journeys toward the campus. Each journey walks the true
/// shortest-time path from a uniformly drawn lattice origin, emitting
/// device-specific fixes with accuracy-scaled position noise; the terminal
/// stationary fix lands inside the arrival window.
pub fn simulate_journeys(
    oracle: &TravelOracle,
    n_journeys: usize,
    android_share: f64,
    ping: &PingModel,
    window: &StudyWindow,
    seed: u64,
) -> Result<Vec<GpsPoint>> {
    if n_journeys == 0 {
        return Ok(Vec::new());
    }
    window.validate()?;
    let mut dates = Vec::new();
    let mut d = window.date_start.days_from_epoch();
    while d <= window.date_end.days_from_epoch() {
        let date = crate::time::CivilDate::from_days(d);
        if window
            .weekdays
            .contains(&crate::time::Weekday::from_days_from_epoch(d))
        {
            dates.push(date);
        }
        d += 1;
    }
    if dates.is_empty() {
        return Err(Error::InvalidConfig("study window contains no usable days".into()));
    }

    // Scheduling stream: users, devices, dates.
    let mut sched = ChaCha8Rng::seed_from_u64(subseed(seed, 0, 0));
    let mut users: Vec<(String, DeviceType, Vec<usize>)> = Vec::new(); // (id, device, used date idx)
    let mut assignments: Vec<(usize, usize)> = Vec::new(); // (user idx, date idx) per journey
    for _ in 0..n_journeys {
        let reuse = !users.is_empty() && sched.random::<f64>() < 0.35;
        let ui = if reuse {
            users.len() - 1
        } else {
            let device = if sched.random::<f64>() < android_share {
                DeviceType::Android
            } else {
                DeviceType::Ios
            };
            users.push((format!("u{:05}", users.len()), device, Vec::new()));
            users.len() - 1
        };
        // A fresh date for this user keeps their journeys cleanly separated.
        let mut di = sched.random_range(0..dates.len());
        let mut guard = 0;
        while users[ui].2.contains(&di) && guard < 64 {
            di = sched.random_range(0..dates.len());
            guard += 1;
        }
        if users[ui].2.contains(&di) {
            // Ran out of dates for this user; give them a fresh identity.
            let device = users[ui].1;
            users.push((format!("u{:05}", users.len()), device, Vec::new()));
        }
        let ui = if users[ui].2.contains(&di) { users.len() - 1 } else { ui };
        users[ui].2.push(di);
        assignments.push((ui, di));
    }

    let arrival_span = (window.arrival_end - window.arrival_start) as f64 - ping.dwell_s;
    if arrival_span <= 0.0 {
        return Err(Error::InvalidConfig(
            "arrival window shorter than the terminal dwell".into(),
        ));
    }

    let mut points = Vec::new();
    for (j, (ui, di)) in assignments.iter().enumerate() {
        let (ref user_id, device, _) = users[*ui];
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 1, j as u64));
        let norm = Normal::<f64>::new(0.0, 1.0).expect("unit normal");

        let origin_node = rng.random_range(0..oracle.lattice_len());
        let path_nodes = oracle.path_to_campus(origin_node);
        let depart_time = oracle.times_s[origin_node];
        let knots: Vec<(Point2<f64>, f64)> = path_nodes
            .iter()
            .map(|&nid| (oracle.node_pos[nid], depart_time - oracle.times_s[nid]))
            .collect();
        let path = SpaceTimePath { knots };
        let duration = path.duration();

        // Terminal fix lands uniformly inside the arrival band.
        let terminal_tod = window.arrival_start as f64 + rng.random::<f64>() * arrival_span + ping.dwell_s;
        let t_terminal = unix_from_local(dates[*di], terminal_tod as u32, window.utc_offset_secs);
        let t_arrive = t_terminal - ping.dwell_s as i64;
        let t_depart = t_arrive - duration.round() as i64;

        let mut emit = |pos: Point2<f64>, t: i64, rng: &mut ChaCha8Rng| {
            let accuracy = rng.random_range(ping.accuracy_range_m.0..=ping.accuracy_range_m.1);
            let sd = ping.noise_scale * accuracy / 1.5;
            let noisy = Point2::new(pos.x1 + sd * norm.sample(rng), pos.x2 + sd * norm.sample(rng));
            points.push(GpsPoint {
                user_id: user_id.clone(),
                device_type: device,
                t,
                pos: noisy,
                accuracy,
            });
        };

        // Home fix at departure.
        emit(path.position_at(0.0), t_depart, &mut rng);

        match device {
            DeviceType::Android => {
                let mut offset = ping.android_period_s;
                while offset < duration {
                    emit(path.position_at(offset), t_depart + offset as i64, &mut rng);
                    offset += ping.android_period_s;
                }
            }
            DeviceType::Ios => {
                let total = path.displacement_at(duration);
                let mut target = ping.ios_spacing_m;
                let mut t_lo = 0.0f64;
                while target < total {
                    // Invert displacement(t) by bisection on [t_lo, duration].
                    let mut lo = t_lo;
                    let mut hi = duration;
                    for _ in 0..40 {
                        let mid = 0.5 * (lo + hi);
                        if path.displacement_at(mid) < target {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let t = 0.5 * (lo + hi);
                    emit(path.position_at(t), t_depart + t as i64, &mut rng);
                    t_lo = t;
                    target += ping.ios_spacing_m;
                }
            }
        }

        // Arrival fix at the campus, then the stationary terminal fix that
        // the stop detector turns into the journey's endpoint.
        emit(oracle.node_pos[oracle.campus_node], t_arrive, &mut rng);
        emit(oracle.node_pos[oracle.campus_node], t_terminal, &mut rng);
    }

    // Stable provider-dump order: by user then time.
    points.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.t.cmp(&b.t)));
    Ok(points)
}

/// Convert simulated planar pings back to provider records (angular
/// coordinates) so the full ingest path runs unchanged on synthetic data.
pub fn to_raw_records(points: &[GpsPoint], zone: UtmZone) -> Result<Vec<RawGpsRecord>> {
    points
        .iter()
        .map(|p| {
            let (lon, lat) = utm::unproject(p.pos.x1, p.pos.x2, zone)?;
            Ok(RawGpsRecord {
                user_id: p.user_id.clone(),
                device_type: p.device_type,
                timestamp: p.t,
                longitude: lon,
                latitude: lat,
                accuracy: p.accuracy,
            })
        })
        .collect()
}

pub const ORACLE_CSV_HEADER: &str = "x1,x2,true_minutes";

pub fn write_oracle_csv(w: &mut impl Write, oracle: &TravelOracle) -> std::io::Result<()> {
    writeln!(w, "{ORACLE_CSV_HEADER}")?;
    for i in 0..oracle.lattice_len() {
        let p = oracle.node_pos[i];
        writeln!(w, "{},{},{}", p.x1, p.x2, oracle.times_s[i] / 60.0)?;
    }
    Ok(())
}

/// Cohort generator specification. The dose-response polynomial maps hours
/// of commuting to GPA points; confounding tilts home locations toward or
/// away from the campus by income and by the program's own intercept.
#[derive(Debug, Clone)]
pub struct CohortSpec {
    pub n_students: usize,
    pub n_programs: usize,
    /// GPA = sum_d coef[d] * hours^d + covariate effects + u + noise.
    pub dose_response: Vec<f64>,
    pub confounding_strength: f64,
    pub noise_sd: f64,
    pub sigma_u: f64,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_students < self.n_programs || self.n_programs == 0 {
            return Err(Error::InvalidConfig(
                "need n_students >= n_programs >= 1".into(),
            ));
        }
        if self.noise_sd < 0.0 || self.sigma_u < 0.0 {
            return Err(Error::InvalidConfig("noise SDs must be >= 0".into()));
        }
        if self.dose_response.is_empty() {
            return Err(Error::InvalidConfig("dose_response needs coefficients".into()));
        }
        Ok(())
    }

    pub fn dose_at(&self, hours: f64) -> f64 {
        let mut acc = 0.0;
        let mut pow = 1.0;
        for c in &self.dose_response {
            acc += c * pow;
            pow *= hours;
        }
        acc
    }
}

/// Target covariate distribution (shares sum to one per block).
const FEMALE_SHARE: f64 = 0.27;
const INCOME_SHARES: [(Income, f64); 4] = [
    (Income::High, 0.554),
    (Income::Middle, 0.189),
    (Income::Low, 0.075),
    (Income::Grant, 0.182),
];
const TRACK_SHARES: [(HsTrack, f64); 4] = [
    (HsTrack::Scientific, 0.876),
    (HsTrack::Humanistic, 0.057),
    (HsTrack::Technical, 0.051),
    (HsTrack::Other, 0.016),
];
const AGE_MEAN: f64 = 0.57;
const AGE_SD: f64 = 1.11;
const GRADE_MEAN: f64 = 0.82;
const GRADE_SD: f64 = 0.11;

/// Additive covariate effects on GPA used by the generator. The grade
/// enters with a curvature term on top of its linear effect.
fn covariate_effect(r: &StudentRecord) -> f64 {
    let mut e = 0.0;
    if r.gender == Gender::Female {
        e -= 0.6;
    }
    e -= 0.15 * r.admission_age;
    e += match r.income {
        Income::High => 0.0,
        Income::Middle => -0.3,
        Income::Low => -0.5,
        Income::Grant => -0.4,
    };
    e += 5.0 * (r.hs_grade - GRADE_MEAN);
    e += GRADE_CURVE_COEF * grade_curvature(r.hs_grade);
    e += match r.hs_track {
        HsTrack::Scientific => 0.0,
        HsTrack::Humanistic => -0.8,
        HsTrack::Technical => -0.5,
        HsTrack::Other => -0.6,
    };
    e
}

fn income_tilt(income: Income) -> f64 {
    match income {
        Income::High => 1.0,
        Income::Middle => 0.0,
        Income::Low => -0.7,
        Income::Grant => -1.0,
    }
}

/// Standardized-squared high-school grade, centered to mean zero under the
/// generator's grade distribution; bounded in [-1, 3] by the grade range.
fn grade_curvature(hs_grade: f64) -> f64 {
    let z = (hs_grade - GRADE_MEAN) / GRADE_SD;
    z * z - 1.0
}

/// Coefficient of the quadratic grade effect on GPA. An outcome model
/// that enters the grade linearly does not nest this term, which is what
/// makes balancing weights earn their keep on confounded draws.
const GRADE_CURVE_COEF: f64 = -0.55;
/// Location-tilt weight of the grade curvature per unit of confounding
/// strength: students with extreme grades live closer to the campus.
const GRADE_TILT: f64 = 1.2;

fn mean_income_tilt() -> f64 {
    INCOME_SHARES
        .iter()
        .map(|(income, share)| share * income_tilt(*income))
        .sum()
}

/// Effect-modification scale per unit of confounding strength. The
/// modifier multiplies the raw treatment, so an additive model's slope
/// absorbs the full income-by-treatment distortion.
const EFFECT_MOD_SLOPE: f64 = 2.0;

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Generate the cohort over a travel-time field (the true oracle, or an
/// estimated map to exercise the two-step pipeline).
pub fn generate_cohort(spec: &CohortSpec, field: &dyn TravelField) -> Result<Vec<StudentRecord>> {
    spec.validate()?;
    let n_nodes = field.node_count();
    if n_nodes == 0 {
        return Err(Error::EmptySamples);
    }
    let max_minutes = (0..n_nodes)
        .map(|i| field.node_minutes(i))
        .fold(0.0f64, f64::max)
        .max(1e-9);

    // Program intercepts from their own stream.
    let mut prog_rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, 10, 0));
    let norm = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let program_u: Vec<f64> = (0..spec.n_programs)
        .map(|_| spec.sigma_u * norm.sample(&mut prog_rng))
        .collect();
    let program_u2: Vec<f64> = (0..spec.n_programs)
        .map(|_| 0.3 * norm.sample(&mut prog_rng))
        .collect();

    let mut records = Vec::with_capacity(spec.n_students);
    for i in 0..spec.n_students {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, 11, i as u64));

        let gender = if rng.random::<f64>() < FEMALE_SHARE {
            Gender::Female
        } else {
            Gender::Male
        };
        let admission_age = (AGE_MEAN + AGE_SD * norm.sample(&mut rng)).round().clamp(-1.0, 14.0);
        let income = pick(&INCOME_SHARES, rng.random::<f64>());
        let hs_grade = loop {
            let g = GRADE_MEAN + GRADE_SD * norm.sample(&mut rng);
            if (0.6..=1.0).contains(&g) {
                break g;
            }
        };
        let hs_track = pick(&TRACK_SHARES, rng.random::<f64>());
        let program_id = 1 + rng.random_range(0..spec.n_programs);
        let u = program_u[program_id - 1];

        // Home draw: the tilt score scales how strongly low travel times
        // are preferred; positive score pulls toward the campus.
        let u_std = if spec.sigma_u > 0.0 { u / spec.sigma_u } else { 0.0 };
        let score = spec.confounding_strength
            * (income_tilt(income) + 0.8 * u_std + GRADE_TILT * grade_curvature(hs_grade));
        let home_node = sample_node(field, n_nodes, max_minutes, score, &mut rng);
        let home = field.field_node_pos(home_node);
        let commute_hours = field.node_minutes(home_node) / 60.0;

        let mut record = StudentRecord {
            student_id: format!("s{i:05}"),
            gender,
            admission_age,
            income,
            hs_grade,
            hs_track,
            program_id,
            commute_hours,
            gpa: None,
            passed_any: false,
            home: Some(home),
        };

        let eta = 1.2 + 2.5 * (hs_grade - GRADE_MEAN) - 0.3 * commute_hours
            + program_u2[program_id - 1];
        record.passed_any = rng.random::<f64>() < logistic(eta);
        if record.passed_any {
            // Confounding also modifies the treatment slope by income.
            // Centering the modifier keeps the population dose-response
            // equal to the configured polynomial, while an additive-only
            // outcome model remains misspecified on confounded draws.
            let effect_mod = EFFECT_MOD_SLOPE
                * spec.confounding_strength
                * (income_tilt(income) - mean_income_tilt())
                * commute_hours;
            let mean = spec.dose_at(commute_hours) + covariate_effect(&record) + effect_mod + u;
            let gpa = mean + spec.noise_sd * norm.sample(&mut rng);
            record.gpa = Some(gpa.clamp(0.0, 12.0));
        }
        records.push(record);
    }
    Ok(records)
}

fn pick<T: Copy>(shares: &[(T, f64)], draw: f64) -> T {
    let mut acc = 0.0;
    for (value, share) in shares {
        acc += share;
        if draw < acc {
            return *value;
        }
    }
    shares[shares.len() - 1].0
}

/// Weighted node draw with weight exp(-score * t/t_max), computed with a
/// single cumulative pass.
fn sample_node(
    field: &dyn TravelField,
    n_nodes: usize,
    max_minutes: f64,
    score: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    if score == 0.0 {
        return rng.random_range(0..n_nodes);
    }
    let mut total = 0.0;
    let weights: Vec<f64> = (0..n_nodes)
        .map(|i| {
            let w = (-score * field.node_minutes(i) / max_minutes).exp();
            total += w;
            w
        })
        .collect();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    n_nodes - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    pub(crate) fn toy_city(transit: bool) -> CityModel {
        let mut lines = Vec::new();
        if transit {
            lines.push(TransitLine {
                name: "m1".into(),
                path: vec![Point2::new(0.0, 2000.0), Point2::new(4000.0, 2000.0)],
                speed_ms: 12.0,
                station_spacing_m: 500.0,
            });
        }
        CityModel {
            bbox: Rect::new(0.0, 0.0, 4000.0, 4000.0),
            walk_speed_ms: 1.4,
            lattice_pitch_m: 100.0,
            boarding_secs: 30.0,
            transit: lines,
            campus: CampusSite::new("campus", 2000.0, 2000.0),
        }
    }

    #[test]
    fn uniform_medium_times_are_monotone_in_lattice_distance() {
        let oracle = build_oracle(&toy_city(false)).unwrap();
        assert_eq!(oracle.times_s[oracle.campus_node], 0.0);
        // Octile distance ordering: farther nodes never have smaller times.
        let (cx, cy) = (
            oracle.campus_node % oracle.nx,
            oracle.campus_node / oracle.nx,
        );
        let octile = |ix: usize, iy: usize| -> f64 {
            let dx = (ix as f64 - cx as f64).abs();
            let dy = (iy as f64 - cy as f64).abs();
            dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)
        };
        for iy in 0..oracle.ny {
            for ix in 0..oracle.nx {
                let i = iy * oracle.nx + ix;
                let expect = octile(ix, iy) * 100.0 / 1.4;
                assert!(
                    (oracle.times_s[i] - expect).abs() < 1e-6,
                    "node ({ix},{iy})"
                );
                if i != oracle.campus_node {
                    assert!(oracle.times_s[i] > 0.0);
                }
            }
        }
    }

    #[test]
    fn transit_line_never_slows_anyone_down() {
        let without = build_oracle(&toy_city(false)).unwrap();
        let with = build_oracle(&toy_city(true)).unwrap();
        for i in 0..without.lattice_len() {
            assert!(with.times_s[i] <= without.times_s[i] + 1e-9);
        }
        // Far nodes on the line benefit strictly.
        let far_on_line = with.nearest_lattice_node(&Point2::new(3900.0, 2000.0));
        assert!(with.times_s[far_on_line] < without.times_s[far_on_line] * 0.6);
    }

    #[test]
    fn five_by_five_lattice_matches_exhaustive_search() {
        let city = CityModel {
            bbox: Rect::new(0.0, 0.0, 400.0, 400.0),
            walk_speed_ms: 1.0,
            lattice_pitch_m: 100.0,
            boarding_secs: 15.0,
            transit: vec![TransitLine {
                name: "t".into(),
                path: vec![Point2::new(0.0, 0.0), Point2::new(400.0, 400.0)],
                speed_ms: 10.0,
                station_spacing_m: 200.0,
            }],
            campus: CampusSite::new("c", 200.0, 200.0),
        };
        let oracle = build_oracle(&city).unwrap();

        // Exhaustive Bellman-Ford over the same edge set, rebuilt here.
        let n = oracle.node_pos.len();
        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        let nx = oracle.nx;
        for iy in 0..5usize {
            for ix in 0..5usize {
                let a = iy * nx + ix;
                if ix + 1 < 5 {
                    edges.push((a, a + 1, 100.0));
                }
                if iy + 1 < 5 {
                    edges.push((a, a + nx, 100.0));
                    if ix + 1 < 5 {
                        edges.push((a, a + nx + 1, 100.0 * std::f64::consts::SQRT_2));
                    }
                    if ix > 0 {
                        edges.push((a, a + nx - 1, 100.0 * std::f64::consts::SQRT_2));
                    }
                }
            }
        }
        // Stations at arc 0, 200, 400, plus the endpoint rule.
        let diag = std::f64::consts::SQRT_2;
        let station_pos = [
            Point2::new(0.0, 0.0),
            Point2::new(200.0 / diag, 200.0 / diag),
            Point2::new(400.0 / diag, 400.0 / diag),
            Point2::new(400.0, 400.0),
        ];
        for (si, p) in station_pos.iter().enumerate() {
            let node = 25 + si;
            let ix = (p.x1 / 100.0).round() as usize;
            let iy = (p.x2 / 100.0).round() as usize;
            let lattice = iy * nx + ix;
            let board = 15.0 + p.dist(&oracle.node_pos[lattice]) / 1.0;
            edges.push((node, lattice, board.max(1e-6)));
            if si > 0 {
                edges.push((node, node - 1, station_pos[si - 1].dist(p) / 10.0));
            }
        }
        let mut dist = vec![f64::INFINITY; n];
        dist[oracle.campus_node] = 0.0;
        for _ in 0..n {
            for &(a, b, w) in &edges {
                if dist[a] + w < dist[b] {
                    dist[b] = dist[a] + w;
                }
                if dist[b] + w < dist[a] {
                    dist[a] = dist[b] + w;
                }
            }
        }
        for i in 0..n {
            assert!(
                (oracle.times_s[i] - dist[i]).abs() < 1e-9,
                "node {i}: {} vs {}",
                oracle.times_s[i],
                dist[i]
            );
        }
    }

    #[test]
    fn journeys_are_deterministic_in_the_seed() {
        let oracle = build_oracle(&toy_city(true)).unwrap();
        let window = StudyWindow::default_study_period();
        let a = simulate_journeys(&oracle, 20, 0.5, &PingModel::default(), &window, 99).unwrap();
        let b = simulate_journeys(&oracle, 20, 0.5, &PingModel::default(), &window, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate_journeys(&oracle, 20, 0.5, &PingModel::default(), &window, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_labels_reproduce_oracle_times() {
        use crate::trajectory::{self, StopCriteria};

        let oracle = build_oracle(&toy_city(true)).unwrap();
        let window = StudyWindow::default_study_period();
        let ping = PingModel {
            noise_scale: 0.0,
            ..PingModel::default()
        };
        let points = simulate_journeys(&oracle, 40, 0.5, &ping, &window, 5).unwrap();
        let journeys = trajectory::extract_journeys(&points, &StopCriteria::default()).unwrap();
        let filtered = trajectory::filter_journeys(
            journeys,
            &oracle.campus,
            &window,
            trajectory::DEFAULT_MAX_ACCURACY_M,
            trajectory::DEFAULT_MIN_POINTS,
        );
        assert!(
            filtered.kept.len() >= 15,
            "only {} journeys survived",
            filtered.kept.len()
        );
        let interval_slack = ping.android_period_s.max(60.0) + ping.dwell_s;
        for j in &filtered.kept {
            for s in trajectory::label_commute_times(j) {
                let truth_min = oracle.true_seconds_at(&s.pos) / 60.0;
                let label_offset = s.y_minutes - ping.dwell_s / 60.0;
                assert!(
                    (label_offset - truth_min).abs() <= interval_slack / 60.0 + 1.0,
                    "label {} vs truth {truth_min}",
                    s.y_minutes
                );
            }
        }
    }

    #[test]
    fn cohort_covariates_hit_their_targets() {
        let oracle = build_oracle(&toy_city(true)).unwrap();
        let spec = CohortSpec {
            n_students: 5000,
            n_programs: 10,
            dose_response: vec![7.0, -2.0],
            confounding_strength: 0.0,
            noise_sd: 1.0,
            sigma_u: 0.5,
            seed: 21,
        };
        let cohort = generate_cohort(&spec, &oracle).unwrap();
        let n = cohort.len() as f64;

        let share = |pred: &dyn Fn(&StudentRecord) -> bool| {
            cohort.iter().filter(|r| pred(r)).count() as f64 / n
        };
        let se = |p: f64| (p * (1.0 - p) / n).sqrt();
        let female = share(&|r| r.gender == Gender::Female);
        assert!((female - FEMALE_SHARE).abs() < 3.0 * se(FEMALE_SHARE));
        let grant = share(&|r| r.income == Income::Grant);
        assert!((grant - 0.182).abs() < 3.0 * se(0.182));
        let scientific = share(&|r| r.hs_track == HsTrack::Scientific);
        assert!((scientific - 0.876).abs() < 3.0 * se(0.876));

        let ages: Vec<f64> = cohort.iter().map(|r| r.admission_age).collect();
        let ones = vec![1.0; cohort.len()];
        assert!((stats::weighted_mean(&ages, &ones) - AGE_MEAN).abs() < 3.0 * AGE_SD / n.sqrt() + 0.08);
        let grades: Vec<f64> = cohort.iter().map(|r| r.hs_grade).collect();
        assert!((stats::weighted_mean(&grades, &ones) - GRADE_MEAN).abs() < 0.02);
    }

    #[test]
    fn constant_dose_response_leaves_no_treatment_signal() {
        let oracle = build_oracle(&toy_city(true)).unwrap();
        let spec = CohortSpec {
            n_students: 5000,
            n_programs: 8,
            dose_response: vec![6.0],
            confounding_strength: 0.0,
            noise_sd: 0.8,
            sigma_u: 0.0,
            seed: 33,
        };
        let cohort = generate_cohort(&spec, &oracle).unwrap();
        let passers: Vec<&StudentRecord> = cohort.iter().filter(|r| r.passed_any).collect();

        // Residualize GPA on the generator's own covariate effect, then
        // correlate with the treatment.
        let resid: Vec<f64> = passers
            .iter()
            .map(|r| r.gpa.unwrap() - covariate_effect(r))
            .collect();
        let a: Vec<f64> = passers.iter().map(|r| r.commute_hours).collect();
        let ones = vec![1.0; passers.len()];
        let rho = stats::weighted_pearson(&a, &resid, &ones).unwrap();
        assert!(rho.abs() < 0.05, "rho = {rho}");
    }

    #[test]
    fn noiseless_cohort_is_a_deterministic_function() {
        let oracle = build_oracle(&toy_city(false)).unwrap();
        let spec = CohortSpec {
            n_students: 200,
            n_programs: 4,
            dose_response: vec![7.0, -2.0],
            confounding_strength: 0.0,
            noise_sd: 0.0,
            sigma_u: 0.0,
            seed: 8,
        };
        let a = generate_cohort(&spec, &oracle).unwrap();
        let b = generate_cohort(&spec, &oracle).unwrap();
        assert_eq!(a, b);
        for r in a.iter().filter(|r| r.passed_any) {
            let expect = (spec.dose_at(r.commute_hours) + covariate_effect(r)).clamp(0.0, 12.0);
            assert!((r.gpa.unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn confounding_tilts_home_locations_by_income() {
        let oracle = build_oracle(&toy_city(true)).unwrap();
        let spec = CohortSpec {
            n_students: 4000,
            n_programs: 6,
            dose_response: vec![7.0, -2.0],
            confounding_strength: 1.0,
            noise_sd: 1.0,
            sigma_u: 0.5,
            seed: 55,
        };
        let cohort = generate_cohort(&spec, &oracle).unwrap();
        let mean_time = |inc: Income| {
            let xs: Vec<f64> = cohort
                .iter()
                .filter(|r| r.income == inc)
                .map(|r| r.commute_hours)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean_time(Income::High) < mean_time(Income::Grant));
    }
}
