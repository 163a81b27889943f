//! Nadaraya-Watson kernel regression with a nearest-neighbor adaptive
//! bandwidth, cross-validated hyperparameter tuning, and regular-grid
//! accessibility maps.
//!
//! The estimate at a query `x` is the kernel-weighted mean of the sample
//! labels, with an isotropic Gaussian kernel whose scale `h(x) = c * d_k(x)`
//! follows the distance to the `k`-th nearest sample. Per-node summation
//! order is fixed, so map construction is bitwise reproducible regardless
//! of evaluation parallelism.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{Point2, Rect};
use crate::hashing;
use crate::num::Scalar;
use crate::trajectory::{CampusSite, LabeledSample};

/// One regression observation: a planar location, its commute-time label in
/// minutes, and the journey it came from (the cross-validation unit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<T> {
    pub pos: Point2<T>,
    pub y: T,
    pub journey_id: u64,
}

/// Immutable sample collection backing estimates and maps.
#[derive(Debug, Clone)]
pub struct SampleSet<T> {
    samples: Vec<Sample<T>>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        if samples.iter().any(|s| !s.pos.is_finite() || !s.y.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample coordinates".into()));
        }
        Ok(SampleSet { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn journey_ids(&self) -> Vec<u64> {
        let mut seen = BTreeSet::new();
        let mut ids = Vec::new();
        for s in &self.samples {
            if seen.insert(s.journey_id) {
                ids.push(s.journey_id);
            }
        }
        ids
    }

    /// Samples whose journey id passes the predicate, preserving order.
    pub fn filter_journeys(&self, keep: impl Fn(u64) -> bool) -> Vec<Sample<T>> {
        self.samples
            .iter()
            .filter(|s| keep(s.journey_id))
            .copied()
            .collect()
    }
}

impl SampleSet<f64> {
    pub fn from_labeled(samples: &[LabeledSample]) -> Result<Self> {
        SampleSet::new(
            samples
                .iter()
                .map(|s| Sample {
                    pos: s.pos,
                    y: s.y_minutes,
                    journey_id: s.journey_id,
                })
                .collect(),
        )
    }
}

/// Adaptive-bandwidth hyperparameters: the neighbor count as a fraction of
/// the sample size and the multiplier applied to the neighbor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthSpec {
    pub k_frac: f64,
    pub c: f64,
}

impl BandwidthSpec {
    pub fn new(k_frac: f64, c: f64) -> Result<Self> {
        if !(k_frac > 0.0 && k_frac <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "k_frac {k_frac} must lie in (0, 1]"
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig(format!("c {c} must be positive")));
        }
        Ok(BandwidthSpec { k_frac, c })
    }

    /// Neighbor count for a sample set of size `n`: round half up, floor 1.
    pub fn k_for(&self, n: usize) -> usize {
        ((self.k_frac * n as f64).round() as usize).clamp(1, n)
    }
}

/// Distance from `x` to the `k`-th nearest sample location (1-based), with
/// exact ties broken by sample index. Linear-time selection; the estimator
/// calls this once per query point.
pub fn nn_distance<T: Scalar>(set: &SampleSet<T>, x: &Point2<T>, k: usize) -> Result<T> {
    let n = set.len();
    if k == 0 || k > n {
        return Err(Error::NeighborRankTooLarge { k, n });
    }
    let mut d2: Vec<(T, usize)> = set
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.pos.dist2(x), i))
        .collect();
    let (_, kth, _) = d2.select_nth_unstable_by(k - 1, |a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    });
    Ok(kth.0.sqrt())
}

/// Kernel-weighted mean of the labels at `x`.
///
/// With `h = 0` (the query coincides with at least `k` sample locations)
/// the weight ratio is indeterminate and the estimate falls back to the
/// arithmetic mean of the labels at zero distance.
pub fn nw_estimate<T: Scalar>(set: &SampleSet<T>, x: &Point2<T>, spec: &BandwidthSpec) -> Result<T> {
    let k = spec.k_for(set.len());
    let dk = nn_distance(set, x, k)?;
    let h = T::of(spec.c) * dk;
    nw_estimate_with_bandwidth(set, x, h)
}

/// Estimate at `x` with an explicit bandwidth (used by both the estimator
/// and the tuning loops).
pub fn nw_estimate_with_bandwidth<T: Scalar>(set: &SampleSet<T>, x: &Point2<T>, h: T) -> Result<T> {
    if set.is_empty() {
        return Err(Error::EmptySamples);
    }
    let zero = T::zero();
    if h == zero {
        let mut sum = zero;
        let mut count = zero;
        for s in &set.samples {
            if s.pos.dist2(x) == zero {
                sum += s.y;
                count += T::one();
            }
        }
        if count == zero {
            return Err(Error::InvalidInput(
                "zero bandwidth away from any sample location".into(),
            ));
        }
        return Ok(sum / count);
    }

    // exp(-d^2 / 2h^2) with the largest exponent factored out, so the total
    // weight cannot underflow at far queries.
    let inv_two_h2 = T::one() / (T::of(2.0) * h * h);
    let mut min_d2 = T::infinity();
    for s in &set.samples {
        let d2 = s.pos.dist2(x);
        if d2 < min_d2 {
            min_d2 = d2;
        }
    }
    let mut num = zero;
    let mut den = zero;
    for s in &set.samples {
        let w = (-(s.pos.dist2(x) - min_d2) * inv_two_h2).exp();
        num += w * s.y;
        den += w;
    }
    Ok(num / den)
}

/// Commuting-time surface on a regular grid anchored at the lower-left
/// corner of the buffered bounding box. Values are stored row-major with
/// the column (x1) index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessibilityMap<T> {
    pub origin: Point2<T>,
    pub spacing: T,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<T>,
    pub campus: CampusSite,
}

impl<T: Scalar> AccessibilityMap<T> {
    pub fn node_pos(&self, ix: usize, iy: usize) -> Point2<T> {
        Point2::new(
            self.origin.x1 + T::of(ix as f64) * self.spacing,
            self.origin.x2 + T::of(iy as f64) * self.spacing,
        )
    }

    pub fn value_at(&self, ix: usize, iy: usize) -> T {
        self.values[iy * self.nx + ix]
    }

    /// Extent covered by the grid nodes.
    pub fn coverage(&self) -> Rect<T> {
        Rect {
            min: self.origin,
            max: self.node_pos(self.nx - 1, self.ny - 1),
        }
    }

    fn nearest_index(coord: T, origin: T, spacing: T, count: usize) -> usize {
        let rel = (coord - origin) / spacing;
        let lo = rel.floor().to_f64_lossy().max(0.0) as usize;
        let lo = lo.min(count - 1);
        let hi = (lo + 1).min(count - 1);
        // Prefer the smaller index on exact midpoints.
        let d_lo = (coord - (origin + T::of(lo as f64) * spacing)).abs();
        let d_hi = ((origin + T::of(hi as f64) * spacing) - coord).abs();
        if d_hi < d_lo {
            hi
        } else {
            lo
        }
    }

    /// Value at the grid node nearest to `location`; ties resolve to the
    /// smallest (row, column) pair. Nearest-node distance stays within
    /// `spacing/2 * sqrt(2)` anywhere inside the node coverage.
    pub fn query(&self, location: &Point2<T>) -> Result<T> {
        let cov = self.coverage();
        if !cov.contains(location) {
            return Err(Error::OutsideMap {
                x1: location.x1.to_f64_lossy(),
                x2: location.x2.to_f64_lossy(),
                distance: cov.distance_to(location).to_f64_lossy(),
            });
        }
        let ix = Self::nearest_index(location.x1, self.origin.x1, self.spacing, self.nx);
        let iy = Self::nearest_index(location.x2, self.origin.x2, self.spacing, self.ny);
        Ok(self.value_at(ix, iy))
    }

    /// Hash of the serialized grid values, recorded in the sidecar so map
    /// files can be tied to the run that made them.
    pub fn data_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_f64_lossy().to_bits().to_le_bytes());
        }
        hashing::fnv1a(&bytes)
    }
}

pub const MAP_CSV_HEADER: &str = "x1,x2,t_hat_minutes";
pub const DEFAULT_GRID_SPACING_M: f64 = 100.0;
pub const DEFAULT_BBOX_BUFFER_M: f64 = 1000.0;

/// Lay a grid over the buffered box and evaluate the estimator at every
/// node. Node (0, 0) sits at the lower-left corner of the expanded box;
/// `nx = floor(width / spacing) + 1` and likewise for `ny`.
pub fn build_map<T: Scalar>(
    set: &SampleSet<T>,
    bbox: &Rect<T>,
    spacing: T,
    buffer: T,
    spec: &BandwidthSpec,
    campus: &CampusSite,
) -> Result<AccessibilityMap<T>> {
    if set.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !bbox.is_well_formed() || bbox.width() <= T::zero() || bbox.height() <= T::zero() {
        return Err(Error::DegenerateGrid("bounding box is degenerate".into()));
    }
    if spacing <= T::zero() {
        return Err(Error::DegenerateGrid("grid spacing must be positive".into()));
    }
    let expanded = bbox.expanded(buffer);
    let nx = (expanded.width() / spacing).floor().to_f64_lossy() as usize + 1;
    let ny = (expanded.height() / spacing).floor().to_f64_lossy() as usize + 1;

    let origin = expanded.min;
    let values: Vec<T> = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let ix = idx % nx;
            let iy = idx / nx;
            let pos = Point2::new(
                origin.x1 + T::of(ix as f64) * spacing,
                origin.x2 + T::of(iy as f64) * spacing,
            );
            nw_estimate(set, &pos, spec).expect("non-empty sample set")
        })
        .collect();

    Ok(AccessibilityMap {
        origin,
        spacing,
        nx,
        ny,
        values,
        campus: campus.clone(),
    })
}

/// Prediction error of `train`-based estimates on `test` locations.
pub fn evaluate<T: Scalar>(
    test: &SampleSet<T>,
    train: &SampleSet<T>,
    spec: &BandwidthSpec,
) -> Result<(T, T)> {
    if test.is_empty() {
        return Err(Error::EmptySamples);
    }
    let train_ids: BTreeSet<u64> = train.journey_ids().into_iter().collect();
    for s in test.samples() {
        if train_ids.contains(&s.journey_id) {
            return Err(Error::OverlappingJourneys(s.journey_id));
        }
    }
    let mut se = T::zero();
    let mut ae = T::zero();
    for s in test.samples() {
        let pred = nw_estimate(train, &s.pos, spec)?;
        let e = pred - s.y;
        se += e * e;
        ae += e.abs();
    }
    let n = T::of(test.len() as f64);
    Ok((se / n, ae / n))
}

/// One evaluated cell of the tuning grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvCell {
    pub k_frac: f64,
    pub c: f64,
    pub mse: f64,
}

/// Cross-validation outcome: the full surface, the selected pair, and its
/// held-out test error. Test metrics are absent when the sample is so small
/// that a 15% split would leave fewer than two training trajectories.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub cells: Vec<CvCell>,
    pub best: BandwidthSpec,
    pub cv_mse: f64,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub n_train_journeys: usize,
    pub n_test_journeys: usize,
}

impl CvReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "k_frac,c,cv_mse,selected")?;
        for cell in &self.cells {
            let sel = cell.k_frac == self.best.k_frac && cell.c == self.best.c;
            writeln!(
                w,
                "{},{},{},{}",
                cell.k_frac,
                cell.c,
                cell.mse,
                if sel { 1 } else { 0 }
            )?;
        }
        Ok(())
    }
}

/// Split journeys 85/15, score every `(k_frac, c)` pair by
/// leave-one-trajectory-out MSE on the training split, and report held-out
/// error for the winning pair.
///
/// Each held-out point is predicted from all training samples except those
/// sharing its journey; the neighbor count is derived from the size of that
/// reduced set. Ties on the CV surface keep the earliest grid pair.
pub fn tune_bandwidth<T: Scalar>(
    set: &SampleSet<T>,
    k_frac_grid: &[f64],
    c_grid: &[f64],
    split_seed: u64,
) -> Result<CvReport> {
    if k_frac_grid.is_empty() || c_grid.is_empty() {
        return Err(Error::InvalidConfig("empty tuning grid".into()));
    }
    let mut journeys = set.journey_ids();
    if journeys.len() < 2 {
        return Err(Error::TooFewTrajectories {
            needed: 2,
            found: journeys.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    journeys.shuffle(&mut rng);
    let mut n_test = ((journeys.len() as f64 * 0.15).round() as usize).max(1);
    if journeys.len() - n_test < 2 {
        n_test = journeys.len().saturating_sub(2);
    }
    let n_train = journeys.len() - n_test;
    let train_ids: BTreeSet<u64> = journeys[..n_train].iter().copied().collect();
    let test_ids: BTreeSet<u64> = journeys[n_train..].iter().copied().collect();

    let train = SampleSet::new(set.filter_journeys(|id| train_ids.contains(&id)))?;
    let test_samples = set.filter_journeys(|id| test_ids.contains(&id));

    let train_journeys: Vec<u64> = train.journey_ids();
    let grid: Vec<(f64, f64)> = k_frac_grid
        .iter()
        .flat_map(|&kf| c_grid.iter().map(move |&c| (kf, c)))
        .collect();

    // One distance pass per held-out point serves every grid cell; the
    // per-journey partial sums are reduced in journey order so the surface
    // is bitwise independent of the parallel schedule.
    let partials: Vec<(Vec<f64>, usize)> = train_journeys
        .par_iter()
        .map(|&jid| {
            let rest = train.filter_journeys(|id| id != jid);
            let held: Vec<Sample<T>> = train.filter_journeys(|id| id == jid);
            let n_rest = rest.len();
            let mut sse = vec![0.0f64; grid.len()];
            let mut d2 = vec![T::zero(); n_rest];
            let mut sorted = vec![T::zero(); n_rest];
            for s in &held {
                for (slot, r) in d2.iter_mut().zip(&rest) {
                    *slot = r.pos.dist2(&s.pos);
                }
                sorted.copy_from_slice(&d2);
                sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                for (ci, &(k_frac, c)) in grid.iter().enumerate() {
                    let k = BandwidthSpec { k_frac, c }.k_for(n_rest);
                    let h = T::of(c) * sorted[k - 1].sqrt();
                    let pred = if h == T::zero() {
                        let mut sum = T::zero();
                        let mut count = T::zero();
                        for (r, &dd) in rest.iter().zip(&d2) {
                            if dd == T::zero() {
                                sum += r.y;
                                count += T::one();
                            }
                        }
                        sum / count
                    } else {
                        let inv_two_h2 = T::one() / (T::of(2.0) * h * h);
                        let min_d2 = sorted[0];
                        let mut num = T::zero();
                        let mut den = T::zero();
                        for (r, &dd) in rest.iter().zip(&d2) {
                            let w = (-(dd - min_d2) * inv_two_h2).exp();
                            num += w * r.y;
                            den += w;
                        }
                        num / den
                    };
                    let e = (pred - s.y).to_f64_lossy();
                    sse[ci] += e * e;
                }
            }
            (sse, held.len())
        })
        .collect();

    let mut sse = vec![0.0f64; grid.len()];
    let mut n_points = 0usize;
    for (part, count) in &partials {
        for (acc, v) in sse.iter_mut().zip(part) {
            *acc += v;
        }
        n_points += count;
    }
    let cells: Vec<CvCell> = grid
        .iter()
        .zip(&sse)
        .map(|(&(k_frac, c), &se)| CvCell {
            k_frac,
            c,
            mse: se / n_points as f64,
        })
        .collect();

    // First strict improvement wins; improvements inside the numerical
    // noise band count as ties and keep the earlier grid pair.
    let mut best_idx = 0usize;
    for (i, cell) in cells.iter().enumerate().skip(1) {
        let tie_eps = 1e-10 * cells[best_idx].mse.max(1e-10);
        if cell.mse < cells[best_idx].mse - tie_eps {
            best_idx = i;
        }
    }
    let best = BandwidthSpec {
        k_frac: cells[best_idx].k_frac,
        c: cells[best_idx].c,
    };
    let cv_mse = cells[best_idx].mse;

    let (test_mse, test_mae) = if test_samples.is_empty() {
        (None, None)
    } else {
        let test = SampleSet::new(test_samples)?;
        let (mse, mae) = evaluate(&test, &train, &best)?;
        (Some(mse.to_f64_lossy()), Some(mae.to_f64_lossy()))
    };
    Ok(CvReport {
        cells,
        best,
        cv_mse,
        test_mse,
        test_mae,
        n_train_journeys: n_train,
        n_test_journeys: n_test,
    })
}

impl AccessibilityMap<f64> {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{MAP_CSV_HEADER}")?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let p = self.node_pos(ix, iy);
                writeln!(w, "{},{},{}", p.x1, p.x2, self.value_at(ix, iy))?;
            }
        }
        Ok(())
    }

    pub fn write_metadata(&self, w: &mut impl Write, spec: &BandwidthSpec) -> std::io::Result<()> {
        writeln!(w, "origin_x1 = {}", self.origin.x1)?;
        writeln!(w, "origin_x2 = {}", self.origin.x2)?;
        writeln!(w, "spacing = {}", self.spacing)?;
        writeln!(w, "nx = {}", self.nx)?;
        writeln!(w, "ny = {}", self.ny)?;
        writeln!(w, "campus_name = {}", self.campus.name)?;
        writeln!(w, "campus_x1 = {}", self.campus.pos.x1)?;
        writeln!(w, "campus_x2 = {}", self.campus.pos.x2)?;
        writeln!(w, "campus_radius = {}", self.campus.catchment_radius)?;
        writeln!(w, "k_frac = {}", spec.k_frac)?;
        writeln!(w, "c = {}", spec.c)?;
        writeln!(w, "data_hash = {}", hashing::fnv1a_hex(&self.hash_input()))?;
        Ok(())
    }

    fn hash_input(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes
    }

    /// Rebuild a map from its CSV grid plus sidecar metadata.
    pub fn read_csv(
        data: impl BufRead,
        meta: impl BufRead,
    ) -> Result<(AccessibilityMap<f64>, BandwidthSpec)> {
        let mut kv = std::collections::BTreeMap::new();
        for line in meta.lines() {
            let line = line.map_err(|e| Error::io("map metadata", e))?;
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("map metadata missing key {k}")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad numeric metadata {k}")))
        };
        let nx: usize = get("nx")?
            .parse()
            .map_err(|_| Error::InvalidInput("bad nx".into()))?;
        let ny: usize = get("ny")?
            .parse()
            .map_err(|_| Error::InvalidInput("bad ny".into()))?;
        let mut campus = CampusSite::new(get("campus_name")?, parse_f("campus_x1")?, parse_f("campus_x2")?);
        campus.catchment_radius = parse_f("campus_radius")?;
        let spec = BandwidthSpec::new(parse_f("k_frac")?, parse_f("c")?)?;

        let mut values = Vec::with_capacity(nx * ny);
        for (i, line) in data.lines().enumerate() {
            let line = line.map_err(|e| Error::io("map csv", e))?;
            if i == 0 {
                if line.trim() != MAP_CSV_HEADER {
                    return Err(Error::BadHeader {
                        path: "map csv".into(),
                        expected: MAP_CSV_HEADER.into(),
                        found: line,
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::BadRecord {
                    path: "map csv".into(),
                    line: i as u64 + 1,
                    message: "expected 3 fields".into(),
                });
            }
            values.push(fields[2].trim().parse().map_err(|_| Error::BadRecord {
                path: "map csv".into(),
                line: i as u64 + 1,
                message: "bad value".into(),
            })?);
        }
        if values.len() != nx * ny {
            return Err(Error::InvalidInput(format!(
                "map csv holds {} values, metadata says {}",
                values.len(),
                nx * ny
            )));
        }
        Ok((
            AccessibilityMap {
                origin: Point2::new(parse_f("origin_x1")?, parse_f("origin_x2")?),
                spacing: parse_f("spacing")?,
                nx,
                ny,
                values,
                campus,
            },
            spec,
        ))
    }
}
