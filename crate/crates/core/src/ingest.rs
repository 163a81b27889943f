//! Raw GPS record parsing, planar projection, and study-window filtering.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point2, Rect};
use crate::time::{local_civil, CivilDate, Weekday};
use crate::utm::{self, UtmZone};

pub const GPS_CSV_HEADER: &str = "user_id,device_type,timestamp,longitude,latitude,accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceType {
    Android,
    Ios,
}

impl DeviceType {
    pub fn parse(s: &str) -> Option<DeviceType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "android" => Some(DeviceType::Android),
            "ios" => Some(DeviceType::Ios),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceType::Android => "android",
            DeviceType::Ios => "ios",
        }
    }
}

/// One row of the provider CSV: angular coordinates, unix time, and the
/// 68%-radius accuracy of the fix.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGpsRecord {
    pub user_id: String,
    pub device_type: DeviceType,
    pub timestamp: i64,
    pub longitude: f64,
    pub latitude: f64,
    pub accuracy: f64,
}

impl RawGpsRecord {
    fn check_invariants(&self) -> std::result::Result<(), String> {
        if !(self.accuracy > 0.0) {
            return Err(format!("accuracy {} must be positive", self.accuracy));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(format!("longitude {} out of [-180,180]", self.longitude));
        }
        if !(self.latitude > -90.0 && self.latitude < 90.0) {
            return Err(format!("latitude {} out of (-90,90)", self.latitude));
        }
        if self.timestamp <= 0 {
            return Err(format!("timestamp {} must be positive", self.timestamp));
        }
        Ok(())
    }
}

/// Projected ping in the plane of the configured UTM zone.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsPoint {
    pub user_id: String,
    pub device_type: DeviceType,
    pub t: i64,
    pub pos: Point2<f64>,
    pub accuracy: f64,
}

/// Result of parsing a GPS dump: clean records plus the number of rows
/// skipped for type or invariant violations.
#[derive(Debug)]
pub struct GpsParse {
    pub records: Vec<RawGpsRecord>,
    pub skipped: usize,
}

pub fn parse_gps_csv(path: impl AsRef<Path>) -> Result<GpsParse> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_gps_reader(file, &path.display().to_string())
}

pub fn parse_gps_reader(reader: impl Read, path_label: &str) -> Result<GpsParse> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::BadRecord {
            path: path_label.to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let found = headers.iter().collect::<Vec<_>>().join(",");
    if found != GPS_CSV_HEADER {
        return Err(Error::BadHeader {
            path: path_label.to_string(),
            expected: GPS_CSV_HEADER.to_string(),
            found,
        });
    }

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for row in rdr.records() {
        let Ok(row) = row else {
            skipped += 1;
            continue;
        };
        match parse_row(&row) {
            Some(rec) if rec.check_invariants().is_ok() => records.push(rec),
            _ => skipped += 1,
        }
    }
    Ok(GpsParse { records, skipped })
}

fn parse_row(row: &csv::StringRecord) -> Option<RawGpsRecord> {
    if row.len() != 6 {
        return None;
    }
    Some(RawGpsRecord {
        user_id: row.get(0)?.to_string(),
        device_type: DeviceType::parse(row.get(1)?)?,
        timestamp: row.get(2)?.trim().parse().ok()?,
        longitude: row.get(3)?.trim().parse().ok()?,
        latitude: row.get(4)?.trim().parse().ok()?,
        accuracy: row.get(5)?.trim().parse().ok()?,
    })
}

/// Forward UTM projection of a single coordinate pair.
pub fn project_to_utm(longitude: f64, latitude: f64, zone: i32, north: bool) -> Result<(f64, f64)> {
    let zone = UtmZone::new(zone, north)?;
    utm::project(longitude, latitude, zone)
}

/// Project a batch of raw records into planar points, preserving file order.
pub fn project_records(records: &[RawGpsRecord], zone: UtmZone) -> Result<Vec<GpsPoint>> {
    records
        .iter()
        .map(|r| {
            let (x1, x2) = utm::project(r.longitude, r.latitude, zone)?;
            Ok(GpsPoint {
                user_id: r.user_id.clone(),
                device_type: r.device_type,
                t: r.timestamp,
                pos: Point2::new(x1, x2),
                accuracy: r.accuracy,
            })
        })
        .collect()
}

/// Calendar/weekday window plus the arrival time-of-day band evaluated at
/// journey level; timestamps are interpreted under a fixed UTC offset.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyWindow {
    pub date_start: CivilDate,
    pub date_end: CivilDate,
    pub weekdays: Vec<Weekday>,
    pub arrival_start: u32,
    pub arrival_end: u32,
    pub utc_offset_secs: i32,
}

impl StudyWindow {
    pub fn validate(&self) -> Result<()> {
        if self.date_start > self.date_end {
            return Err(Error::InvalidConfig(format!(
                "window start {} after end {}",
                self.date_start, self.date_end
            )));
        }
        if self.arrival_start >= self.arrival_end {
            return Err(Error::InvalidConfig(
                "arrival window start must precede its end".into(),
            ));
        }
        Ok(())
    }

    /// December 2019 working-day mornings, CET.
    pub fn default_study_period() -> StudyWindow {
        StudyWindow {
            date_start: CivilDate::new(2019, 12, 1).expect("valid date"),
            date_end: CivilDate::new(2019, 12, 20).expect("valid date"),
            weekdays: vec![
                Weekday::Mon,
                Weekday::Tue,
                Weekday::Wed,
                Weekday::Thu,
                Weekday::Fri,
            ],
            arrival_start: 7 * 3600 + 30 * 60,
            arrival_end: 9 * 3600 + 30 * 60,
            utc_offset_secs: 3600,
        }
    }

    pub fn contains_instant(&self, unix_secs: i64) -> bool {
        let (date, _, weekday) = local_civil(unix_secs, self.utc_offset_secs);
        date >= self.date_start && date <= self.date_end && self.weekdays.contains(&weekday)
    }

    pub fn arrival_time_ok(&self, unix_secs: i64) -> bool {
        let (_, sec_of_day, _) = local_civil(unix_secs, self.utc_offset_secs);
        sec_of_day >= self.arrival_start && sec_of_day <= self.arrival_end
    }
}

/// Keep points inside the date range, weekday set, and closed bounding box.
/// The arrival-time band is deliberately not applied here; it is a journey
/// property checked after segmentation.
pub fn filter_window(points: &[GpsPoint], window: &StudyWindow, bbox: &Rect<f64>) -> Vec<GpsPoint> {
    points
        .iter()
        .filter(|p| window.contains_instant(p.t) && bbox.contains(&p.pos))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::unix_from_local;

    fn fixture_csv() -> String {
        let mut s = String::from(GPS_CSV_HEADER);
        s.push('\n');
        s.push_str("u1,android,1575270600,9.19,45.4642,12.5\n");
        s.push_str("u1,iOS,1575270660,9.1905,45.4645,8.0\n");
        s.push_str("u2,ANDROID,1575270720,9.2000,45.4700,25.0\n");
        s
    }

    #[test]
    fn empty_file_with_header_parses_to_nothing() {
        let parsed = parse_gps_reader(GPS_CSV_HEADER.as_bytes(), "mem").unwrap();
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.skipped, 0);
    }

    #[test]
    fn negative_accuracy_is_skipped_with_count() {
        let data = format!("{GPS_CSV_HEADER}\nu1,android,1575270600,9.19,45.4642,-5\n");
        let parsed = parse_gps_reader(data.as_bytes(), "mem").unwrap();
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.skipped, 1);
    }

    #[test]
    fn fixture_rows_parse_field_by_field() {
        let parsed = parse_gps_reader(fixture_csv().as_bytes(), "mem").unwrap();
        assert_eq!(parsed.skipped, 0);
        assert_eq!(parsed.records.len(), 3);
        let r = &parsed.records[0];
        assert_eq!(r.user_id, "u1");
        assert_eq!(r.device_type, DeviceType::Android);
        assert_eq!(r.timestamp, 1_575_270_600);
        assert_eq!(r.longitude, 9.19);
        assert_eq!(r.latitude, 45.4642);
        assert_eq!(r.accuracy, 12.5);
        assert_eq!(parsed.records[1].device_type, DeviceType::Ios);
        assert_eq!(parsed.records[2].user_id, "u2");
    }

    #[test]
    fn wrong_header_is_fatal() {
        let data = "user,device,ts,lon,lat,acc\n";
        assert!(matches!(
            parse_gps_reader(data.as_bytes(), "mem"),
            Err(Error::BadHeader { .. })
        ));
    }

    #[test]
    fn malformed_rows_are_counted_not_fatal() {
        let data = format!(
            "{GPS_CSV_HEADER}\n\
             u1,android,notatime,9.19,45.46,10\n\
             u1,toaster,1575270600,9.19,45.46,10\n\
             u1,android,1575270600,200.0,45.46,10\n\
             u1,android,1575270600,9.19,45.46,10\n"
        );
        let parsed = parse_gps_reader(data.as_bytes(), "mem").unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.skipped, 3);
    }

    fn point_at(user: &str, t: i64, x1: f64, x2: f64) -> GpsPoint {
        GpsPoint {
            user_id: user.into(),
            device_type: DeviceType::Android,
            t,
            pos: Point2::new(x1, x2),
            accuracy: 10.0,
        }
    }

    #[test]
    fn sunday_points_are_excluded() {
        let window = StudyWindow::default_study_period();
        // 2019-12-01 was a Sunday.
        let sunday = unix_from_local(CivilDate::new(2019, 12, 1).unwrap(), 8 * 3600, 3600);
        let points = vec![point_at("u", sunday, 10.0, 10.0)];
        let bbox = Rect::new(0.0, 0.0, 100.0, 100.0);
        assert!(filter_window(&points, &window, &bbox).is_empty());
    }

    #[test]
    fn bbox_boundary_is_retained() {
        let window = StudyWindow::default_study_period();
        let monday = unix_from_local(CivilDate::new(2019, 12, 2).unwrap(), 8 * 3600, 3600);
        let bbox = Rect::new(0.0, 0.0, 100.0, 100.0);
        let points = vec![point_at("u", monday, 100.0, 0.0)];
        assert_eq!(filter_window(&points, &window, &bbox).len(), 1);
    }

    #[test]
    fn mixed_fixture_keeps_satisfying_points_in_order() {
        let window = StudyWindow::default_study_period();
        let bbox = Rect::new(0.0, 0.0, 100.0, 100.0);
        let monday = unix_from_local(CivilDate::new(2019, 12, 2).unwrap(), 8 * 3600, 3600);
        let saturday = unix_from_local(CivilDate::new(2019, 12, 7).unwrap(), 8 * 3600, 3600);
        let after_end = unix_from_local(CivilDate::new(2019, 12, 23).unwrap(), 8 * 3600, 3600);

        let points = vec![
            point_at("a", monday, 1.0, 1.0),        // keep
            point_at("a", saturday, 1.0, 1.0),      // weekday fail
            point_at("b", monday, 500.0, 1.0),      // bbox fail
            point_at("b", monday + 60, 2.0, 2.0),   // keep
            point_at("c", after_end, 1.0, 1.0),     // date fail
            point_at("c", monday + 120, 3.0, 3.0),  // keep
            point_at("c", monday + 180, -1.0, 0.0), // bbox fail
            point_at("d", saturday, 200.0, 1.0),    // both fail
            point_at("d", monday + 240, 4.0, 4.0),  // keep
            point_at("d", after_end, 5.0, 5.0),     // date fail
        ];

        // Brute-force predicate oracle.
        let expect: Vec<GpsPoint> = points
            .iter()
            .filter(|p| {
                let (date, _, wd) = local_civil(p.t, 3600);
                let in_dates = date >= window.date_start && date <= window.date_end;
                let wd_ok = window.weekdays.contains(&wd);
                let in_box = p.pos.x1 >= 0.0 && p.pos.x1 <= 100.0 && p.pos.x2 >= 0.0 && p.pos.x2 <= 100.0;
                in_dates && wd_ok && in_box
            })
            .cloned()
            .collect();

        let got = filter_window(&points, &window, &bbox);
        assert_eq!(got.len(), 4);
        assert_eq!(got, expect);

        // Idempotence.
        let twice = filter_window(&got, &window, &bbox);
        assert_eq!(twice, got);
    }
}
