//! Civil-date arithmetic for unix timestamps.
//!
//! The study window is evaluated in local civil time obtained from unix
//! seconds plus a fixed UTC offset; no daylight-saving table is needed for
//! a December study period.

use crate::error::{Error, Result};

pub const SECS_PER_DAY: i64 = 86_400;

/// Proleptic Gregorian calendar date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CivilDate {
    pub year: i32,
    pub month: u32,
    pub day: u32,
}

impl CivilDate {
    pub fn new(year: i32, month: u32, day: u32) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return Err(Error::InvalidInput(format!(
                "invalid calendar date {year:04}-{month:02}-{day:02}"
            )));
        }
        Ok(CivilDate { year, month, day })
    }

    /// Days since the unix epoch (1970-01-01), Howard Hinnant's algorithm.
    pub fn days_from_epoch(&self) -> i64 {
        let y = i64::from(self.year) - i64::from(self.month <= 2);
        let era = if y >= 0 { y } else { y - 399 } / 400;
        let yoe = y - era * 400;
        let m = i64::from(self.month);
        let d = i64::from(self.day);
        let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe - 719_468
    }

    pub fn from_days(days: i64) -> Self {
        let z = days + 719_468;
        let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
        let doe = z - era * 146_097;
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let y = yoe + era * 400;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let d = doy - (153 * mp + 2) / 5 + 1;
        let m = if mp < 10 { mp + 3 } else { mp - 9 };
        CivilDate {
            year: (y + i64::from(m <= 2)) as i32,
            month: m as u32,
            day: d as u32,
        }
    }

    /// Parse `YYYY-MM-DD`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let bad = || Error::InvalidInput(format!("expected YYYY-MM-DD date, found `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let year: i32 = parts[0].parse().map_err(|_| bad())?;
        let month: u32 = parts[1].parse().map_err(|_| bad())?;
        let day: u32 = parts[2].parse().map_err(|_| bad())?;
        CivilDate::new(year, month, day)
    }
}

impl std::fmt::Display for CivilDate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

fn days_in_month(year: i32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap(year) => 29,
        2 => 28,
        _ => 0,
    }
}

fn is_leap(year: i32) -> bool {
    year % 4 == 0 && (year % 100 != 0 || year % 400 == 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weekday {
    Mon,
    Tue,
    Wed,
    Thu,
    Fri,
    Sat,
    Sun,
}

impl Weekday {
    pub fn from_days_from_epoch(days: i64) -> Weekday {
        // 1970-01-01 was a Thursday, so +3 lands Monday on residue 0.
        match (days + 3).rem_euclid(7) {
            0 => Weekday::Mon,
            1 => Weekday::Tue,
            2 => Weekday::Wed,
            3 => Weekday::Thu,
            4 => Weekday::Fri,
            5 => Weekday::Sat,
            _ => Weekday::Sun,
        }
    }

    pub fn parse(s: &str) -> Result<Weekday> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mon" | "monday" => Ok(Weekday::Mon),
            "tue" | "tuesday" => Ok(Weekday::Tue),
            "wed" | "wednesday" => Ok(Weekday::Wed),
            "thu" | "thursday" => Ok(Weekday::Thu),
            "fri" | "friday" => Ok(Weekday::Fri),
            "sat" | "saturday" => Ok(Weekday::Sat),
            "sun" | "sunday" => Ok(Weekday::Sun),
            other => Err(Error::InvalidInput(format!("unknown weekday `{other}`"))),
        }
    }
}

/// Local calendar date and second-of-day for a unix timestamp under a fixed
/// UTC offset.
pub fn local_civil(unix_secs: i64, utc_offset_secs: i32) -> (CivilDate, u32, Weekday) {
    let local = unix_secs + i64::from(utc_offset_secs);
    let days = local.div_euclid(SECS_PER_DAY);
    let sec_of_day = local.rem_euclid(SECS_PER_DAY) as u32;
    (
        CivilDate::from_days(days),
        sec_of_day,
        Weekday::from_days_from_epoch(days),
    )
}

/// Unix timestamp of local `date` at `sec_of_day` under a fixed UTC offset.
pub fn unix_from_local(date: CivilDate, sec_of_day: u32, utc_offset_secs: i32) -> i64 {
    date.days_from_epoch() * SECS_PER_DAY + i64::from(sec_of_day) - i64::from(utc_offset_secs)
}

/// Parse `HH:MM` or `HH:MM:SS` into seconds of day.
pub fn parse_time_of_day(s: &str) -> Result<u32> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidInput(format!("expected HH:MM[:SS] time, found `{s}`"));
    if parts.len() != 2 && parts.len() != 3 {
        return Err(bad());
    }
    let h: u32 = parts[0].parse().map_err(|_| bad())?;
    let m: u32 = parts[1].parse().map_err(|_| bad())?;
    let sec: u32 = if parts.len() == 3 {
        parts[2].parse().map_err(|_| bad())?
    } else {
        0
    };
    if h >= 24 || m >= 60 || sec >= 60 {
        return Err(bad());
    }
    Ok(h * 3600 + m * 60 + sec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_roundtrip() {
        for &days in &[-1_000_000, -1, 0, 1, 18_000, 20_000, 1_000_000] {
            let d = CivilDate::from_days(days);
            assert_eq!(d.days_from_epoch(), days);
        }
    }

    #[test]
    fn known_dates() {
        let d = CivilDate::new(2019, 12, 2).unwrap();
        assert_eq!(Weekday::from_days_from_epoch(d.days_from_epoch()), Weekday::Mon);
        let d = CivilDate::new(2019, 12, 1).unwrap();
        assert_eq!(Weekday::from_days_from_epoch(d.days_from_epoch()), Weekday::Sun);
        assert_eq!(CivilDate::from_days(0), CivilDate::new(1970, 1, 1).unwrap());
    }

    #[test]
    fn local_conversion_with_offset() {
        // 2019-12-02 08:15:00 CET (+1h) == 07:15 UTC.
        let date = CivilDate::new(2019, 12, 2).unwrap();
        let t = unix_from_local(date, 8 * 3600 + 15 * 60, 3600);
        let (d, sec, wd) = local_civil(t, 3600);
        assert_eq!(d, date);
        assert_eq!(sec, 8 * 3600 + 15 * 60);
        assert_eq!(wd, Weekday::Mon);
        let (_, sec_utc, _) = local_civil(t, 0);
        assert_eq!(sec_utc, 7 * 3600 + 15 * 60);
    }

    #[test]
    fn time_of_day_parse() {
        assert_eq!(parse_time_of_day("07:30").unwrap(), 27_000);
        assert_eq!(parse_time_of_day("09:30:05").unwrap(), 34_205);
        assert!(parse_time_of_day("24:00").is_err());
        assert!(CivilDate::parse("2019-13-01").is_err());
    }
}
