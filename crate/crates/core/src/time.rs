//! Multi-granularity timestamps normalized to inclusive day intervals.
//!
//! Dumps mix years (`2004`), months (`2010-03`), days (`2010-03-05`) and
//! explicit ranges (`2010-01-01/2010-12-31`). Every form maps onto an
//! inclusive `[start_day, end_day]` pair of proleptic Gregorian day ordinals,
//! so a coarse fact covers its whole calendar unit.

use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Day,
    Month,
    Year,
    Interval,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Day => "day",
            Granularity::Month => "month",
            Granularity::Year => "year",
            Granularity::Interval => "interval",
        })
    }
}

/// Inclusive span of days. Day indices count from 0001-01-01 (= day 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start_day: i32,
    pub end_day: i32,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed timestamp {text:?}: {reason}")]
pub struct TimestampError {
    pub text: String,
    pub reason: &'static str,
}

impl TimeInterval {
    /// Builds an explicit interval. Returns `None` when `start_day > end_day`.
    pub fn new(start_day: i32, end_day: i32) -> Option<Self> {
        (start_day <= end_day).then_some(Self {
            start_day,
            end_day,
            granularity: Granularity::Interval,
        })
    }

    pub fn day(ordinal: i32) -> Self {
        Self {
            start_day: ordinal,
            end_day: ordinal,
            granularity: Granularity::Day,
        }
    }

    /// Number of days covered, inclusive on both ends.
    pub fn len_days(&self) -> i64 {
        i64::from(self.end_day) - i64::from(self.start_day) + 1
    }

    /// Inclusive overlap test.
    pub fn overlaps(&self, other: &TimeInterval) -> bool {
        self.start_day <= other.end_day && self.end_day >= other.start_day
    }

    pub fn contains_day(&self, day: i32) -> bool {
        self.start_day <= day && day <= self.end_day
    }
}

/// Day ordinal of a calendar date.
pub fn ordinal(year: i32, month: u32, day: u32) -> Option<i32> {
    NaiveDate::from_ymd_opt(year, month, day).map(|d| d.num_days_from_ce())
}

/// Inverse of [`ordinal`].
pub fn date_of(ordinal: i32) -> Option<(i32, u32, u32)> {
    NaiveDate::from_num_days_from_ce_opt(ordinal).map(|d| (d.year(), d.month(), d.day()))
}

/// Canonical `YYYY-MM-DD` rendering of a day ordinal.
pub fn format_day(ordinal: i32) -> String {
    match date_of(ordinal) {
        Some((y, m, d)) => format!("{y:04}-{m:02}-{d:02}"),
        None => format!("day#{ordinal}"),
    }
}

/// Parses `YYYY`, `YYYY-MM`, `YYYY-MM-DD`, or a range `A/B` of those.
pub fn parse_timestamp(text: &str) -> Result<TimeInterval, TimestampError> {
    let trimmed = text.trim();
    let err = |reason| TimestampError {
        text: text.to_string(),
        reason,
    };
    match trimmed.split_once('/') {
        Some((a, b)) => {
            let start = parse_unit(a).map_err(err)?;
            let end = parse_unit(b).map_err(err)?;
            TimeInterval::new(start.start_day, end.end_day).ok_or_else(|| err("range start after range end"))
        }
        None => parse_unit(trimmed).map_err(err),
    }
}

fn parse_unit(text: &str) -> Result<TimeInterval, &'static str> {
    let parts: Vec<&str> = text.split('-').collect();
    let year = parse_digits(parts[0], 4).ok_or("year must be four digits")? as i32;
    match parts.len() {
        1 => {
            let start = ordinal(year, 1, 1).ok_or("year out of range")?;
            let end = ordinal(year, 12, 31).ok_or("year out of range")?;
            Ok(TimeInterval {
                start_day: start,
                end_day: end,
                granularity: Granularity::Year,
            })
        }
        2 => {
            let month = parse_digits(parts[1], 2).ok_or("month must be two digits")?;
            if !(1..=12).contains(&month) {
                return Err("month out of range");
            }
            let start = ordinal(year, month, 1).ok_or("month out of range")?;
            let end = start + days_in_month(year, month) as i32 - 1;
            Ok(TimeInterval {
                start_day: start,
                end_day: end,
                granularity: Granularity::Month,
            })
        }
        3 => {
            let month = parse_digits(parts[1], 2).ok_or("month must be two digits")?;
            let day = parse_digits(parts[2], 2).ok_or("day must be two digits")?;
            if !(1..=12).contains(&month) {
                return Err("month out of range");
            }
            ordinal(year, month, day)
                .map(TimeInterval::day)
                .ok_or("day out of range for month")
        }
        _ => Err("too many date components"),
    }
}

fn parse_digits(s: &str, width: usize) -> Option<u32> {
    if s.len() != width || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn days_in_month(year: i32, month: u32) -> u32 {
    let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
    let next = NaiveDate::from_ymd_opt(ny, nm, 1).expect("valid month");
    let this = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    (next - this).num_days() as u32
}
