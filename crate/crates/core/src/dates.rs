//! Week arithmetic shared by the whole pipeline.
//!
//! Weeks start on Monday. A study range is anchored at the first Monday on
//! or before the range start; `week_index` counts whole weeks since that
//! anchor. Week-of-year is the ISO week number with week 53 folded into 52,
//! giving exactly 52 seasonal categories.

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type WeekIndex = u32;

/// Monday on or before `date`.
pub fn monday_on_or_before(date: NaiveDate) -> NaiveDate {
    let back = date.weekday().num_days_from_monday() as i64;
    date - Duration::days(back)
}

/// ISO week number with week 53 folded into 52.
pub fn week_of_year(date: NaiveDate) -> u32 {
    date.iso_week().week().min(52)
}

/// Inclusive study range, resolved to whole Monday-anchored weeks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl WeekRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::config(format!(
                "study range end {end} precedes start {start}"
            )));
        }
        Ok(WeekRange { start, end })
    }

    /// Anchor Monday of week 0.
    pub fn anchor(&self) -> NaiveDate {
        monday_on_or_before(self.start)
    }

    /// Week index of `date` within this range, if the date is in range.
    pub fn week_index(&self, date: NaiveDate) -> Option<WeekIndex> {
        if date < self.start || date > self.end {
            return None;
        }
        let days = (monday_on_or_before(date) - self.anchor()).num_days();
        Some((days / 7) as WeekIndex)
    }

    /// Monday that starts week `w`.
    pub fn week_start(&self, w: WeekIndex) -> NaiveDate {
        self.anchor() + Duration::weeks(w as i64)
    }

    /// Number of whole weeks covered by the range (the last, possibly
    /// partial, calendar week counts).
    pub fn n_weeks(&self) -> u32 {
        let days = (monday_on_or_before(self.end) - self.anchor()).num_days();
        (days / 7) as u32 + 1
    }

    /// All week indices in the range.
    pub fn weeks(&self) -> impl Iterator<Item = WeekIndex> {
        0..self.n_weeks()
    }

    /// Folded week-of-year of week `w` (taken from the week's Monday).
    pub fn week_of_year(&self, w: WeekIndex) -> u32 {
        week_of_year(self.week_start(w))
    }

    /// Calendar year a week belongs to, taken from its Thursday (the ISO
    /// year-determining day); used to join annual tables.
    pub fn year_of(&self, w: WeekIndex) -> i32 {
        (self.week_start(w) + Duration::days(3)).year()
    }
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::data(format!("unparseable date {s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn anchor_is_monday_on_or_before_start() {
        // 2019-01-01 is a Tuesday; the anchor is Monday 2018-12-31.
        let r = WeekRange::new(d("2019-01-01"), d("2021-12-31")).unwrap();
        assert_eq!(r.anchor(), d("2018-12-31"));
        assert_eq!(r.week_index(d("2019-01-01")), Some(0));
        assert_eq!(r.week_index(d("2019-01-06")), Some(0));
        assert_eq!(r.week_index(d("2019-01-07")), Some(1));
        assert_eq!(r.week_index(d("2018-12-30")), None);
    }

    #[test]
    fn study_range_covers_157_weeks() {
        let r = WeekRange::new(d("2019-01-01"), d("2021-12-31")).unwrap();
        assert_eq!(r.n_weeks(), 157);
        assert_eq!(r.week_start(156), d("2021-12-27"));
    }

    #[test]
    fn week53_folds_into_52() {
        // 2020-12-28 falls in ISO week 53 of 2020.
        assert_eq!(d("2020-12-28").iso_week().week(), 53);
        assert_eq!(week_of_year(d("2020-12-28")), 52);
        assert_eq!(week_of_year(d("2020-01-06")), 2);
    }

    #[test]
    fn closure_decree_week() {
        let r = WeekRange::new(d("2019-01-01"), d("2021-12-31")).unwrap();
        // 2020-03-16 is itself a Monday.
        assert_eq!(r.week_index(d("2020-03-16")), Some(63));
        assert_eq!(r.week_start(63), d("2020-03-16"));
    }
}
