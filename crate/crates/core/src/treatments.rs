//! Policy-exposure encoding: the national closure indicator, binary and
//! continuous reopening, sample filters, and subgroup panels.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dates::WeekIndex;
use crate::error::{Error, Result};
use crate::ingest::{build_panel, PanelInputs, StatusTable, Subgroup};
use crate::panel::{col, MunicipalityId, Panel};

/// Per-municipality reopening schedule around the single national closure.
#[derive(Debug, Clone)]
pub struct TreatmentSchedule {
    /// Week of the national closure decree (common to all municipalities).
    pub closure_week: WeekIndex,
    /// First week each municipality reports any open school after closure;
    /// `None` for municipalities that never reopen in range.
    pub first_reopen_week: BTreeMap<MunicipalityId, Option<WeekIndex>>,
    /// Fraction of enrolled students whose school is open, per week, from
    /// the first reopening onward.
    pub openness: BTreeMap<(MunicipalityId, WeekIndex), f64>,
}

impl TreatmentSchedule {
    /// Derive the schedule from a weekly school-status table: the first
    /// reopening week is the first week after closure with openness > 0
    /// (openings inside a week collapse to the week).
    pub fn from_status(
        school: &StatusTable,
        municipalities: &[MunicipalityId],
        closure_week: WeekIndex,
    ) -> Result<TreatmentSchedule> {
        let mut first_reopen_week = BTreeMap::new();
        let mut openness = BTreeMap::new();
        for &m in municipalities {
            first_reopen_week.insert(m, None);
        }
        for (&(m, w), values) in &school.values {
            let Some(share) = values.iter().find(|(k, _)| k == "openness").map(|(_, v)| *v)
            else {
                continue;
            };
            if !(0.0..=1.0).contains(&share) {
                return Err(Error::data(format!(
                    "openness {share} outside [0, 1] for municipality {m}, week {w}"
                )));
            }
            if w >= closure_week && share > 0.0 {
                let entry = first_reopen_week.entry(m).or_insert(None);
                *entry = Some(entry.map_or(w, |prev: WeekIndex| prev.min(w)));
                openness.insert((m, w), share);
            }
        }
        Ok(TreatmentSchedule {
            closure_week,
            first_reopen_week,
            openness,
        })
    }

    fn reopen_week(&self, m: MunicipalityId) -> Result<Option<WeekIndex>> {
        self.first_reopen_week
            .get(&m)
            .copied()
            .ok_or_else(|| Error::data(format!("schedule does not cover municipality {m}")))
    }
}

/// Encode closure and reopening exposure onto the panel.
///
/// closure = 1 on [closure_week, first_reopen_week); reopen = 1 from the
/// first reopening onward (absorbing); reopen_share carries the openness
/// fraction on reopening weeks and 0 elsewhere, with gaps filled by the last
/// known positive share. Pre-closure weeks have both indicators 0.
pub fn encode_treatments(panel: &Panel, schedule: &TreatmentSchedule) -> Result<Panel> {
    let n = panel.n_rows();
    let mut closure = vec![0.0; n];
    let mut reopen = vec![0.0; n];
    let mut share = vec![0.0; n];

    let mut last_share: BTreeMap<MunicipalityId, f64> = BTreeMap::new();
    for i in 0..n {
        let m = panel.municipality_ids()[i];
        let w = panel.week_indices()[i];
        let rw = schedule.reopen_week(m)?;
        if w >= schedule.closure_week {
            match rw {
                Some(r) if w >= r => {
                    reopen[i] = 1.0;
                    let s = schedule
                        .openness
                        .get(&(m, w))
                        .copied()
                        .filter(|&s| s > 0.0)
                        .or_else(|| last_share.get(&m).copied())
                        .unwrap_or(1.0);
                    last_share.insert(m, s);
                    share[i] = s;
                }
                _ => closure[i] = 1.0,
            }
        }
    }

    let mut out = panel.with_columns(vec![
        (col::CLOSURE.to_string(), closure),
        (col::REOPEN_BINARY.to_string(), reopen),
        (col::REOPEN_SHARE.to_string(), share),
    ])?;
    out.closure_week = Some(schedule.closure_week);
    out.validate()?;
    Ok(out)
}

/// Row-exclusion rules for estimation samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRule {
    Full,
    /// Drop every week overlapping January or February (school vacations).
    NoJanuaryFebruary,
    /// Keep only cells with observed attendance.
    AttendanceWindow,
}

impl SampleRule {
    pub fn label(&self) -> &'static str {
        match self {
            SampleRule::Full => "full",
            SampleRule::NoJanuaryFebruary => "no_january_february",
            SampleRule::AttendanceWindow => "attendance_window",
        }
    }
}

/// Apply a sample rule; the result may be unbalanced by design, which the
/// fixed-effects estimator does not require.
pub fn filter_sample(panel: &Panel, rule: SampleRule) -> Result<Panel> {
    let filtered = match rule {
        SampleRule::Full => panel.clone(),
        SampleRule::NoJanuaryFebruary => {
            let weeks = panel.week_indices();
            panel.filter_rows(|i| {
                let monday = panel.week_start(weeks[i]);
                let sunday = monday + chrono::Duration::days(6);
                !(monday.month() <= 2 || sunday.month() <= 2)
            })
        }
        SampleRule::AttendanceWindow => {
            let att = panel.column(col::ATTENDANCE)?;
            panel.filter_rows(|i| !att[i].is_nan())
        }
    };
    if filtered.n_rows() == 0 {
        return Err(Error::data(format!(
            "sample rule {} leaves no observations",
            rule.label()
        )));
    }
    Ok(filtered)
}

/// Rebuild the panel for a subgroup: counts, populations, rates, and weights
/// are recomputed for the subgroup only.
pub fn subgroup_panel(inputs: &PanelInputs, group: &Subgroup) -> Result<Panel> {
    let panel = build_panel(inputs, group)?;
    if panel.column(col::POPULATION)?.iter().all(|&p| p == 0.0) {
        return Err(Error::data(format!("subgroup {} is empty", group.label())));
    }
    Ok(panel)
}

/// Lockdown-timing strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockdownStratum {
    Early,
    Late,
    Never,
}

impl LockdownStratum {
    pub fn label(&self) -> &'static str {
        match self {
            LockdownStratum::Early => "early_lockdown",
            LockdownStratum::Late => "late_lockdown",
            LockdownStratum::Never => "no_lockdown",
        }
    }
}

/// Assign each municipality a lockdown stratum from the panel's quarantine
/// column: early when the first quarantined week starts on or before
/// `early_cutoff`, late when after, never when no week is quarantined.
pub fn lockdown_strata(
    panel: &Panel,
    early_cutoff: NaiveDate,
) -> Result<BTreeMap<MunicipalityId, LockdownStratum>> {
    let q = panel.column(col::QUARANTINE)?;
    let mut first: BTreeMap<MunicipalityId, WeekIndex> = BTreeMap::new();
    for i in 0..panel.n_rows() {
        if q[i] > 0.0 {
            let m = panel.municipality_ids()[i];
            let w = panel.week_indices()[i];
            first
                .entry(m)
                .and_modify(|prev| *prev = (*prev).min(w))
                .or_insert(w);
        }
    }
    Ok(panel
        .municipalities()
        .into_iter()
        .map(|m| {
            let stratum = match first.get(&m) {
                None => LockdownStratum::Never,
                Some(&w) if panel.week_start(w) <= early_cutoff => LockdownStratum::Early,
                Some(_) => LockdownStratum::Late,
            };
            (m, stratum)
        })
        .collect())
}

/// Restrict a panel to one lockdown stratum's municipalities.
pub fn stratum_panel(
    panel: &Panel,
    strata: &BTreeMap<MunicipalityId, LockdownStratum>,
    stratum: LockdownStratum,
) -> Result<Panel> {
    let filtered =
        panel.filter_rows(|i| strata.get(&panel.municipality_ids()[i]).copied() == Some(stratum));
    if filtered.n_rows() == 0 {
        return Err(Error::data(format!(
            "lockdown stratum {} is empty",
            stratum.label()
        )));
    }
    Ok(filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dates::WeekRange;
    use indexmap::IndexMap;

    fn blank_panel(munis: &[u32], n_weeks: u32) -> Panel {
        let anchor = NaiveDate::from_ymd_opt(2018, 12, 31).unwrap();
        let mut mv = Vec::new();
        let mut wv = Vec::new();
        for &m in munis {
            for w in 0..n_weeks {
                mv.push(m);
                wv.push(w);
            }
        }
        let n = mv.len();
        let mut cols = IndexMap::new();
        cols.insert(col::POPULATION.to_string(), vec![1000.0; n]);
        cols.insert(col::WEIGHT.to_string(), vec![1000.0; n]);
        cols.insert(col::ATTENDANCE.to_string(), vec![f64::NAN; n]);
        cols.insert(col::QUARANTINE.to_string(), vec![0.0; n]);
        Panel::from_parts(anchor, mv, wv, cols, vec![]).unwrap()
    }

    fn schedule(closure: u32, reopen: &[(u32, Option<u32>)]) -> TreatmentSchedule {
        TreatmentSchedule {
            closure_week: closure,
            first_reopen_week: reopen.iter().copied().collect(),
            openness: BTreeMap::new(),
        }
    }

    #[test]
    fn never_reopening_municipality_stays_closed() {
        let panel = blank_panel(&[1], 100);
        let s = schedule(62, &[(1, None)]);
        let out = encode_treatments(&panel, &s).unwrap();
        let closure = out.column(col::CLOSURE).unwrap();
        let reopen = out.column(col::REOPEN_BINARY).unwrap();
        for i in 0..out.n_rows() {
            let w = out.week_indices()[i];
            assert_eq!(closure[i], if w >= 62 { 1.0 } else { 0.0 });
            assert_eq!(reopen[i], 0.0);
        }
    }

    #[test]
    fn reopening_week_carries_openness_share() {
        let panel = blank_panel(&[1], 100);
        let mut s = schedule(62, &[(1, Some(85))]);
        s.openness.insert((1, 85), 0.4);
        let out = encode_treatments(&panel, &s).unwrap();
        let i = out.find_cell(1, 85).unwrap();
        assert_eq!(out.column(col::CLOSURE).unwrap()[i], 0.0);
        assert_eq!(out.column(col::REOPEN_BINARY).unwrap()[i], 1.0);
        assert_eq!(out.column(col::REOPEN_SHARE).unwrap()[i], 0.4);
        // gap weeks carry the last known share forward
        let j = out.find_cell(1, 86).unwrap();
        assert_eq!(out.column(col::REOPEN_SHARE).unwrap()[j], 0.4);
        // pre-closure weeks have both indicators zero
        let k = out.find_cell(1, 10).unwrap();
        assert_eq!(out.column(col::CLOSURE).unwrap()[k], 0.0);
        assert_eq!(out.column(col::REOPEN_BINARY).unwrap()[k], 0.0);
        out.validate().unwrap();
    }

    #[test]
    fn full_rule_is_identity() {
        let panel = blank_panel(&[1, 2], 20);
        let out = filter_sample(&panel, SampleRule::Full).unwrap();
        assert_eq!(out.n_rows(), panel.n_rows());
    }

    #[test]
    fn january_february_weeks_are_dropped_by_calendar() {
        let panel = blank_panel(&[1], 157); // 2019-2021 range
        let out = filter_sample(&panel, SampleRule::NoJanuaryFebruary).unwrap();
        // count by hand from the calendar
        let mut expected = 0;
        for w in 0..157u32 {
            let monday = panel.week_start(w);
            let sunday = monday + chrono::Duration::days(6);
            if !(monday.month() <= 2 || sunday.month() <= 2) {
                expected += 1;
            }
        }
        assert_eq!(out.n_rows(), expected);
        // roughly nine weeks per year get dropped
        assert!(expected < 157 - 24, "expected {expected}");
    }

    #[test]
    fn attendance_window_keeps_observed_cells_only() {
        let mut panel = blank_panel(&[1], 10);
        let mut att = vec![f64::NAN; 10];
        att[7] = 0.5;
        att[8] = 0.6;
        panel.set_column(col::ATTENDANCE, att).unwrap();
        let out = filter_sample(&panel, SampleRule::AttendanceWindow).unwrap();
        assert_eq!(out.n_rows(), 2);
    }

    #[test]
    fn lockdown_strata_follow_cutoff_rule() {
        let mut panel = blank_panel(&[1, 2, 3], 130);
        let mut q = vec![0.0; panel.n_rows()];
        // municipality 1 locks down week 70 (2020-05-04), municipality 2
        // week 100 (2020-11-30), municipality 3 never
        for i in 0..panel.n_rows() {
            let m = panel.municipality_ids()[i];
            let w = panel.week_indices()[i];
            if m == 1 && (70..80).contains(&w) {
                q[i] = 1.0;
            }
            if m == 2 && (100..104).contains(&w) {
                q[i] = 1.0;
            }
        }
        panel.set_column(col::QUARANTINE, q).unwrap();
        let cutoff = NaiveDate::from_ymd_opt(2020, 8, 30).unwrap();
        let strata = lockdown_strata(&panel, cutoff).unwrap();
        assert_eq!(strata[&1], LockdownStratum::Early);
        assert_eq!(strata[&2], LockdownStratum::Late);
        assert_eq!(strata[&3], LockdownStratum::Never);

        let early = stratum_panel(&panel, &strata, LockdownStratum::Early).unwrap();
        assert_eq!(early.municipalities(), vec![1]);
    }

    #[test]
    fn subgroup_age_bands_partition_counts() {
        use crate::ingest::*;
        let range = WeekRange::new(
            NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2019, 6, 30).unwrap(),
        )
        .unwrap();
        let mut pop = PopulationTable::default();
        for age in 0..18u8 {
            pop.insert(7, 2019, age, Sex::Female, 500).unwrap();
            pop.insert(7, 2019, age, Sex::Male, 500).unwrap();
        }
        let mut records = RecordTable::default();
        for (d, age) in [(3, 4u8), (3, 9), (4, 15), (10, 16), (11, 2)] {
            records.rows.push(VictimRecord {
                event_date: NaiveDate::from_ymd_opt(2019, 2, d).unwrap(),
                municipality: 7,
                category: CATEGORY_DV.to_string(),
                subclass: None,
                age,
                sex: if age % 2 == 0 { Sex::Female } else { Sex::Male },
            });
        }
        let empty = StatusTable::default();
        let inputs = PanelInputs {
            records: &records,
            population: &pop,
            school: &empty,
            epi: &empty,
            quarantine: &empty,
            range,
            categories: vec![CATEGORY_DV.to_string()],
            subclass_of: None,
        };
        let full = subgroup_panel(&inputs, &Subgroup::All).unwrap();
        let young = subgroup_panel(&inputs, &Subgroup::AgeBand { min: 0, max: 8 }).unwrap();
        let old = subgroup_panel(&inputs, &Subgroup::AgeBand { min: 9, max: 17 }).unwrap();
        let c = |p: &Panel| p.column(&col::count(CATEGORY_DV)).unwrap().to_vec();
        let (cf, cy, co) = (c(&full), c(&young), c(&old));
        for i in 0..full.n_rows() {
            assert_eq!(cf[i], cy[i] + co[i]);
        }
        // sex partition too
        let f = subgroup_panel(&inputs, &Subgroup::Sex { sex: Sex::Female }).unwrap();
        let m = subgroup_panel(&inputs, &Subgroup::Sex { sex: Sex::Male }).unwrap();
        let (cfm, cff) = (c(&m), c(&f));
        for i in 0..full.n_rows() {
            assert_eq!(cf[i], cff[i] + cfm[i]);
        }
    }
}
