//! Raw-table loading, the first-of-month smoothing correction, and
//! aggregation to a balanced municipality-by-week panel.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dates::{parse_date, WeekIndex, WeekRange};
use crate::error::{Error, Result};
use crate::panel::{col, MunicipalityId, Panel};

pub const CATEGORY_DV: &str = "intrafamily_violence";
pub const CATEGORY_SEXUAL_ABUSE: &str = "sexual_abuse";
pub const CATEGORY_RAPE: &str = "rape";
pub const SUBCLASSES: [&str; 3] = ["psychological", "physical_moderate", "physical_serious"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn parse(s: &str) -> Option<Sex> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" => Some(Sex::Female),
            "m" | "male" => Some(Sex::Male),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

/// One victim-level crime record.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimRecord {
    pub event_date: NaiveDate,
    pub municipality: MunicipalityId,
    pub category: String,
    pub subclass: Option<String>,
    pub age: u8,
    pub sex: Sex,
}

#[derive(Debug, Clone)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

/// Event-level records plus the rejects log; the build never drops rows
/// silently.
#[derive(Debug, Clone, Default)]
pub struct RecordTable {
    pub rows: Vec<VictimRecord>,
    pub rejected: Vec<RejectedRow>,
}

/// Population by municipality, year, age, and sex.
#[derive(Debug, Clone, Default)]
pub struct PopulationTable {
    /// (municipality, year, age, sex) -> persons
    counts: BTreeMap<(MunicipalityId, i32, u8, Sex), u64>,
}

impl PopulationTable {
    pub fn insert(
        &mut self,
        muni: MunicipalityId,
        year: i32,
        age: u8,
        sex: Sex,
        count: u64,
    ) -> Result<()> {
        if self.counts.insert((muni, year, age, sex), count).is_some() {
            return Err(Error::data(format!(
                "duplicate population key (municipality {muni}, year {year}, age {age}, {})",
                sex.as_str()
            )));
        }
        Ok(())
    }

    /// Distinct municipality ids; doubles as the municipality registry.
    pub fn municipalities(&self) -> BTreeSet<MunicipalityId> {
        self.counts.keys().map(|k| k.0).collect()
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.counts.keys().map(|k| k.1).collect()
    }

    /// Under-18 population for a municipality and year, optionally restricted
    /// to an age band and/or sex. `None` when the (municipality, year) pair
    /// has no rows at all.
    pub fn population_u18(
        &self,
        muni: MunicipalityId,
        year: i32,
        ages: (u8, u8),
        sex: Option<Sex>,
    ) -> Option<u64> {
        let mut total = 0u64;
        let mut found = false;
        for (&(_, _, age, s), &c) in self
            .counts
            .range((muni, year, 0, Sex::Female)..=(muni, year, u8::MAX, Sex::Male))
        {
            found = true;
            if age >= ages.0 && age <= ages.1 && sex.map_or(true, |want| want == s) {
                total += c;
            }
        }
        found.then_some(total)
    }
}

/// Weekly municipal status rows keyed by (municipality, week).
#[derive(Debug, Clone, Default)]
pub struct StatusTable {
    /// (municipality, week) -> named values
    pub values: BTreeMap<(MunicipalityId, WeekIndex), Vec<(String, f64)>>,
}

impl StatusTable {
    pub fn get(&self, muni: MunicipalityId, week: WeekIndex, field: &str) -> Option<f64> {
        self.values
            .get(&(muni, week))
            .and_then(|v| v.iter().find(|(k, _)| k == field).map(|(_, x)| *x))
    }
}

/// Column-name mapping from a delimited file to semantic fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSchema {
    /// semantic field -> file column header
    pub columns: BTreeMap<String, String>,
}

impl TableSchema {
    pub fn identity(fields: &[&str]) -> Self {
        TableSchema {
            columns: fields
                .iter()
                .map(|f| (f.to_string(), f.to_string()))
                .collect(),
        }
    }

    fn resolve(&self, field: &str, headers: &[String]) -> Result<usize> {
        let name = self
            .columns
            .get(field)
            .ok_or_else(|| Error::config(format!("schema does not map field {field:?}")))?;
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("file is missing mapped column {name:?}")))
    }
}

fn open_csv(path: &Path) -> Result<(csv::Reader<std::fs::File>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("cannot read header of {}: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    Ok((rdr, headers))
}

/// Load victim-level records.
///
/// Rows with out-of-range dates, ages outside [0, 17], or unknown categories
/// are rejected with a reason; an unparseable date or a municipality code
/// absent from the registry is a hard error naming the offending row.
pub fn load_records(
    path: &Path,
    schema: &TableSchema,
    registry: &BTreeSet<MunicipalityId>,
    range: &WeekRange,
    categories: &[String],
) -> Result<RecordTable> {
    let (mut rdr, headers) = open_csv(path)?;
    let c_date = schema.resolve("date", &headers)?;
    let c_muni = schema.resolve("municipality", &headers)?;
    let c_cat = schema.resolve("category", &headers)?;
    let c_sub = schema.resolve("subclass", &headers).ok();
    let c_age = schema.resolve("age", &headers)?;
    let c_sex = schema.resolve("sex", &headers)?;

    let mut table = RecordTable::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::data(format!("row {line}: {e}")))?;
        let get = |c: usize| row.get(c).unwrap_or("").trim();

        let date =
            parse_date(get(c_date)).map_err(|e| Error::data(format!("row {line}: {e}")))?;
        let muni: MunicipalityId = get(c_muni)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad municipality code")))?;
        if !registry.contains(&muni) {
            return Err(Error::data(format!(
                "row {line}: municipality code {muni} is not in the registry"
            )));
        }
        if range.week_index(date).is_none() {
            table.rejected.push(RejectedRow {
                line,
                reason: format!("event date {date} outside study range"),
            });
            continue;
        }
        let age: i64 = get(c_age)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad age")))?;
        if !(0..=17).contains(&age) {
            table.rejected.push(RejectedRow {
                line,
                reason: format!("age {age} outside [0, 17]"),
            });
            continue;
        }
        let category = get(c_cat).to_string();
        if !categories.iter().any(|c| c == &category) {
            table.rejected.push(RejectedRow {
                line,
                reason: format!("unknown category {category:?}"),
            });
            continue;
        }
        let subclass = c_sub.and_then(|c| {
            let v = get(c);
            (!v.is_empty()).then(|| v.to_string())
        });
        let Some(sex) = Sex::parse(get(c_sex)) else {
            table.rejected.push(RejectedRow {
                line,
                reason: "unrecognized sex".to_string(),
            });
            continue;
        };
        table.rows.push(VictimRecord {
            event_date: date,
            municipality: muni,
            category,
            subclass,
            age: age as u8,
            sex,
        });
    }
    Ok(table)
}

pub fn load_population(path: &Path, schema: &TableSchema) -> Result<PopulationTable> {
    let (mut rdr, headers) = open_csv(path)?;
    let c_muni = schema.resolve("municipality", &headers)?;
    let c_year = schema.resolve("year", &headers)?;
    let c_age = schema.resolve("age", &headers)?;
    let c_sex = schema.resolve("sex", &headers)?;
    let c_count = schema.resolve("count", &headers)?;

    let mut table = PopulationTable::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::data(format!("row {line}: {e}")))?;
        let get = |c: usize| row.get(c).unwrap_or("").trim();
        let muni = get(c_muni)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad municipality code")))?;
        let year = get(c_year)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad year")))?;
        let age: u8 = get(c_age)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad age")))?;
        let sex = Sex::parse(get(c_sex))
            .ok_or_else(|| Error::data(format!("row {line}: unrecognized sex")))?;
        let count: i64 = get(c_count)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad count")))?;
        if count < 0 {
            return Err(Error::data(format!("row {line}: negative population count")));
        }
        table.insert(muni, year, age, sex, count as u64)?;
    }
    Ok(table)
}

/// Load a weekly status table. `fields` names the value columns to pull in;
/// rows are keyed by (municipality, week of the given date) and duplicate
/// keys are an error listing the offending keys.
pub fn load_status(
    path: &Path,
    schema: &TableSchema,
    range: &WeekRange,
    fields: &[&str],
    bounds: &BTreeMap<String, (f64, f64)>,
) -> Result<StatusTable> {
    let (mut rdr, headers) = open_csv(path)?;
    let c_muni = schema.resolve("municipality", &headers)?;
    let c_date = schema.resolve("week_start", &headers)?;
    let c_fields: Vec<(String, usize)> = fields
        .iter()
        .map(|f| Ok((f.to_string(), schema.resolve(f, &headers)?)))
        .collect::<Result<_>>()?;

    let mut table = StatusTable::default();
    let mut duplicates = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::data(format!("row {line}: {e}")))?;
        let get = |c: usize| row.get(c).unwrap_or("").trim();
        let muni: MunicipalityId = get(c_muni)
            .parse()
            .map_err(|_| Error::data(format!("row {line}: bad municipality code")))?;
        let date =
            parse_date(get(c_date)).map_err(|e| Error::data(format!("row {line}: {e}")))?;
        let Some(week) = range.week_index(date) else {
            continue; // out-of-range status rows are irrelevant, not errors
        };
        let mut values = Vec::with_capacity(c_fields.len());
        for (name, c) in &c_fields {
            let raw = get(*c);
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::data(format!("row {line}: bad value for {name}")))?;
            if let Some((lo, hi)) = bounds.get(name) {
                if v < *lo || v > *hi {
                    return Err(Error::data(format!(
                        "row {line}: {name} = {v} outside [{lo}, {hi}]"
                    )));
                }
            }
            values.push((name.clone(), v));
        }
        if table.values.insert((muni, week), values).is_some() {
            duplicates.push(format!("(municipality {muni}, week {week})"));
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::data(format!(
            "overlapping duplicate status rows: {}",
            duplicates.join(", ")
        )));
    }
    Ok(table)
}

/// Reassign the excess of first-of-month reporting across the rest of the
/// month, separately per municipality, month, and configured category.
///
/// The expected day-1 count is the mean of the daily counts over days
/// 2..end of the same month, rounded to the nearest integer (ties to even).
/// Excess day-1 records are reassigned one by one, round-robin across days
/// 2..end in ascending date order, so the monthly total is preserved
/// exactly and the day-1 count never increases.
pub fn smooth_first_day_excess(records: RecordTable, categories: &[String]) -> RecordTable {
    let RecordTable { mut rows, rejected } = records;

    // per (muni, year, month, category): day-1 row indices and daily counts
    let mut groups: BTreeMap<(MunicipalityId, i32, u32, &str), (Vec<usize>, Vec<u32>)> =
        BTreeMap::new();
    for (idx, r) in rows.iter().enumerate() {
        if !categories.iter().any(|c| c == &r.category) {
            continue;
        }
        let key = (
            r.municipality,
            r.event_date.year(),
            r.event_date.month(),
            r.category.as_str(),
        );
        let days = days_in_month(r.event_date.year(), r.event_date.month());
        let entry = groups
            .entry(key)
            .or_insert_with(|| (Vec::new(), vec![0; days as usize + 1]));
        entry.1[r.event_date.day() as usize] += 1;
        if r.event_date.day() == 1 {
            entry.0.push(idx);
        }
    }

    let mut moves: Vec<(usize, NaiveDate)> = Vec::new();
    for ((_, year, month, _), (day1_rows, day_counts)) in &groups {
        let days = days_in_month(*year, *month);
        let day1 = day_counts[1];
        if day1 == 0 {
            continue;
        }
        let later_total: u32 = day_counts[2..=days as usize].iter().sum();
        let expected = round_half_even(later_total as f64 / (days - 1) as f64);
        let excess = day1.saturating_sub(expected);
        for (k, &row_idx) in day1_rows.iter().take(excess as usize).enumerate() {
            let day = 2 + (k as u32 % (days - 1));
            let date = NaiveDate::from_ymd_opt(*year, *month, day).expect("valid day");
            moves.push((row_idx, date));
        }
    }
    for (idx, date) in moves {
        rows[idx].event_date = date;
    }
    RecordTable { rows, rejected }
}

fn days_in_month(year: i32, month: u32) -> u32 {
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    };
    next.unwrap()
        .signed_duration_since(NaiveDate::from_ymd_opt(year, month, 1).unwrap())
        .num_days() as u32
}

fn round_half_even(v: f64) -> u32 {
    let floor = v.floor();
    let frac = v - floor;
    let f = floor as u32;
    if frac > 0.5 {
        f + 1
    } else if frac < 0.5 {
        f
    } else if f % 2 == 0 {
        f
    } else {
        f + 1
    }
}

/// Subgroup restriction applied when (re)building a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Subgroup {
    All,
    AgeBand { min: u8, max: u8 },
    Sex { sex: Sex },
}

impl Subgroup {
    pub fn label(&self) -> String {
        match self {
            Subgroup::All => "all".to_string(),
            Subgroup::AgeBand { min, max } => format!("age_{min}_{max}"),
            Subgroup::Sex { sex } => sex.as_str().to_string(),
        }
    }

    fn ages(&self) -> (u8, u8) {
        match self {
            Subgroup::AgeBand { min, max } => (*min, *max),
            _ => (0, 17),
        }
    }

    fn sex(&self) -> Option<Sex> {
        match self {
            Subgroup::Sex { sex } => Some(*sex),
            _ => None,
        }
    }

    fn keeps(&self, r: &VictimRecord) -> bool {
        let (lo, hi) = self.ages();
        r.age >= lo && r.age <= hi && self.sex().map_or(true, |s| s == r.sex)
    }
}

/// Everything needed to aggregate one panel.
pub struct PanelInputs<'a> {
    pub records: &'a RecordTable,
    pub population: &'a PopulationTable,
    pub school: &'a StatusTable,
    pub epi: &'a StatusTable,
    pub quarantine: &'a StatusTable,
    pub range: WeekRange,
    /// Main outcome categories, in canonical order.
    pub categories: Vec<String>,
    /// Also emit per-subclass counts and rates for this category.
    pub subclass_of: Option<String>,
}

/// Aggregate records to a balanced municipality-by-week panel with rates per
/// 100,000, analytic weights, and covariates. Cells with no records carry
/// count 0 (not missing); treatment indicators start at zero and are encoded
/// afterwards from a schedule. Subgroup cells with zero population get rate
/// 0 and weight 0 so the panel stays balanced.
pub fn build_panel(inputs: &PanelInputs, subgroup: &Subgroup) -> Result<Panel> {
    let range = &inputs.range;
    let munis: Vec<MunicipalityId> = inputs.population.municipalities().into_iter().collect();
    if munis.is_empty() {
        return Err(Error::data("population table has no municipalities"));
    }
    let n_weeks = range.n_weeks() as usize;
    let n = munis.len() * n_weeks;

    let mut categories = inputs.categories.clone();
    if let Some(parent) = &inputs.subclass_of {
        for sub in SUBCLASSES {
            categories.push(format!("{parent}_{sub}"));
        }
    }

    let mut counts: Vec<Vec<f64>> = vec![vec![0.0; n]; categories.len()];
    let muni_pos: BTreeMap<MunicipalityId, usize> =
        munis.iter().enumerate().map(|(i, &m)| (m, i)).collect();
    let cell = |mp: usize, w: WeekIndex| mp * n_weeks + w as usize;

    for r in &inputs.records.rows {
        if !subgroup.keeps(r) {
            continue;
        }
        let Some(week) = range.week_index(r.event_date) else {
            continue;
        };
        let mp = *muni_pos.get(&r.municipality).ok_or_else(|| {
            Error::data(format!(
                "record municipality {} has no population rows",
                r.municipality
            ))
        })?;
        if let Some(k) = categories.iter().position(|c| c == &r.category) {
            counts[k][cell(mp, week)] += 1.0;
        }
        if let (Some(parent), Some(sub)) = (&inputs.subclass_of, &r.subclass) {
            if &r.category == parent {
                let name = format!("{parent}_{sub}");
                if let Some(k) = categories.iter().position(|c| c == &name) {
                    counts[k][cell(mp, week)] += 1.0;
                }
            }
        }
    }

    let mut muni_col = Vec::with_capacity(n);
    let mut week_col = Vec::with_capacity(n);
    let mut pop_col = vec![0.0; n];
    let mut attendance = vec![f64::NAN; n];
    let mut quarantine = vec![0.0; n];
    let mut covid = vec![0.0; n];
    let mut tests = vec![0.0; n];
    let mut positivity = vec![0.0; n];

    for (&m, &mp) in &muni_pos {
        for w in range.weeks() {
            let i = cell(mp, w);
            muni_col.push(m);
            week_col.push(w);
            let year = range.year_of(w);
            let pop = inputs
                .population
                .population_u18(m, year, subgroup.ages(), subgroup.sex())
                .ok_or_else(|| {
                    Error::data(format!(
                        "no population record for municipality {m} in year {year}"
                    ))
                })?;
            pop_col[i] = pop as f64;
            if let Some(a) = inputs.school.get(m, w, "attendance") {
                attendance[i] = a;
            }
            if let Some(q) = inputs.quarantine.get(m, w, "quarantine") {
                quarantine[i] = q;
            }
            if let Some(v) = inputs.epi.get(m, w, "cases_per_1000") {
                covid[i] = v;
            }
            if let Some(v) = inputs.epi.get(m, w, "tests_per_1000") {
                tests[i] = v;
            }
            if let Some(v) = inputs.epi.get(m, w, "positivity_pct") {
                positivity[i] = v;
            }
        }
    }

    let mut cols: IndexMap<String, Vec<f64>> = IndexMap::new();
    cols.insert(col::POPULATION.into(), pop_col.clone());
    cols.insert(col::WEIGHT.into(), pop_col.clone());
    cols.insert(col::CLOSURE.into(), vec![0.0; n]);
    cols.insert(col::REOPEN_BINARY.into(), vec![0.0; n]);
    cols.insert(col::REOPEN_SHARE.into(), vec![0.0; n]);
    cols.insert(col::ATTENDANCE.into(), attendance);
    cols.insert(col::QUARANTINE.into(), quarantine);
    cols.insert(col::COVID_CASES.into(), covid);
    cols.insert(col::TESTS.into(), tests);
    cols.insert(col::POSITIVITY.into(), positivity);
    for (k, cat) in categories.iter().enumerate() {
        let rate: Vec<f64> = counts[k]
            .iter()
            .zip(&pop_col)
            .map(|(&c, &p)| if p > 0.0 { c * 100_000.0 / p } else { 0.0 })
            .collect();
        cols.insert(col::count(cat), counts[k].clone());
        cols.insert(col::rate(cat), rate);
    }

    let panel = Panel::from_parts(range.anchor(), muni_col, week_col, cols, categories)?;
    panel.validate()?;
    Ok(panel)
}
