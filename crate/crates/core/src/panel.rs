//! Balanced municipality-by-week panel: column store, invariants, and the
//! canonical on-disk format.
//!
//! Rows are kept sorted by `(municipality_id, week_index)` so every consumer
//! (estimators, writers, resamplers) sees one deterministic ordering.
//! Missing values are `NaN`; the canonical file renders them as empty cells.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use indexmap::IndexMap;

use crate::dates::{week_of_year, WeekIndex};
use crate::error::{Error, Result};

pub type MunicipalityId = u32;

/// Well-known column names.
pub mod col {
    pub const POPULATION: &str = "population_u18";
    pub const WEIGHT: &str = "analytic_weight";
    pub const CLOSURE: &str = "closure";
    pub const REOPEN_BINARY: &str = "reopen_binary";
    pub const REOPEN_SHARE: &str = "reopen_share";
    pub const ATTENDANCE: &str = "attendance";
    pub const QUARANTINE: &str = "quarantine";
    pub const COVID_CASES: &str = "covid_cases_per_1000";
    pub const TESTS: &str = "tests_per_1000";
    pub const POSITIVITY: &str = "positivity_pct";

    pub fn count(category: &str) -> String {
        format!("count_{category}")
    }

    pub fn rate(category: &str) -> String {
        format!("rate_{category}")
    }
}

/// Fixed leading columns of the canonical panel file, in order.
pub const CANONICAL_FIXED_COLUMNS: [&str; 14] = [
    "municipality_id",
    "week_index",
    "week_start",
    "week_of_year",
    col::POPULATION,
    col::WEIGHT,
    col::CLOSURE,
    col::REOPEN_BINARY,
    col::REOPEN_SHARE,
    col::ATTENDANCE,
    col::QUARANTINE,
    col::COVID_CASES,
    col::TESTS,
    col::POSITIVITY,
];

#[derive(Debug, Clone)]
pub struct Panel {
    /// Monday of week 0; fixes the week_index <-> date mapping.
    pub anchor: NaiveDate,
    /// National school-closure week, when known. Cells strictly before this
    /// week form the baseline (pre-closure) period.
    pub closure_week: Option<WeekIndex>,
    /// Outcome categories carried by this panel, in canonical file order.
    pub categories: Vec<String>,
    muni: Vec<MunicipalityId>,
    week: Vec<WeekIndex>,
    woy: Vec<u32>,
    columns: IndexMap<String, Vec<f64>>,
}

impl Panel {
    /// Build a panel from parallel row vectors; rows are sorted into the
    /// canonical `(municipality, week)` order.
    pub fn from_parts(
        anchor: NaiveDate,
        muni: Vec<MunicipalityId>,
        week: Vec<WeekIndex>,
        columns: IndexMap<String, Vec<f64>>,
        categories: Vec<String>,
    ) -> Result<Self> {
        let n = muni.len();
        if week.len() != n {
            return Err(Error::data("municipality and week vectors differ in length"));
        }
        for (name, c) in &columns {
            if c.len() != n {
                return Err(Error::data(format!(
                    "column {name} has {} rows, expected {n}",
                    c.len()
                )));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (muni[i], week[i]));

        let reindex_u32 = |v: &[u32]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let muni = reindex_u32(&muni);
        let week = reindex_u32(&week);
        let woy = week
            .iter()
            .map(|&w| week_of_year(anchor + chrono::Duration::weeks(w as i64)))
            .collect();
        let columns = columns
            .into_iter()
            .map(|(k, v)| (k, order.iter().map(|&i| v[i]).collect()))
            .collect();

        Ok(Panel {
            anchor,
            closure_week: None,
            categories,
            muni,
            week,
            woy,
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.muni.len()
    }

    pub fn municipality_ids(&self) -> &[MunicipalityId] {
        &self.muni
    }

    pub fn week_indices(&self) -> &[WeekIndex] {
        &self.week
    }

    pub fn week_of_year_codes(&self) -> &[u32] {
        &self.woy
    }

    /// Distinct municipalities, ascending.
    pub fn municipalities(&self) -> Vec<MunicipalityId> {
        let set: BTreeSet<_> = self.muni.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Distinct weeks, ascending.
    pub fn weeks(&self) -> Vec<WeekIndex> {
        let set: BTreeSet<_> = self.week.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn week_start(&self, w: WeekIndex) -> NaiveDate {
        self.anchor + chrono::Duration::weeks(w as i64)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(|s| s.as_str())
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::data(format!("panel has no column {name:?}")))
    }

    /// Insert or replace a column.
    pub fn set_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::data("column length does not match panel rows"));
        }
        self.columns.insert(name.into(), values);
        Ok(())
    }

    /// Clone the panel with extra (or replacement) columns; used to stage
    /// design columns for one estimation without mutating shared data.
    pub fn with_columns(&self, extra: Vec<(String, Vec<f64>)>) -> Result<Panel> {
        let mut p = self.clone();
        for (name, values) in extra {
            p.set_column(name, values)?;
        }
        Ok(p)
    }

    /// Retain only rows where `keep` is true. The result keeps the canonical
    /// ordering but may no longer be balanced.
    pub fn filter_rows(&self, keep: impl Fn(usize) -> bool) -> Panel {
        let idx: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(i)).collect();
        Panel {
            anchor: self.anchor,
            closure_week: self.closure_week,
            categories: self.categories.clone(),
            muni: idx.iter().map(|&i| self.muni[i]).collect(),
            week: idx.iter().map(|&i| self.week[i]).collect(),
            woy: idx.iter().map(|&i| self.woy[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    /// Baseline (pre-closure) row mask: week strictly before the national
    /// closure week. Panels without a closure week have no baseline rows.
    pub fn baseline_rows(&self) -> Vec<bool> {
        match self.closure_week {
            Some(cw) => self.week.iter().map(|&w| w < cw).collect(),
            None => vec![false; self.n_rows()],
        }
    }

    /// Validate the panel invariants: balance, rate/count consistency, and
    /// treatment-indicator coherence (where those columns exist).
    pub fn validate(&self) -> Result<()> {
        let munis = self.municipalities();
        let weeks = self.weeks();
        if self.n_rows() != munis.len() * weeks.len() {
            return Err(Error::data(format!(
                "panel is not balanced: {} rows for {} municipalities x {} weeks",
                self.n_rows(),
                munis.len(),
                weeks.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for i in 0..self.n_rows() {
            if !seen.insert((self.muni[i], self.week[i])) {
                return Err(Error::data(format!(
                    "duplicate cell (municipality {}, week {})",
                    self.muni[i], self.week[i]
                )));
            }
        }

        if let Ok(pop) = self.column(col::POPULATION) {
            for cat in &self.categories {
                let counts = self.column(&col::count(cat))?;
                let rates = self.column(&col::rate(cat))?;
                for i in 0..self.n_rows() {
                    if pop[i] == 0.0 {
                        if rates[i] != 0.0 {
                            return Err(Error::data(format!(
                                "cell ({}, {}): nonzero rate with zero population",
                                self.muni[i], self.week[i]
                            )));
                        }
                        continue;
                    }
                    let implied = rates[i] * pop[i] / 100_000.0;
                    if (implied - counts[i]).abs() > 1e-9 {
                        return Err(Error::data(format!(
                            "cell ({}, {}): rate*population/100000 = {implied} but count = {}",
                            self.muni[i], self.week[i], counts[i]
                        )));
                    }
                }
            }
        }

        if self.has_column(col::CLOSURE) && self.has_column(col::REOPEN_BINARY) {
            let closure = self.column(col::CLOSURE)?;
            let reopen = self.column(col::REOPEN_BINARY)?;
            let share = self.column(col::REOPEN_SHARE).ok();
            // Treatments not yet encoded read back as all-missing; skip then.
            let encoded = closure.iter().any(|v| !v.is_nan());
            if !encoded {
                return Ok(());
            }
            for i in 0..self.n_rows() {
                let (c, r) = (closure[i], reopen[i]);
                if !(c == 0.0 || c == 1.0) || !(r == 0.0 || r == 1.0) || c + r > 1.0 {
                    return Err(Error::data(format!(
                        "cell ({}, {}): invalid closure/reopen pair ({c}, {r})",
                        self.muni[i], self.week[i]
                    )));
                }
                if let Some(s) = share {
                    if r == 0.0 && s[i] != 0.0 {
                        return Err(Error::data(format!(
                            "cell ({}, {}): reopen_share {} without reopen_binary",
                            self.muni[i], self.week[i], s[i]
                        )));
                    }
                    if r == 1.0 && !(s[i] > 0.0 && s[i] <= 1.0) {
                        return Err(Error::data(format!(
                            "cell ({}, {}): reopen_share {} outside (0,1]",
                            self.muni[i], self.week[i], s[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Row index of a cell, if present (binary search over the sorted
    /// `(municipality, week)` pairs).
    pub fn find_cell(&self, muni: MunicipalityId, week: WeekIndex) -> Option<usize> {
        let mut lo = 0usize;
        let mut hi = self.n_rows();
        while lo < hi {
            let mid = (lo + hi) / 2;
            match (self.muni[mid], self.week[mid]).cmp(&(muni, week)) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }

    /// Row ranges per municipality, in ascending municipality order.
    pub fn municipality_blocks(&self) -> Vec<(MunicipalityId, std::ops::Range<usize>)> {
        let mut blocks = Vec::new();
        let n = self.n_rows();
        let mut start = 0usize;
        for i in 1..=n {
            if i == n || self.muni[i] != self.muni[start] {
                blocks.push((self.muni[start], start..i));
                start = i;
            }
        }
        blocks
    }

    // ------------------------------------------------------------------
    // Canonical file format
    // ------------------------------------------------------------------

    /// Write the canonical panel file: header, then one row per cell in
    /// `(municipality, week)` order. Rates are printed with 9 decimal
    /// digits; counts and all other numeric cells use the shortest
    /// representation that parses back to the same float, so counts
    /// round-trip bit-exactly. Missing values print as empty cells.
    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header: Vec<String> =
            CANONICAL_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for cat in &self.categories {
            header.push(col::count(cat));
            header.push(col::rate(cat));
        }
        writeln!(out, "{}", header.join(","))?;

        let fixed: Vec<Option<&[f64]>> = CANONICAL_FIXED_COLUMNS[4..]
            .iter()
            .map(|name| self.columns.get(*name).map(|v| v.as_slice()))
            .collect();
        let cats: Vec<(&[f64], &[f64])> = self
            .categories
            .iter()
            .map(|cat| {
                Ok((
                    self.column(&col::count(cat))?,
                    self.column(&col::rate(cat))?,
                ))
            })
            .collect::<Result<_>>()?;

        let mut line = String::with_capacity(256);
        for i in 0..self.n_rows() {
            line.clear();
            line.push_str(&format!(
                "{},{},{},{}",
                self.muni[i],
                self.week[i],
                self.week_start(self.week[i]),
                self.woy[i]
            ));
            for c in &fixed {
                line.push(',');
                if let Some(v) = c {
                    push_exact(&mut line, v[i]);
                }
            }
            for (counts, rates) in &cats {
                line.push(',');
                push_exact(&mut line, counts[i]);
                line.push(',');
                if rates[i].is_nan() {
                    // unreachable for well-formed panels; keep cell empty
                } else {
                    line.push_str(&format!("{:.9}", rates[i]));
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Read a canonical panel file. Counts and population are authoritative;
    /// rates are recomputed as `count * 100000 / population` so the
    /// rate/count invariant holds exactly after a round trip.
    pub fn read_canonical(path: &Path) -> Result<Panel> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::data(format!("cannot open panel file {}: {e}", path.display()))
        })?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("panel file is empty"))??;
        let names: Vec<&str> = header.trim_end().split(',').collect();
        for (i, expect) in CANONICAL_FIXED_COLUMNS.iter().enumerate() {
            if names.get(i) != Some(expect) {
                return Err(Error::data(format!(
                    "panel header column {i} is {:?}, expected {expect:?}",
                    names.get(i).copied().unwrap_or("<missing>")
                )));
            }
        }
        let mut categories = Vec::new();
        let mut k = CANONICAL_FIXED_COLUMNS.len();
        while k < names.len() {
            let cat = names[k]
                .strip_prefix("count_")
                .ok_or_else(|| Error::data(format!("expected count_ column, got {:?}", names[k])))?
                .to_string();
            if names.get(k + 1) != Some(&col::rate(&cat).as_str()) {
                return Err(Error::data(format!(
                    "count_{cat} must be followed by rate_{cat}"
                )));
            }
            categories.push(cat);
            k += 2;
        }

        let mut muni = Vec::new();
        let mut week = Vec::new();
        let mut anchor: Option<NaiveDate> = None;
        let mut cols: IndexMap<String, Vec<f64>> = IndexMap::new();
        for name in &CANONICAL_FIXED_COLUMNS[4..] {
            cols.insert(name.to_string(), Vec::new());
        }
        for cat in &categories {
            cols.insert(col::count(cat), Vec::new());
            cols.insert(col::rate(cat), Vec::new());
        }

        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != names.len() {
                return Err(Error::data(format!(
                    "panel row {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    names.len()
                )));
            }
            let m: MunicipalityId = fields[0]
                .parse()
                .map_err(|_| Error::data(format!("row {}: bad municipality id", lineno + 2)))?;
            let w: WeekIndex = fields[1]
                .parse()
                .map_err(|_| Error::data(format!("row {}: bad week index", lineno + 2)))?;
            let start = crate::dates::parse_date(fields[2])?;
            if anchor.is_none() {
                anchor = Some(start - chrono::Duration::weeks(w as i64));
            }
            muni.push(m);
            week.push(w);
            for (j, name) in CANONICAL_FIXED_COLUMNS[4..].iter().enumerate() {
                let raw = fields[4 + j];
                let v = if raw.is_empty() {
                    f64::NAN
                } else {
                    raw.parse::<f64>().map_err(|_| {
                        Error::data(format!("row {}: bad value in {name}", lineno + 2))
                    })?
                };
                cols.get_mut(*name).unwrap().push(v);
            }
            let base = CANONICAL_FIXED_COLUMNS.len();
            let pop = cols[col::POPULATION].last().copied().unwrap_or(f64::NAN);
            for (c, cat) in categories.iter().enumerate() {
                let count: f64 = fields[base + 2 * c].parse().map_err(|_| {
                    Error::data(format!("row {}: bad count for {cat}", lineno + 2))
                })?;
                let rate = if pop > 0.0 { count * 100_000.0 / pop } else { 0.0 };
                cols.get_mut(&col::count(cat)).unwrap().push(count);
                cols.get_mut(&col::rate(cat)).unwrap().push(rate);
            }
        }

        let anchor = anchor.ok_or_else(|| Error::data("panel file has no rows"))?;
        let mut panel = Panel::from_parts(anchor, muni, week, cols, categories)?;
        // the closure week is recoverable from the encoded indicators: the
        // earliest week any cell is closed or reopened
        let closure = panel.column(col::CLOSURE)?;
        let reopen = panel.column(col::REOPEN_BINARY)?;
        panel.closure_week = (0..panel.n_rows())
            .filter(|&i| closure[i] == 1.0 || reopen[i] == 1.0)
            .map(|i| panel.week_indices()[i])
            .min();
        Ok(panel)
    }
}

/// Append a float using the shortest representation that round-trips.
fn push_exact(line: &mut String, v: f64) {
    if v.is_nan() {
        return; // empty cell
    }
    use std::fmt::Write as _;
    let _ = write!(line, "{v}");
}

/// Weighted mean of `values` over rows where `mask` is true.
pub fn weighted_mean_masked(values: &[f64], weights: &[f64], mask: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..values.len() {
        if mask[i] {
            num += weights[i] * values[i];
            den += weights[i];
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Type-7 (linear interpolation) empirical quantile of `values`, the same
/// convention used for attendance percentiles and bootstrap centiles.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Group codes for a categorical row attribute: maps each row to a dense
/// level index, with the distinct levels reported in ascending order.
pub fn dense_codes(raw: &[u32]) -> (Vec<u32>, usize) {
    let mut levels: BTreeMap<u32, u32> = BTreeMap::new();
    for &v in raw {
        let next = levels.len() as u32;
        levels.entry(v).or_insert(next);
    }
    // BTreeMap insertion above assigns codes in first-seen order; re-map to
    // ascending level order for reproducibility across row orderings.
    let ordered: BTreeMap<u32, u32> = levels
        .keys()
        .enumerate()
        .map(|(i, &k)| (k, i as u32))
        .collect();
    (raw.iter().map(|v| ordered[v]).collect(), ordered.len())
}
