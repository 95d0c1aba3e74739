//! Run configuration: one TOML file drives the whole pipeline; command-line
//! flags may override individual keys (the manifest records every override).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dates::{WeekIndex, WeekRange};
use crate::error::{Error, Result};
use crate::ingest::TableSchema;
use crate::synth::DgpSpec;

fn default_categories() -> Vec<String> {
    vec![
        crate::ingest::CATEGORY_DV.to_string(),
        crate::ingest::CATEGORY_SEXUAL_ABUSE.to_string(),
        crate::ingest::CATEGORY_RAPE.to_string(),
    ]
}

fn default_smoothing() -> Vec<String> {
    vec![
        crate::ingest::CATEGORY_SEXUAL_ABUSE.to_string(),
        crate::ingest::CATEGORY_RAPE.to_string(),
    ]
}

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// National school-closure decree date.
    #[serde(default = "StudyConfig::default_closure_date")]
    pub closure_date: NaiveDate,
    /// Two-way FE estimation runs on weeks from this date onward; the full
    /// range stays available for counterfactual fitting windows.
    #[serde(default)]
    pub estimation_start: Option<NaiveDate>,
    #[serde(default = "default_categories")]
    pub categories: Vec<String>,
    #[serde(default = "default_smoothing")]
    pub smoothing_categories: Vec<String>,
    /// Emit per-subclass outcomes for this category.
    #[serde(default)]
    pub subclass_of: Option<String>,
    #[serde(default = "StudyConfig::default_validation_start")]
    pub validation_start: NaiveDate,
    #[serde(default = "StudyConfig::default_validation_end")]
    pub validation_end: NaiveDate,
    #[serde(default = "StudyConfig::default_lockdown_cutoff")]
    pub lockdown_early_cutoff: NaiveDate,
}

impl StudyConfig {
    fn default_closure_date() -> NaiveDate {
        d("2020-03-16")
    }

    fn default_validation_start() -> NaiveDate {
        d("2019-01-01")
    }

    fn default_validation_end() -> NaiveDate {
        d("2020-02-29")
    }

    fn default_lockdown_cutoff() -> NaiveDate {
        d("2020-08-30")
    }

    pub fn range(&self) -> Result<WeekRange> {
        WeekRange::new(self.start, self.end)
    }

    pub fn closure_week(&self) -> Result<WeekIndex> {
        self.range()?
            .week_index(self.closure_date)
            .ok_or_else(|| Error::config("closure date outside the study range"))
    }

    pub fn estimation_start_week(&self) -> Result<WeekIndex> {
        let range = self.range()?;
        match self.estimation_start {
            None => Ok(0),
            Some(date) => range
                .week_index(date)
                .ok_or_else(|| Error::config("estimation start outside the study range")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Raw,
    Synth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub mode: InputMode,
    #[serde(default)]
    pub records: Option<PathBuf>,
    #[serde(default)]
    pub population: Option<PathBuf>,
    #[serde(default)]
    pub school_status: Option<PathBuf>,
    #[serde(default)]
    pub epi: Option<PathBuf>,
    #[serde(default)]
    pub quarantine: Option<PathBuf>,
    /// Data-generating process for synth mode.
    #[serde(default)]
    pub synth: Option<DgpSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default)]
    pub records: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub population: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub school_status: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub epi: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub quarantine: Option<BTreeMap<String, String>>,
}

impl SchemaConfig {
    pub fn table_schema(
        map: &Option<BTreeMap<String, String>>,
        default_fields: &[&str],
    ) -> TableSchema {
        match map {
            Some(columns) => TableSchema {
                columns: columns.clone(),
            },
            None => TableSchema::identity(default_fields),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(default = "EstimateConfig::default_control_sets")]
    pub control_sets: Vec<crate::did::ControlSet>,
    #[serde(default = "EstimateConfig::default_modes")]
    pub reopening_modes: Vec<crate::did::ReopeningMode>,
    #[serde(default = "EstimateConfig::default_sample_rules")]
    pub sample_rules: Vec<crate::treatments::SampleRule>,
    #[serde(default = "EstimateConfig::default_quantiles")]
    pub attendance_quantiles: Vec<f64>,
    #[serde(default = "yes")]
    pub run_attendance: bool,
    #[serde(default = "yes")]
    pub run_subclasses: bool,
}

fn yes() -> bool {
    true
}

impl EstimateConfig {
    fn default_control_sets() -> Vec<crate::did::ControlSet> {
        use crate::did::ControlSet::*;
        vec![None, FeOnly, FePlusLockdownEpi]
    }

    fn default_modes() -> Vec<crate::did::ReopeningMode> {
        use crate::did::ReopeningMode::*;
        vec![Binary, Continuous]
    }

    fn default_sample_rules() -> Vec<crate::treatments::SampleRule> {
        vec![
            crate::treatments::SampleRule::Full,
            crate::treatments::SampleRule::NoJanuaryFebruary,
        ]
    }

    fn default_quantiles() -> Vec<f64> {
        vec![0.25, 0.50, 0.75, 0.90]
    }
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            control_sets: Self::default_control_sets(),
            reopening_modes: Self::default_modes(),
            sample_rules: Self::default_sample_rules(),
            attendance_quantiles: Self::default_quantiles(),
            run_attendance: true,
            run_subclasses: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityConfig {
    #[serde(default = "HeterogeneityConfig::default_age_bands")]
    pub age_bands: Vec<(u8, u8)>,
    #[serde(default = "yes")]
    pub by_sex: bool,
    #[serde(default = "yes")]
    pub by_lockdown: bool,
}

impl HeterogeneityConfig {
    fn default_age_bands() -> Vec<(u8, u8)> {
        vec![(0, 6), (7, 10), (11, 13), (14, 17)]
    }
}

impl Default for HeterogeneityConfig {
    fn default() -> Self {
        HeterogeneityConfig {
            age_bands: Self::default_age_bands(),
            by_sex: true,
            by_lockdown: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventStudyConfig {
    #[serde(default = "EventStudyConfig::default_closure_leads")]
    pub closure_leads: u32,
    #[serde(default = "EventStudyConfig::default_closure_lags")]
    pub closure_lags: u32,
    #[serde(default = "EventStudyConfig::default_reopening_leads")]
    pub reopening_leads: u32,
    #[serde(default = "EventStudyConfig::default_reopening_lags")]
    pub reopening_lags: u32,
    #[serde(default = "yes")]
    pub population_weights: bool,
    #[serde(default = "EventStudyConfig::default_control_set")]
    pub control_set: crate::did::ControlSet,
}

impl EventStudyConfig {
    fn default_closure_leads() -> u32 {
        60
    }

    fn default_closure_lags() -> u32 {
        20
    }

    fn default_reopening_leads() -> u32 {
        20
    }

    fn default_reopening_lags() -> u32 {
        40
    }

    fn default_control_set() -> crate::did::ControlSet {
        crate::did::ControlSet::FeOnly
    }
}

impl Default for EventStudyConfig {
    fn default() -> Self {
        EventStudyConfig {
            closure_leads: Self::default_closure_leads(),
            closure_lags: Self::default_closure_lags(),
            reopening_leads: Self::default_reopening_leads(),
            reopening_lags: Self::default_reopening_lags(),
            population_weights: true,
            control_set: Self::default_control_set(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualConfig {
    /// Estimation windows: first day of each candidate start year.
    #[serde(default = "CounterfactualConfig::default_window_starts")]
    pub window_starts: Vec<NaiveDate>,
    #[serde(default = "CounterfactualConfig::default_degrees")]
    pub degrees: Vec<u8>,
    #[serde(default = "CounterfactualConfig::default_scale_factors")]
    pub scale_factors: Vec<f64>,
    #[serde(default = "yes")]
    pub weighted_regression: bool,
    #[serde(default)]
    pub weighted_rmspe: bool,
    /// Attach bootstrap confidence bands to the selected series.
    #[serde(default = "yes")]
    pub bootstrap_intervals: bool,
    /// Re-run model selection inside every bootstrap replicate instead of
    /// holding the selected model fixed.
    #[serde(default)]
    pub reselect_in_bootstrap: bool,
}

impl CounterfactualConfig {
    fn default_window_starts() -> Vec<NaiveDate> {
        vec![d("2015-01-01"), d("2016-01-01"), d("2017-01-01"), d("2018-01-01")]
    }

    fn default_degrees() -> Vec<u8> {
        vec![0, 1, 2]
    }

    fn default_scale_factors() -> Vec<f64> {
        vec![1.0, 1.1, 1.2, 1.3, 1.4]
    }
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            window_starts: Self::default_window_starts(),
            degrees: Self::default_degrees(),
            scale_factors: Self::default_scale_factors(),
            weighted_regression: true,
            weighted_rmspe: false,
            bootstrap_intervals: true,
            reselect_in_bootstrap: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "BootstrapConfig::default_b")]
    pub b: usize,
    #[serde(default = "BootstrapConfig::default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dump_replicates: bool,
}

impl BootstrapConfig {
    fn default_b() -> usize {
        250
    }

    fn default_seed() -> u64 {
        20_200_316
    }
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: Self::default_b(),
            seed: Self::default_seed(),
            dump_replicates: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub study: StudyConfig,
    pub inputs: InputConfig,
    #[serde(default)]
    pub schemas: SchemaConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub heterogeneity: HeterogeneityConfig,
    #[serde(default)]
    pub eventstudy: EventStudyConfig,
    #[serde(default)]
    pub counterfactual: CounterfactualConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parse and validate a configuration file. Unknown keys are rejected
    /// with the offending key named; paths are checked for raw-mode runs.
    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        config.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok((config, text))
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        self.study.range()?;
        self.study.closure_week()?;
        if self.study.categories.is_empty() {
            return Err(Error::config("at least one outcome category is required"));
        }
        for c in &self.study.smoothing_categories {
            if !self.study.categories.contains(c) {
                return Err(Error::config(format!(
                    "smoothing category {c:?} is not a configured category"
                )));
            }
        }
        match self.inputs.mode {
            InputMode::Raw => {
                for (name, p) in [
                    ("records", &self.inputs.records),
                    ("population", &self.inputs.population),
                    ("school_status", &self.inputs.school_status),
                    ("epi", &self.inputs.epi),
                    ("quarantine", &self.inputs.quarantine),
                ] {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| Error::config(format!("raw mode requires inputs.{name}")))?;
                    if !self.resolve(base, p).exists() {
                        return Err(Error::config(format!(
                            "inputs.{name} path {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            InputMode::Synth => {
                if self.inputs.synth.is_none() {
                    return Err(Error::config("synth mode requires an [inputs.synth] table"));
                }
            }
        }
        for q in &self.estimate.attendance_quantiles {
            if !(0.0..=1.0).contains(q) {
                return Err(Error::config("attendance quantiles must lie in [0, 1]"));
            }
        }
        for s in &self.counterfactual.scale_factors {
            if *s < 1.0 {
                return Err(Error::config("scale factors must be at least 1"));
            }
        }
        if self.bootstrap.b == 0 {
            return Err(Error::config("bootstrap.b must be positive"));
        }
        Ok(())
    }

    /// Resolve a configured path relative to the config file location.
    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Counterfactual windows as (calendar-year label, start week).
    pub fn window_weeks(&self) -> Result<Vec<(i32, WeekIndex)>> {
        use chrono::Datelike;
        let range = self.study.range()?;
        self.counterfactual
            .window_starts
            .iter()
            .map(|date| {
                range
                    .week_index(*date)
                    .map(|w| (date.year(), w))
                    .ok_or_else(|| Error::config("window start outside range"))
            })
            .collect()
    }

    pub fn validation_weeks(&self) -> Result<(WeekIndex, WeekIndex)> {
        let range = self.study.range()?;
        let lo = range
            .week_index(self.study.validation_start)
            .ok_or_else(|| Error::config("validation start outside range"))?;
        let hi = range
            .week_index(self.study.validation_end)
            .ok_or_else(|| Error::config("validation end outside range"))?;
        Ok((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[study]
start = "2019-01-01"
end = "2021-12-31"

[inputs]
mode = "synth"

[inputs.synth]
n_municipalities = 10
n_weeks = 157
closure_week = 63
adoption = { kind = "staggered", earliest = 85, latest = 130, never_fraction = 0.1 }
effect_closure = -1.5
effect_reopen = -0.8
effect_attendance = 0.0
effect_event = 0.0
cohort_effects = []
continuous_effect = false
baseline_rate = 30.0
municipal_fe_scale = 3.0
woy_amplitude = 2.0
trend_degree = 0
trend_linear = 0.0
trend_quadratic = 0.0
noise_scale = 1.0
ar1 = 0.4
population_range = [20000, 120000]
with_covariates = true
categories = ["intrafamily_violence", "sexual_abuse", "rape"]
seed = 7

[output]
dir = "out"
"#;

    #[test]
    fn minimal_synth_config_parses_with_shipped_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let (cfg, text) = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.bootstrap.b, 250);
        assert_eq!(cfg.counterfactual.scale_factors, vec![1.0, 1.1, 1.2, 1.3, 1.4]);
        assert_eq!(cfg.eventstudy.closure_leads, 60);
        assert_eq!(cfg.eventstudy.reopening_lags, 40);
        assert_eq!(cfg.study.closure_date, d("2020-03-16"));
        assert_eq!(cfg.study.closure_week().unwrap(), 63);
        assert!(!text.is_empty());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, format!("{MINIMAL}\n[bogus_section]\nx = 1\n")).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("bogus_section"), "{err}");
    }

    #[test]
    fn missing_raw_paths_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let raw = MINIMAL.replace("mode = \"synth\"", "mode = \"raw\"");
        std::fs::write(&path, raw).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("records"), "{err}");
    }
}
