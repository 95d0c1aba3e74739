//! Lead/lag event-study designs around closure or reopening events,
//! normalized to the week before the event.

use serde::{Deserialize, Serialize};

use crate::dates::WeekIndex;
use crate::did::ControlSet;
use crate::error::{Error, Result};
use crate::fe::{estimate, FeDim, RegressionSpec};
use crate::panel::{col, MunicipalityId, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Closure,
    Reopening,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Closure => "closure",
            EventKind::Reopening => "reopening",
        }
    }
}

/// Lead/lag window. Lead 1 (the week before the event) is the omitted base
/// period; the terminal lead and lag absorb all more-distant periods.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EventWindow {
    pub event: EventKind,
    /// Number of leads J (indicators for leads 2..=J).
    pub leads: u32,
    /// Number of lags K (indicators for lags 0..=K).
    pub lags: u32,
}

impl EventWindow {
    pub fn validate(&self) -> Result<()> {
        if self.leads < 2 {
            return Err(Error::config("event window needs at least 2 leads"));
        }
        Ok(())
    }

    /// Term names in estimation order: leads J..2, then lags 0..K.
    pub fn terms(&self) -> Vec<String> {
        let mut t: Vec<String> = (2..=self.leads).rev().map(|j| format!("lead_{j}")).collect();
        t.extend((0..=self.lags).map(|k| format!("lag_{k}")));
        t
    }

    pub fn event_time_of(term: &str) -> Option<i64> {
        if let Some(j) = term.strip_prefix("lead_") {
            return j.parse::<i64>().ok().map(|j| -j);
        }
        if let Some(k) = term.strip_prefix("lag_") {
            return k.parse::<i64>().ok();
        }
        None
    }
}

/// Built lead/lag indicator columns plus the rows they apply to.
#[derive(Debug)]
pub struct EventDesign {
    pub window: EventWindow,
    pub columns: Vec<(String, Vec<f64>)>,
    /// Rows belonging to municipalities that experience the event.
    pub keep: Vec<bool>,
    /// Municipalities without the event, excluded and reported.
    pub excluded: Vec<MunicipalityId>,
}

/// Event week per municipality: the national closure week, or the first week
/// with reopen_binary = 1.
fn event_weeks(panel: &Panel, event: EventKind) -> Result<Vec<(MunicipalityId, Option<WeekIndex>)>> {
    match event {
        EventKind::Closure => {
            let cw = panel
                .closure_week
                .ok_or_else(|| Error::data("panel has no closure week"))?;
            Ok(panel
                .municipalities()
                .into_iter()
                .map(|m| (m, Some(cw)))
                .collect())
        }
        EventKind::Reopening => {
            let reopen = panel.column(col::REOPEN_BINARY)?;
            Ok(panel
                .municipality_blocks()
                .into_iter()
                .map(|(m, range)| {
                    let first = range
                        .clone()
                        .find(|&i| reopen[i] == 1.0)
                        .map(|i| panel.week_indices()[i]);
                    (m, first)
                })
                .collect())
        }
    }
}

/// Build the lead/lag indicators.
///
/// For event week E and cell week t with r = t - E:
/// lead_J = [r <= -J], lead_j = [r = -j] for j in 2..J, lag_k = [r = k] for
/// k in 0..K, lag_K = [r >= K]. Each indicator column must light up
/// somewhere; an all-zero column (for example K beyond every municipality's
/// post-event span) is an error.
pub fn build_leads_lags(panel: &Panel, window: &EventWindow) -> Result<EventDesign> {
    window.validate()?;
    let events = event_weeks(panel, window.event)?;
    let excluded: Vec<MunicipalityId> = events
        .iter()
        .filter_map(|(m, e)| e.is_none().then_some(*m))
        .collect();
    let event_of: std::collections::BTreeMap<MunicipalityId, WeekIndex> = events
        .into_iter()
        .filter_map(|(m, e)| e.map(|w| (m, w)))
        .collect();
    if event_of.is_empty() {
        return Err(Error::data(format!(
            "no municipality experiences the {} event",
            window.event.label()
        )));
    }

    let n = panel.n_rows();
    let terms = window.terms();
    let mut columns: Vec<(String, Vec<f64>)> =
        terms.iter().map(|t| (t.clone(), vec![0.0; n])).collect();
    let mut keep = vec![false; n];

    let j_max = window.leads as i64;
    let k_max = window.lags as i64;
    for i in 0..n {
        let m = panel.municipality_ids()[i];
        let Some(&e) = event_of.get(&m) else {
            continue;
        };
        keep[i] = true;
        let r = panel.week_indices()[i] as i64 - e as i64;
        let term = if r <= -j_max {
            Some(format!("lead_{j_max}"))
        } else if r <= -2 {
            Some(format!("lead_{}", -r))
        } else if r == -1 {
            None // omitted base period
        } else if r < k_max {
            Some(format!("lag_{r}"))
        } else {
            Some(format!("lag_{k_max}"))
        };
        if let Some(t) = term {
            let k = terms.iter().position(|x| x == &t).expect("term exists");
            columns[k].1[i] = 1.0;
        }
    }

    for (name, c) in &columns {
        if c.iter().all(|&v| v == 0.0) {
            return Err(Error::data(format!(
                "event-study indicator {name} is never active; shrink the window"
            )));
        }
    }
    Ok(EventDesign {
        window: *window,
        columns,
        keep,
        excluded,
    })
}

/// One point on the dynamic-effect path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventPoint {
    pub event_time: i64,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone)]
pub struct EventStudyResult {
    pub window: EventWindow,
    /// Points ordered by event time, including the base period at -1 with
    /// estimate exactly 0.
    pub path: Vec<EventPoint>,
    pub excluded: Vec<MunicipalityId>,
    pub n_obs: usize,
    pub n_clusters: usize,
}

/// Estimate the event study: lead/lag coefficients with clustered 95% CIs,
/// relative to the omitted week before the event.
pub fn estimate_event_study(
    panel: &Panel,
    window: &EventWindow,
    control_set: ControlSet,
    population_weights: bool,
) -> Result<EventStudyResult> {
    let design = build_leads_lags(panel, window)?;
    let keep = design.keep.clone();
    let sub = panel.filter_rows(|i| keep[i]);
    let design_cols: Vec<(String, Vec<f64>)> = design
        .columns
        .iter()
        .map(|(name, c)| {
            (
                name.clone(),
                (0..panel.n_rows()).filter(|&i| keep[i]).map(|i| c[i]).collect(),
            )
        })
        .collect();
    let mut regressors: Vec<String> = design_cols.iter().map(|(n, _)| n.clone()).collect();
    regressors.extend(control_set.extra_regressors());
    let staged = sub.with_columns(design_cols)?;

    let fe_dims = match control_set {
        ControlSet::None => vec![FeDim::Municipality, FeDim::WeekOfYear],
        other => {
            let mut dims = other.fe_dims();
            if dims.is_empty() {
                dims = vec![FeDim::Municipality, FeDim::WeekOfYear];
            }
            dims
        }
    };
    let mut spec = RegressionSpec::new(panel_outcome(panel)?, regressors);
    spec.fe_dims = fe_dims;
    if !population_weights {
        spec.weights = None;
    }
    let fit = estimate(&spec, &staged)?;

    let mut path: Vec<EventPoint> = fit
        .terms
        .iter()
        .enumerate()
        .filter_map(|(i, term)| {
            EventWindow::event_time_of(term).map(|et| {
                let (lo, hi) = fit.confidence_interval(i, 0.95);
                EventPoint {
                    event_time: et,
                    estimate: fit.coefficients[i],
                    se: fit.se(i),
                    ci_low: lo,
                    ci_high: hi,
                }
            })
        })
        .collect();
    path.push(EventPoint {
        event_time: -1,
        estimate: 0.0,
        se: 0.0,
        ci_low: 0.0,
        ci_high: 0.0,
    });
    path.sort_by_key(|p| p.event_time);

    Ok(EventStudyResult {
        window: *window,
        path,
        excluded: design.excluded,
        n_obs: fit.n_obs,
        n_clusters: fit.n_clusters,
    })
}

/// Single-outcome panels carry exactly one rate column; multi-outcome panels
/// must be estimated per category by the caller.
fn panel_outcome(panel: &Panel) -> Result<String> {
    match panel.categories.as_slice() {
        [one] => Ok(col::rate(one)),
        _ => Err(Error::config(
            "event study needs a single-outcome panel; select a category first",
        )),
    }
}

/// Restrict a multi-category panel to one outcome for event-study runs.
pub fn select_outcome(panel: &Panel, category: &str) -> Result<Panel> {
    if !panel.categories.iter().any(|c| c == category) {
        return Err(Error::config(format!("panel has no category {category:?}")));
    }
    let mut p = panel.clone();
    p.categories = vec![category.to_string()];
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Adoption, DgpSpec};

    fn reopening_window(leads: u32, lags: u32) -> EventWindow {
        EventWindow {
            event: EventKind::Reopening,
            leads,
            lags,
        }
    }

    #[test]
    fn cell_at_event_week_has_lag0_only() {
        let (panel, truth) = generate(&DgpSpec::default()).unwrap();
        let design = build_leads_lags(&panel, &reopening_window(8, 6)).unwrap();
        let m = *truth
            .reopen_week
            .iter()
            .find(|(_, w)| w.is_some())
            .unwrap()
            .0;
        let e = truth.reopen_week[&m].unwrap();
        let i = panel.find_cell(m, e).unwrap();
        for (name, c) in &design.columns {
            let expect = if name == "lag_0" { 1.0 } else { 0.0 };
            assert_eq!(c[i], expect, "{name}");
        }
    }

    #[test]
    fn distant_pre_event_cell_hits_terminal_lead() {
        let (panel, truth) = generate(&DgpSpec::default()).unwrap();
        let j = 8;
        let design = build_leads_lags(&panel, &reopening_window(j, 6)).unwrap();
        let m = *truth
            .reopen_week
            .iter()
            .find(|(_, w)| w.is_some())
            .unwrap()
            .0;
        let e = truth.reopen_week[&m].unwrap();
        let i = panel.find_cell(m, e - j - 5).unwrap();
        for (name, c) in &design.columns {
            let expect = if name == &format!("lead_{j}") { 1.0 } else { 0.0 };
            assert_eq!(c[i], expect, "{name}");
        }
    }

    #[test]
    fn indicators_partition_rows_except_base_period() {
        let (panel, truth) = generate(&DgpSpec {
            n_municipalities: 6,
            n_weeks: 60,
            closure_week: 20,
            adoption: Adoption::Staggered {
                earliest: 25,
                latest: 40,
                never_fraction: 0.0,
            },
            ..DgpSpec::default()
        })
        .unwrap();
        let design = build_leads_lags(&panel, &reopening_window(5, 4)).unwrap();
        for i in 0..panel.n_rows() {
            let m = panel.municipality_ids()[i];
            let w = panel.week_indices()[i] as i64;
            let e = truth.reopen_week[&m].unwrap() as i64;
            let sum: f64 = design.columns.iter().map(|(_, c)| c[i]).sum();
            if w - e == -1 {
                assert_eq!(sum, 0.0, "base period row must have no indicator");
            } else {
                assert_eq!(sum, 1.0, "row {i} (rel {})", w - e);
            }
        }
    }

    #[test]
    fn never_reopening_municipalities_are_excluded_and_listed() {
        let (panel, truth) = generate(&DgpSpec {
            adoption: Adoption::Staggered {
                earliest: 70,
                latest: 100,
                never_fraction: 0.3,
            },
            seed: 44,
            ..DgpSpec::default()
        })
        .unwrap();
        let design = build_leads_lags(&panel, &reopening_window(6, 5)).unwrap();
        let never: Vec<u32> = truth
            .reopen_week
            .iter()
            .filter_map(|(m, w)| w.is_none().then_some(*m))
            .collect();
        assert_eq!(design.excluded, never);
        for i in 0..panel.n_rows() {
            if never.contains(&panel.municipality_ids()[i]) {
                assert!(!design.keep[i]);
            }
        }
    }

    #[test]
    fn excessive_lag_span_is_an_error() {
        let (panel, _) = generate(&DgpSpec {
            n_weeks: 120,
            adoption: Adoption::Simultaneous { week: 110 },
            ..DgpSpec::default()
        })
        .unwrap();
        // only 10 post-event weeks exist, so lag_40 never activates
        let err = build_leads_lags(&panel, &reopening_window(6, 40)).unwrap_err();
        assert!(err.to_string().contains("never active"), "{err}");
    }

    #[test]
    fn constant_effect_dgp_recovers_step_path() {
        let (panel, _) = generate(&DgpSpec {
            effect_closure: 0.0,
            effect_reopen: 0.0,
            effect_event: -1.0,
            noise_scale: 0.25,
            seed: 17,
            ..DgpSpec::default()
        })
        .unwrap();
        let result = estimate_event_study(
            &select_outcome(&panel, "outcome").unwrap(),
            &reopening_window(8, 8),
            ControlSet::FeOnly,
            true,
        )
        .unwrap();
        for p in &result.path {
            if p.event_time == -1 {
                assert_eq!(p.estimate, 0.0);
            } else if p.event_time < -1 {
                assert!(
                    p.estimate.abs() <= 3.0 * p.se.max(1e-12),
                    "lead {} = {} (se {})",
                    p.event_time,
                    p.estimate,
                    p.se
                );
            } else {
                assert!(
                    (p.estimate + 1.0).abs() <= 3.0 * p.se.max(1e-12),
                    "lag {} = {} (se {})",
                    p.event_time,
                    p.estimate,
                    p.se
                );
            }
        }
    }

    #[test]
    fn outcome_shift_leaves_path_unchanged() {
        let spec = DgpSpec {
            effect_event: -0.6,
            seed: 23,
            ..DgpSpec::default()
        };
        let (panel, _) = generate(&spec).unwrap();
        let single = select_outcome(&panel, "outcome").unwrap();
        let w = reopening_window(6, 6);
        let a = estimate_event_study(&single, &w, ControlSet::FeOnly, true).unwrap();

        let shifted_col: Vec<f64> = single
            .column("rate_outcome")
            .unwrap()
            .iter()
            .map(|v| v + 100.0)
            .collect();
        let shifted = single
            .with_columns(vec![("rate_outcome".to_string(), shifted_col)])
            .unwrap();
        let b = estimate_event_study(&shifted, &w, ControlSet::FeOnly, true).unwrap();
        for (pa, pb) in a.path.iter().zip(&b.path) {
            assert!(
                (pa.estimate - pb.estimate).abs() < 1e-10,
                "event {}: {} vs {}",
                pa.event_time,
                pa.estimate,
                pb.estimate
            );
        }
    }
}
