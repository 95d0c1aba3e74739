//! Counterfactual baseline projection: fixed-effect levels plus polynomial
//! trend fitted on pre-closure data, model selection by prediction error,
//! post-period differencing into national missing-case series, and
//! sensitivity scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dates::WeekIndex;
use crate::error::{Error, Result};
use crate::fe::{demean, fit_wls, FeDim, GroupCodes};
use crate::panel::{col, MunicipalityId, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Cyclical and secular time structure only.
    TimeOnly,
    /// Additionally controls for the school-opening share (1 pre-closure, 0
    /// in full closure, the open share after reopening).
    WithSchoolOpening,
    /// School opening plus lockdown and epidemiological controls.
    WithSchoolOpeningAndEpi,
}

impl Channel {
    pub fn label(&self) -> &'static str {
        match self {
            Channel::TimeOnly => "time_only",
            Channel::WithSchoolOpening => "with_school_opening",
            Channel::WithSchoolOpeningAndEpi => "with_school_opening_and_epi",
        }
    }
}

pub const SCHOOL_OPENING_TERM: &str = "school_opening";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProjectionSettings {
    /// Polynomial trend degree: 0, 1, or 2.
    pub degree: u8,
    /// First week of the estimation window.
    pub window_start_week: WeekIndex,
    /// Calendar label of the window start (reporting only).
    pub window_label: i32,
    pub channel: Channel,
    /// Weight the projection regression by population.
    pub weighted: bool,
}

/// Fitted projection model: additive intercept, municipal and week-of-year
/// levels, polynomial trend, and optional channel terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualModel {
    pub outcome: String,
    pub settings: ProjectionSettings,
    pub intercept: f64,
    pub municipal_effects: BTreeMap<MunicipalityId, f64>,
    pub woy_effects: BTreeMap<u32, f64>,
    /// Trend coefficients, one per power of t up to the declared degree.
    pub trend_coefficients: Vec<f64>,
    pub school_opening_coefficient: Option<f64>,
    /// Named extra control coefficients (epidemiological channel).
    pub extra_coefficients: Vec<(String, f64)>,
    /// Prediction error over the validation window; NaN until scored.
    pub rmspe: f64,
}

/// School-opening regressor: 1 before the national closure, the reopening
/// share afterwards (0 while fully closed).
fn school_opening_column(panel: &Panel) -> Result<Vec<f64>> {
    let cw = panel
        .closure_week
        .ok_or_else(|| Error::data("panel has no closure week"))?;
    let share = panel.column(col::REOPEN_SHARE)?;
    Ok((0..panel.n_rows())
        .map(|i| {
            if panel.week_indices()[i] < cw {
                1.0
            } else {
                share[i]
            }
        })
        .collect())
}

fn trend_value(settings: &ProjectionSettings, week: WeekIndex, power: usize) -> f64 {
    let t = week as f64 - settings.window_start_week as f64;
    t.powi(power as i32 + 1)
}

/// Fit the projection on the estimation window by weighted least squares:
/// slope terms via the within transformation, then the additive intercept,
/// municipal, and week-of-year levels recovered from the partial residual by
/// alternating weighted means.
///
/// The time-only channel fits strictly pre-closure; channel models include
/// the post-closure window because the school-opening share is constant
/// (one) beforehand and is identified off its later variation.
pub fn fit_projection(
    panel: &Panel,
    outcome: &str,
    settings: &ProjectionSettings,
) -> Result<CounterfactualModel> {
    if settings.degree > 2 {
        return Err(Error::config("trend degree must be 0, 1, or 2"));
    }
    let closure_week = panel
        .closure_week
        .ok_or_else(|| Error::data("panel has no closure week"))?;
    if closure_week.saturating_sub(settings.window_start_week) < 52 {
        return Err(Error::config(
            "estimation window must contain at least one full pre-closure year",
        ));
    }

    let so_full = school_opening_column(panel)?;
    let weeks = panel.week_indices().to_vec();
    let in_window: Vec<bool> = match settings.channel {
        Channel::TimeOnly => weeks
            .iter()
            .map(|&w| w >= settings.window_start_week && w < closure_week)
            .collect(),
        _ => weeks.iter().map(|&w| w >= settings.window_start_week).collect(),
    };
    let keep = in_window.clone();
    let sample = panel.filter_rows(|i| keep[i]);
    if sample.n_rows() == 0 {
        return Err(Error::config("estimation window is empty"));
    }

    let y: Vec<f64> = sample.column(outcome)?.to_vec();
    let w: Vec<f64> = if settings.weighted {
        sample.column(col::WEIGHT)?.to_vec()
    } else {
        vec![1.0; sample.n_rows()]
    };

    // slope columns: trend powers, then channel terms
    let mut slope_names: Vec<String> = Vec::new();
    let mut slope_cols: Vec<Vec<f64>> = Vec::new();
    for p in 0..settings.degree as usize {
        slope_names.push(format!("trend_{}", p + 1));
        slope_cols.push(
            sample
                .week_indices()
                .iter()
                .map(|&wk| trend_value(settings, wk, p))
                .collect(),
        );
    }
    if settings.channel != Channel::TimeOnly {
        let so_sample: Vec<f64> = (0..panel.n_rows())
            .filter(|&i| in_window[i])
            .map(|i| so_full[i])
            .collect();
        slope_names.push(SCHOOL_OPENING_TERM.to_string());
        slope_cols.push(so_sample);
        if settings.channel == Channel::WithSchoolOpeningAndEpi {
            for name in [col::QUARANTINE, col::COVID_CASES, col::TESTS, col::POSITIVITY] {
                slope_names.push(name.to_string());
                slope_cols.push(sample.column(name)?.to_vec());
            }
        }
    }

    let dims: Vec<GroupCodes> = [FeDim::Municipality, FeDim::WeekOfYear]
        .iter()
        .map(|d| {
            let (codes, n_levels) = d.codes(&sample);
            GroupCodes { codes, n_levels }
        })
        .collect();

    let slopes: Vec<f64> = if slope_cols.is_empty() {
        Vec::new()
    } else {
        let mut work = Vec::with_capacity(1 + slope_cols.len());
        work.push(y.clone());
        work.extend(slope_cols.iter().cloned());
        demean(&mut work, &dims, &w, 1e-11, 10_000)?;
        let (yw, xw) = work.split_first().unwrap();
        let refs: Vec<&[f64]> = xw.iter().map(|c| c.as_slice()).collect();
        let names: Vec<&str> = slope_names.iter().map(|s| s.as_str()).collect();
        fit_wls(&refs, &names, yw, &w)?.coefficients
    };

    // partial residual on the raw scale
    let mut r = y;
    for (j, c) in slope_cols.iter().enumerate() {
        for i in 0..r.len() {
            r[i] -= slopes[j] * c[i];
        }
    }

    // additive levels by alternating weighted means
    let munis = sample.municipality_ids();
    let woys = sample.week_of_year_codes();
    let mut mu: BTreeMap<MunicipalityId, f64> =
        sample.municipalities().into_iter().map(|m| (m, 0.0)).collect();
    let mut sw: BTreeMap<u32, f64> = woys.iter().map(|&s| (s, 0.0)).collect();
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::data("projection weights sum to zero"));
    }
    let mut alpha = r
        .iter()
        .zip(&w)
        .map(|(v, wi)| v * wi)
        .sum::<f64>()
        / wsum;
    let scale = r.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for _ in 0..10_000 {
        let mut num: BTreeMap<MunicipalityId, f64> = BTreeMap::new();
        let mut den: BTreeMap<MunicipalityId, f64> = BTreeMap::new();
        for i in 0..r.len() {
            let resid = r[i] - alpha - mu[&munis[i]] - sw[&woys[i]];
            *num.entry(munis[i]).or_insert(0.0) += w[i] * resid;
            *den.entry(munis[i]).or_insert(0.0) += w[i];
        }
        let mut delta = 0.0_f64;
        for (m, v) in num {
            if den[&m] > 0.0 {
                let upd = v / den[&m];
                delta = delta.max(upd.abs());
                *mu.get_mut(&m).unwrap() += upd;
            }
        }
        let mut num_s: BTreeMap<u32, f64> = BTreeMap::new();
        let mut den_s: BTreeMap<u32, f64> = BTreeMap::new();
        for i in 0..r.len() {
            let resid = r[i] - alpha - mu[&munis[i]] - sw[&woys[i]];
            *num_s.entry(woys[i]).or_insert(0.0) += w[i] * resid;
            *den_s.entry(woys[i]).or_insert(0.0) += w[i];
        }
        for (s, v) in num_s {
            if den_s[&s] > 0.0 {
                let upd = v / den_s[&s];
                delta = delta.max(upd.abs());
                *sw.get_mut(&s).unwrap() += upd;
            }
        }
        if delta < 1e-12 * scale {
            break;
        }
    }
    // gauge: weighted means of the level sets fold into the intercept
    let mut mw: BTreeMap<MunicipalityId, f64> = BTreeMap::new();
    for i in 0..r.len() {
        *mw.entry(munis[i]).or_insert(0.0) += w[i];
    }
    let mu_mean =
        mu.iter().map(|(m, v)| mw[m] * v).sum::<f64>() / mw.values().sum::<f64>();
    let mut sww: BTreeMap<u32, f64> = BTreeMap::new();
    for i in 0..r.len() {
        *sww.entry(woys[i]).or_insert(0.0) += w[i];
    }
    let sw_mean =
        sw.iter().map(|(s, v)| sww[s] * v).sum::<f64>() / sww.values().sum::<f64>();
    for v in mu.values_mut() {
        *v -= mu_mean;
    }
    for v in sw.values_mut() {
        *v -= sw_mean;
    }
    alpha += mu_mean + sw_mean;

    let n_trend = settings.degree as usize;
    let school_opening_coefficient = (settings.channel != Channel::TimeOnly)
        .then(|| slopes[n_trend]);
    let extra_coefficients = if settings.channel == Channel::WithSchoolOpeningAndEpi {
        slope_names[n_trend + 1..]
            .iter()
            .cloned()
            .zip(slopes[n_trend + 1..].iter().copied())
            .collect()
    } else {
        Vec::new()
    };

    Ok(CounterfactualModel {
        outcome: outcome.to_string(),
        settings: *settings,
        intercept: alpha,
        municipal_effects: mu,
        woy_effects: sw,
        trend_coefficients: slopes[..n_trend].to_vec(),
        school_opening_coefficient,
        extra_coefficients,
        rmspe: f64::NAN,
    })
}

impl CounterfactualModel {
    /// Predicted rate for every panel row.
    pub fn predict(&self, panel: &Panel) -> Result<Vec<f64>> {
        let so = if self.school_opening_coefficient.is_some() {
            Some(school_opening_column(panel)?)
        } else {
            None
        };
        let extra: Vec<(&[f64], f64)> = self
            .extra_coefficients
            .iter()
            .map(|(name, coef)| Ok((panel.column(name)?, *coef)))
            .collect::<Result<_>>()?;

        let mut out = Vec::with_capacity(panel.n_rows());
        for i in 0..panel.n_rows() {
            let m = panel.municipality_ids()[i];
            let mu = self.municipal_effects.get(&m).ok_or_else(|| {
                Error::data(format!("municipality {m} absent from the fitted model"))
            })?;
            let woy = panel.week_of_year_codes()[i];
            let s = self.woy_effects.get(&woy).ok_or_else(|| {
                Error::numerical(format!("week-of-year {woy} absent from the fitted model"))
            })?;
            let mut v = self.intercept + mu + s;
            for (p, b) in self.trend_coefficients.iter().enumerate() {
                v += b * trend_value(&self.settings, panel.week_indices()[i], p);
            }
            if let (Some(coef), Some(so)) = (self.school_opening_coefficient, so.as_ref()) {
                v += coef * so[i];
            }
            for (colv, coef) in &extra {
                v += coef * colv[i];
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Root mean squared prediction error over the validation cells: the square
/// root of the (by default unweighted) mean squared cell-level error.
pub fn rmspe(
    model: &CounterfactualModel,
    panel: &Panel,
    validation: &[bool],
    weighted: bool,
) -> Result<f64> {
    if validation.len() != panel.n_rows() {
        return Err(Error::config("validation mask length mismatch"));
    }
    if !validation.iter().any(|&b| b) {
        return Err(Error::data("validation set is empty"));
    }
    let y = panel.column(&model.outcome)?;
    let pred = model.predict(panel)?;
    let w = panel.column(col::WEIGHT)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..panel.n_rows() {
        if validation[i] {
            let wi = if weighted { w[i] } else { 1.0 };
            let e = y[i] - pred[i];
            num += wi * e * e;
            den += wi;
        }
    }
    Ok((num / den).sqrt())
}

/// Validation mask: weeks in [start, end], the final pre-closure stretch.
pub fn validation_mask(panel: &Panel, start: WeekIndex, end: WeekIndex) -> Vec<bool> {
    panel
        .week_indices()
        .iter()
        .map(|&w| w >= start && w <= end)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGridRow {
    pub window_label: i32,
    pub window_start_week: WeekIndex,
    pub degree: u8,
    pub rmspe: f64,
    pub selected: bool,
}

/// Fit the full window-by-degree grid, score each model on the validation
/// cells, and return the best model (ties broken toward lower degree, then
/// later window start) along with the grid report.
pub fn select_model(
    panel: &Panel,
    outcome: &str,
    windows: &[(i32, WeekIndex)],
    degrees: &[u8],
    channel: Channel,
    validation: &[bool],
    weighted: bool,
    weighted_rmspe: bool,
) -> Result<(CounterfactualModel, Vec<ModelGridRow>)> {
    if windows.is_empty() || degrees.is_empty() {
        return Err(Error::config("model grid is empty"));
    }
    let mut grid: Vec<(ModelGridRow, CounterfactualModel)> = Vec::new();
    for &(label, start) in windows {
        for &degree in degrees {
            let settings = ProjectionSettings {
                degree,
                window_start_week: start,
                window_label: label,
                channel,
                weighted,
            };
            let mut model = fit_projection(panel, outcome, &settings)?;
            model.rmspe = rmspe(&model, panel, validation, weighted_rmspe)?;
            grid.push((
                ModelGridRow {
                    window_label: label,
                    window_start_week: start,
                    degree,
                    rmspe: model.rmspe,
                    selected: false,
                },
                model,
            ));
        }
    }
    let mut best = 0usize;
    for i in 1..grid.len() {
        let (a, b) = (&grid[i].0, &grid[best].0);
        let better = a.rmspe < b.rmspe
            || (a.rmspe == b.rmspe
                && (a.degree < b.degree
                    || (a.degree == b.degree && a.window_start_week > b.window_start_week)));
        if better {
            best = i;
        }
    }
    grid[best].0.selected = true;
    let model = grid[best].1.clone();
    Ok((model, grid.into_iter().map(|(row, _)| row).collect()))
}

/// National weekly differential series and period aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifferentialSeries {
    pub outcome: String,
    pub scale_factor: f64,
    pub weeks: Vec<WeekIndex>,
    /// Actual national cases per week (rate times population / 100k).
    pub actual_total: Vec<f64>,
    /// Projected national cases per week, after scaling.
    pub projected_total: Vec<f64>,
    /// Missing cases per week: projected minus actual (positive = missing).
    pub differential: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Sum of differentials over each municipality's closure phase.
    pub closure_aggregate: f64,
    /// Sum over the post-reopening phase.
    pub reopening_aggregate: f64,
    pub total_aggregate: f64,
    /// Bootstrap intervals for the three aggregates; NaN until attached.
    pub closure_ci: (f64, f64),
    pub reopening_ci: (f64, f64),
    pub total_ci: (f64, f64),
    /// Unscaled projected-case total over the post period (sensitivity
    /// linearity: aggregate(s) = aggregate(1) + (s-1) * this).
    pub sum_projected_unscaled: f64,
}

/// Difference scaled projections against actuals over the post-closure
/// period and aggregate to national weekly missing cases, split into
/// closure and reopening phases at each municipality's own reopening week.
pub fn project_and_difference(
    model: &CounterfactualModel,
    panel: &Panel,
    scale_factor: f64,
) -> Result<DifferentialSeries> {
    if scale_factor < 1.0 {
        return Err(Error::config("scale factor must be at least 1"));
    }
    let cw = panel
        .closure_week
        .ok_or_else(|| Error::data("panel has no closure week"))?;
    let pred = model.predict(panel)?;
    let y = panel.column(&model.outcome)?;
    let pop = panel.column(col::POPULATION)?;
    let closure = panel.column(col::CLOSURE)?;

    let weeks: Vec<WeekIndex> = panel.weeks().into_iter().filter(|&w| w >= cw).collect();
    let pos: BTreeMap<WeekIndex, usize> = weeks.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let mut actual_total = vec![0.0; weeks.len()];
    let mut projected_total = vec![0.0; weeks.len()];
    let mut closure_aggregate = 0.0;
    let mut reopening_aggregate = 0.0;
    let mut sum_projected_unscaled = 0.0;

    for i in 0..panel.n_rows() {
        let w = panel.week_indices()[i];
        let Some(&k) = pos.get(&w) else { continue };
        let persons = pop[i] / 100_000.0;
        let actual = y[i] * persons;
        let projected = pred[i] * persons;
        actual_total[k] += actual;
        projected_total[k] += scale_factor * projected;
        sum_projected_unscaled += projected;
        let diff = scale_factor * projected - actual;
        if closure[i] == 1.0 {
            closure_aggregate += diff;
        } else {
            reopening_aggregate += diff;
        }
    }
    let differential: Vec<f64> = projected_total
        .iter()
        .zip(&actual_total)
        .map(|(p, a)| p - a)
        .collect();

    Ok(DifferentialSeries {
        outcome: model.outcome.clone(),
        scale_factor,
        ci_low: vec![f64::NAN; weeks.len()],
        ci_high: vec![f64::NAN; weeks.len()],
        weeks,
        actual_total,
        projected_total,
        total_aggregate: closure_aggregate + reopening_aggregate,
        closure_aggregate,
        reopening_aggregate,
        differential,
        sum_projected_unscaled,
        closure_ci: (f64::NAN, f64::NAN),
        reopening_ci: (f64::NAN, f64::NAN),
        total_ci: (f64::NAN, f64::NAN),
    })
}

/// Share of the reporting differential explained by the school channel, per
/// period: (aggregate without channel - aggregate with channel) / aggregate
/// without channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelShare {
    pub closure: f64,
    pub reopening: f64,
    pub total: f64,
}

pub fn school_channel_share(
    time_only: &DifferentialSeries,
    with_channel: &DifferentialSeries,
) -> Result<ChannelShare> {
    let share = |a: f64, b: f64| -> Result<f64> {
        if a == 0.0 {
            return Err(Error::numerical(
                "time-only aggregate is zero; channel share undefined",
            ));
        }
        Ok((a - b) / a)
    };
    Ok(ChannelShare {
        closure: share(time_only.closure_aggregate, with_channel.closure_aggregate)?,
        reopening: share(
            time_only.reopening_aggregate,
            with_channel.reopening_aggregate,
        )?,
        total: share(time_only.total_aggregate, with_channel.total_aggregate)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Adoption, DgpSpec};

    fn settings(degree: u8, start: WeekIndex) -> ProjectionSettings {
        ProjectionSettings {
            degree,
            window_start_week: start,
            window_label: 2018,
            channel: Channel::TimeOnly,
            weighted: true,
        }
    }

    fn base_spec() -> DgpSpec {
        DgpSpec {
            n_municipalities: 8,
            n_weeks: 160,
            closure_week: 110,
            adoption: Adoption::Staggered {
                earliest: 120,
                latest: 140,
                never_fraction: 0.0,
            },
            ..DgpSpec::default()
        }
    }

    #[test]
    fn degree0_constant_outcome_recovers_intercept_with_zero_rmspe() {
        let spec = DgpSpec {
            noise_scale: 0.0,
            woy_amplitude: 0.0,
            municipal_fe_scale: 0.0,
            effect_closure: 0.0,
            effect_reopen: 0.0,
            baseline_rate: 12.5,
            ..base_spec()
        };
        let (panel, _) = generate(&spec).unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(0, 0)).unwrap();
        assert!((model.intercept - 12.5).abs() < 1e-9);
        let mask = validation_mask(&panel, 52, 109);
        let e = rmspe(&model, &panel, &mask, false).unwrap();
        assert!(e < 1e-9, "rmspe {e}");
    }

    #[test]
    fn linear_trend_recovered_exactly_without_noise() {
        let spec = DgpSpec {
            noise_scale: 0.0,
            trend_degree: 1,
            trend_linear: 0.037,
            effect_closure: 0.0,
            effect_reopen: 0.0,
            ..base_spec()
        };
        let (panel, _) = generate(&spec).unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(1, 0)).unwrap();
        assert!(
            (model.trend_coefficients[0] - 0.037).abs() < 1e-6,
            "slope {}",
            model.trend_coefficients[0]
        );
    }

    #[test]
    fn rmspe_definitional_oracle() {
        let (panel, _) = generate(&DgpSpec {
            seed: 77,
            ..base_spec()
        })
        .unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(1, 0)).unwrap();
        let mask = validation_mask(&panel, 52, 109);
        let got = rmspe(&model, &panel, &mask, false).unwrap();

        let y = panel.column("rate_outcome").unwrap();
        let pred = model.predict(&panel).unwrap();
        let errs: Vec<f64> = (0..panel.n_rows())
            .filter(|&i| mask[i])
            .map(|i| (y[i] - pred[i]).powi(2))
            .collect();
        let oracle = (errs.iter().sum::<f64>() / errs.len() as f64).sqrt();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn rmspe_single_cell_is_absolute_error() {
        let (panel, _) = generate(&DgpSpec {
            seed: 78,
            ..base_spec()
        })
        .unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(0, 0)).unwrap();
        let mut mask = vec![false; panel.n_rows()];
        mask[500] = true;
        let got = rmspe(&model, &panel, &mask, false).unwrap();
        let y = panel.column("rate_outcome").unwrap()[500];
        let p = model.predict(&panel).unwrap()[500];
        assert!((got - (y - p).abs()).abs() < 1e-12);
    }

    #[test]
    fn empty_validation_set_is_an_error() {
        let (panel, _) = generate(&base_spec()).unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(0, 0)).unwrap();
        let err = rmspe(&model, &panel, &vec![false; panel.n_rows()], false).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn quadratic_dgp_selects_degree_two_everywhere() {
        let spec = DgpSpec {
            noise_scale: 0.05,
            trend_degree: 2,
            trend_linear: -0.01,
            trend_quadratic: 0.0006,
            effect_closure: 0.0,
            effect_reopen: 0.0,
            seed: 91,
            ..base_spec()
        };
        let (panel, _) = generate(&spec).unwrap();
        let mask = validation_mask(&panel, 58, 109);
        let windows = [(2015, 0u32), (2016, 20u32)];
        let (best, grid) = select_model(
            &panel,
            "rate_outcome",
            &windows,
            &[0, 1, 2],
            Channel::TimeOnly,
            &mask,
            true,
            false,
        )
        .unwrap();
        assert_eq!(best.settings.degree, 2);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid.iter().filter(|r| r.selected).count(), 1);
    }

    #[test]
    fn constant_data_tie_breaks_to_degree0_latest_window() {
        let spec = DgpSpec {
            noise_scale: 0.0,
            woy_amplitude: 0.0,
            municipal_fe_scale: 0.0,
            effect_closure: 0.0,
            effect_reopen: 0.0,
            ..base_spec()
        };
        let (panel, _) = generate(&spec).unwrap();
        let mask = validation_mask(&panel, 58, 109);
        let windows = [(2015, 0u32), (2016, 20u32), (2017, 40u32)];
        let (best, grid) = select_model(
            &panel,
            "rate_outcome",
            &windows,
            &[0, 1, 2],
            Channel::TimeOnly,
            &mask,
            true,
            false,
        )
        .unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(best.settings.degree, 0);
        assert_eq!(best.settings.window_start_week, 40);
    }

    #[test]
    fn zero_differential_when_actuals_equal_projection() {
        let spec = DgpSpec {
            noise_scale: 0.0,
            effect_closure: 0.0,
            effect_reopen: 0.0,
            ..base_spec()
        };
        let (panel, _) = generate(&spec).unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(0, 0)).unwrap();
        let series = project_and_difference(&model, &panel, 1.0).unwrap();
        for d in &series.differential {
            assert!(d.abs() < 1e-6, "differential {d}");
        }
        assert!(series.total_aggregate.abs() < 1e-4);
    }

    #[test]
    fn sensitivity_scaling_is_exactly_linear() {
        let (panel, _) = generate(&DgpSpec {
            seed: 55,
            ..base_spec()
        })
        .unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(1, 0)).unwrap();
        let base = project_and_difference(&model, &panel, 1.0).unwrap();
        for s in [1.1, 1.2, 1.3, 1.4] {
            let scaled = project_and_difference(&model, &panel, s).unwrap();
            let expect = base.total_aggregate + (s - 1.0) * base.sum_projected_unscaled;
            let rel = (scaled.total_aggregate - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-6, "scale {s}: {} vs {expect}", scaled.total_aggregate);
            // weekly series shift by 0.1 x projected as well
            for k in 0..base.weeks.len() {
                let e = base.differential[k]
                    + (s - 1.0) * base.projected_total[k] / base.scale_factor;
                assert!((scaled.differential[k] - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn channel_share_trivial_cases() {
        let (panel, _) = generate(&DgpSpec {
            seed: 56,
            ..base_spec()
        })
        .unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(1, 0)).unwrap();
        let a = project_and_difference(&model, &panel, 1.0).unwrap();
        let same = school_channel_share(&a, &a).unwrap();
        assert_eq!(same.total, 0.0);

        let mut zero = a.clone();
        zero.closure_aggregate = 0.0;
        zero.reopening_aggregate = 0.0;
        zero.total_aggregate = 0.0;
        let full = school_channel_share(&a, &zero).unwrap();
        assert_eq!(full.total, 1.0);
    }

    #[test]
    fn municipality_permutation_leaves_series_unchanged() {
        let (panel, _) = generate(&DgpSpec {
            seed: 57,
            ..base_spec()
        })
        .unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(1, 0)).unwrap();
        let a = project_and_difference(&model, &panel, 1.0).unwrap();

        // rebuild the panel with rows fed in reverse order; sorting restores
        // the canonical layout so the series must be identical
        let mut cols: indexmap::IndexMap<String, Vec<f64>> = indexmap::IndexMap::new();
        for name in panel.column_names().map(|s| s.to_string()).collect::<Vec<_>>() {
            let mut v = panel.column(&name).unwrap().to_vec();
            v.reverse();
            cols.insert(name, v);
        }
        let mut munis = panel.municipality_ids().to_vec();
        munis.reverse();
        let mut weeks = panel.week_indices().to_vec();
        weeks.reverse();
        let mut shuffled =
            Panel::from_parts(panel.anchor, munis, weeks, cols, panel.categories.clone()).unwrap();
        shuffled.closure_week = panel.closure_week;
        let b = project_and_difference(&model, &shuffled, 1.0).unwrap();
        for (x, y) in a.differential.iter().zip(&b.differential) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_municipality_in_projection_is_an_error() {
        let (panel, _) = generate(&base_spec()).unwrap();
        let model = fit_projection(&panel, "rate_outcome", &settings(0, 0)).unwrap();
        let (other, _) = generate(&DgpSpec {
            n_municipalities: 12,
            seed: 99,
            ..base_spec()
        })
        .unwrap();
        let err = project_and_difference(&model, &other, 1.0).unwrap_err();
        assert!(err.to_string().contains("absent"), "{err}");
    }

    #[test]
    fn in_sample_reproduction_matches_group_mean_oracle() {
        // degree 0 on a one-year window where each (municipality, woy)
        // appears once: fitted values equal row mean + weighted column mean
        // - weighted grand mean
        let spec = DgpSpec {
            n_municipalities: 5,
            n_weeks: 52,
            closure_week: 40, // unused: window is explicit below
            adoption: Adoption::NoReopening,
            noise_scale: 0.8,
            ar1: 0.0,
            seed: 70,
            ..DgpSpec::default()
        };
        let (mut panel, _) = generate(&spec).unwrap();
        // treat the full year as pre-closure for this in-sample check
        panel.closure_week = Some(52);
        let model = fit_projection(&panel, "rate_outcome", &settings(0, 0)).unwrap();
        let pred = model.predict(&panel).unwrap();

        let y = panel.column("rate_outcome").unwrap();
        let w = panel.column(col::WEIGHT).unwrap();
        let munis = panel.municipality_ids();
        let woys = panel.week_of_year_codes();
        // oracle pieces
        let mut row_mean: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        let mut col_mean: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        let mut grand = (0.0, 0.0);
        for i in 0..panel.n_rows() {
            let e = row_mean.entry(munis[i]).or_insert((0.0, 0.0));
            e.0 += y[i]; // unweighted over weeks within municipality
            e.1 += 1.0;
            let c = col_mean.entry(woys[i]).or_insert((0.0, 0.0));
            c.0 += w[i] * y[i];
            c.1 += w[i];
            grand.0 += w[i] * y[i];
            grand.1 += w[i];
        }
        for i in 0..panel.n_rows() {
            let rm = row_mean[&munis[i]].0 / row_mean[&munis[i]].1;
            let cm = col_mean[&woys[i]].0 / col_mean[&woys[i]].1;
            let gm = grand.0 / grand.1;
            let oracle = rm + cm - gm;
            assert!(
                (pred[i] - oracle).abs() < 1e-8,
                "row {i}: {} vs {oracle}",
                pred[i]
            );
        }
    }
}
