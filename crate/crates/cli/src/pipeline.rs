//! Subcommand implementations: each step obtains the canonical panel,
//! runs its part of the analysis, and writes deterministic tables into the
//! output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use paneldd_core::config::{InputMode, RunConfig, SchemaConfig};
use paneldd_core::counterfactual::{
    self, Channel, CounterfactualModel, DifferentialSeries,
};
use paneldd_core::dates::WeekIndex;
use paneldd_core::did::{self, ControlSet, DesignOptions, DidFit, ReopeningMode};
use paneldd_core::error::{Error, Result};
use paneldd_core::eventstudy::{self, EventKind, EventWindow};
use paneldd_core::fe::FeDim;
use paneldd_core::ingest::{self, Subgroup};
use paneldd_core::panel::{col, Panel};
use paneldd_core::report::{self, ArtifactRecord, Cell, RunManifest};
use paneldd_core::treatments::{self, LockdownStratum, TreatmentSchedule};
use paneldd_core::{bootstrap, diagnostics, synth};

pub struct Ctx {
    pub config: RunConfig,
    pub config_text: String,
    pub config_dir: PathBuf,
    pub hash: String,
    pub out_dir: PathBuf,
    pub overrides: Vec<String>,
    pub artifacts: Vec<ArtifactRecord>,
    pub timings: Vec<(String, u128)>,
}

impl Ctx {
    pub fn new(config_path: &Path, overrides: Vec<String>, config: RunConfig, text: String) -> Result<Ctx> {
        let out_dir = {
            let base = config_path.parent().unwrap_or(Path::new("."));
            config.resolve(base, &config.output.dir)
        };
        std::fs::create_dir_all(&out_dir)?;
        Ok(Ctx {
            hash: report::config_hash(&text),
            config_dir: config_path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            config,
            config_text: text,
            out_dir,
            overrides,
            artifacts: Vec::new(),
            timings: Vec::new(),
        })
    }

    fn table(&mut self, name: &str, header: &[&str], rows: Vec<Vec<Cell>>) -> Result<()> {
        report::write_table(&self.out_dir.join(name), &self.hash, header, &rows)?;
        self.artifacts.push(ArtifactRecord {
            name: name.to_string(),
            rows: rows.len(),
        });
        eprintln!("wrote {name} ({} rows)", rows.len());
        Ok(())
    }

    fn timed<T>(&mut self, step: &str, f: impl FnOnce(&mut Ctx) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timings.push((step.to_string(), start.elapsed().as_millis()));
        Ok(out)
    }

    pub fn write_manifest(&self) -> Result<()> {
        let manifest = RunManifest {
            tool: "paneldd".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash.clone(),
            config: toml::from_str(&self.config_text)
                .map_err(|e| Error::config(format!("config echo failed: {e}")))?,
            overrides: self.overrides.clone(),
            seed: self.config.bootstrap.seed,
            artifacts: self
                .artifacts
                .iter()
                .map(|a| ArtifactRecord {
                    name: a.name.clone(),
                    rows: a.rows,
                })
                .collect(),
            timings_ms: self.timings.clone(),
        };
        manifest.write(&self.out_dir)?;
        eprintln!("wrote run_manifest.json");
        Ok(())
    }
}

const PANEL_FILE: &str = "panel.csv";

/// Raw tables loaded once and shared by panel and subgroup builds.
struct RawInputs {
    records: ingest::RecordTable,
    population: ingest::PopulationTable,
    school: ingest::StatusTable,
    epi: ingest::StatusTable,
    quarantine: ingest::StatusTable,
}

fn load_raw(ctx: &Ctx) -> Result<RawInputs> {
    let cfg = &ctx.config;
    let base = &ctx.config_dir;
    let range = cfg.study.range()?;
    let path = |p: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        p.as_ref()
            .map(|p| cfg.resolve(base, p))
            .ok_or_else(|| Error::config(format!("inputs.{name} is required in raw mode")))
    };

    let population = ingest::load_population(
        &path(&cfg.inputs.population, "population")?,
        &SchemaConfig::table_schema(
            &cfg.schemas.population,
            &["municipality", "year", "age", "sex", "count"],
        ),
    )?;
    let registry = population.municipalities();

    let records = ingest::load_records(
        &path(&cfg.inputs.records, "records")?,
        &SchemaConfig::table_schema(
            &cfg.schemas.records,
            &["date", "municipality", "category", "subclass", "age", "sex"],
        ),
        &registry,
        &range,
        &cfg.study.categories,
    )?;

    let unit = BTreeMap::from([("openness".to_string(), (0.0, 1.0)), ("attendance".to_string(), (0.0, 1.0))]);
    let school = ingest::load_status(
        &path(&cfg.inputs.school_status, "school_status")?,
        &SchemaConfig::table_schema(
            &cfg.schemas.school_status,
            &["municipality", "week_start", "openness", "attendance"],
        ),
        &range,
        &["openness", "attendance"],
        &unit,
    )?;
    let epi = ingest::load_status(
        &path(&cfg.inputs.epi, "epi")?,
        &SchemaConfig::table_schema(
            &cfg.schemas.epi,
            &["municipality", "week_start", "cases_per_1000", "tests_per_1000", "positivity_pct"],
        ),
        &range,
        &["cases_per_1000", "tests_per_1000", "positivity_pct"],
        &BTreeMap::new(),
    )?;
    let quarantine = ingest::load_status(
        &path(&cfg.inputs.quarantine, "quarantine")?,
        &SchemaConfig::table_schema(&cfg.schemas.quarantine, &["municipality", "week_start", "quarantine"]),
        &range,
        &["quarantine"],
        &BTreeMap::new(),
    )?;

    Ok(RawInputs {
        records,
        population,
        school,
        epi,
        quarantine,
    })
}

fn build_panel_from_raw(ctx: &Ctx, raw: &RawInputs, subgroup: &Subgroup) -> Result<Panel> {
    let cfg = &ctx.config;
    let range = cfg.study.range()?;
    let smoothed = ingest::smooth_first_day_excess(raw.records.clone(), &cfg.study.smoothing_categories);
    let inputs = ingest::PanelInputs {
        records: &smoothed,
        population: &raw.population,
        school: &raw.school,
        epi: &raw.epi,
        quarantine: &raw.quarantine,
        range,
        categories: cfg.study.categories.clone(),
        subclass_of: cfg.study.subclass_of.clone(),
    };
    let panel = treatments::subgroup_panel(&inputs, subgroup)?;
    let schedule = TreatmentSchedule::from_status(
        &raw.school,
        &panel.municipalities(),
        cfg.study.closure_week()?,
    )?;
    treatments::encode_treatments(&panel, &schedule)
}

/// Build (or reuse) the canonical panel file and return the panel read back
/// from it, so every estimation consumes identical bytes.
pub fn obtain_panel(ctx: &mut Ctx, rebuild: bool) -> Result<Panel> {
    let path = ctx.out_dir.join(PANEL_FILE);
    if !path.exists() || rebuild {
        run_ingest(ctx)?;
    }
    Panel::read_canonical(&path)
}

/// ingest: load raw tables (or generate the synthetic panel), apply the
/// smoothing correction, aggregate, encode treatments, and write the
/// canonical panel file plus the rejects report.
pub fn run_ingest(ctx: &mut Ctx) -> Result<()> {
    ctx.timed("ingest", |ctx| {
        let panel = match ctx.config.inputs.mode {
            InputMode::Raw => {
                let raw = load_raw(ctx)?;
                let panel = build_panel_from_raw(ctx, &raw, &Subgroup::All)?;
                let rows: Vec<Vec<Cell>> = raw
                    .records
                    .rejected
                    .iter()
                    .map(|r| vec![Cell::from(r.line), Cell::from(r.reason.clone())])
                    .collect();
                ctx.table("ingest_rejects.csv", &["line", "reason"], rows)?;
                panel
            }
            InputMode::Synth => {
                let spec = ctx
                    .config
                    .inputs
                    .synth
                    .clone()
                    .ok_or_else(|| Error::config("synth mode requires [inputs.synth]"))?;
                let (panel, truth) = synth::generate(&spec)?;
                let truth_path = ctx.out_dir.join("synth_truth.json");
                std::fs::write(
                    &truth_path,
                    serde_json::to_string_pretty(&truth).expect("serializable truth"),
                )?;
                eprintln!("wrote synth_truth.json");
                panel
            }
        };
        panel.validate()?;
        panel.write_canonical(&ctx.out_dir.join(PANEL_FILE))?;
        ctx.artifacts.push(ArtifactRecord {
            name: PANEL_FILE.to_string(),
            rows: panel.n_rows(),
        });
        eprintln!("wrote {PANEL_FILE} ({} cells)", panel.n_rows());
        Ok(())
    })
}

const RESULTS_HEADER: [&str; 18] = [
    "design",
    "outcome",
    "sample",
    "mode",
    "control_set",
    "term",
    "estimate",
    "se",
    "t",
    "p",
    "ci_low",
    "ci_high",
    "baseline_mean",
    "n_obs",
    "n_clusters",
    "k_effective",
    "demean_iterations",
    "beta_gamma_p",
];

fn fit_rows(design: &str, outcome: &str, fit: &DidFit) -> Vec<Vec<Cell>> {
    let f = &fit.fit;
    f.terms
        .iter()
        .enumerate()
        .map(|(i, term)| {
            let (lo, hi) = f.confidence_interval(i, 0.95);
            vec![
                Cell::from(design),
                Cell::from(outcome),
                Cell::from(fit.options.sample_rule.label()),
                Cell::from(fit.options.reopening_mode.label()),
                Cell::from(fit.options.control_set.label()),
                Cell::from(term.clone()),
                Cell::from(f.coefficients[i]),
                Cell::from(f.se(i)),
                Cell::from(f.t_stat(i)),
                Cell::from(f.p_value(i)),
                Cell::from(lo),
                Cell::from(hi),
                Cell::from(f.baseline_mean),
                Cell::from(f.n_obs),
                Cell::from(f.n_clusters),
                Cell::from(f.k_effective),
                Cell::from(f.demean_iterations),
                Cell::from(fit.closure_eq_reopen.1),
            ]
        })
        .collect()
}

/// Panel restricted to the estimation window.
fn estimation_panel(ctx: &Ctx, panel: &Panel) -> Result<Panel> {
    let start = ctx.config.study.estimation_start_week()?;
    if start == 0 {
        return Ok(panel.clone());
    }
    let weeks = panel.week_indices().to_vec();
    Ok(panel.filter_rows(|i| weeks[i] >= start))
}

/// estimate: the main design grid, attendance interactions, subclass runs,
/// heterogeneity sweeps, and the fit metadata record.
pub fn run_estimate(ctx: &mut Ctx) -> Result<()> {
    let panel = obtain_panel(ctx, false)?;
    ctx.timed("estimate", |ctx| {
        let est_panel = estimation_panel(ctx, &panel)?;
        let cfg_estimate = ctx.config.estimate.clone();
        let categories = ctx.config.study.categories.clone();

        let mut rows: Vec<Vec<Cell>> = Vec::new();
        let mut summaries: Vec<serde_json::Value> = Vec::new();
        for &rule in &cfg_estimate.sample_rules {
            let grid = did::run_table1(
                &est_panel,
                &categories,
                &cfg_estimate.control_sets,
                &cfg_estimate.reopening_modes,
                rule,
            )?;
            for fit in &grid {
                let outcome = fit
                    .options
                    .outcome_category
                    .strip_prefix("rate_")
                    .unwrap_or(&fit.options.outcome_category)
                    .to_string();
                rows.extend(fit_rows("table1", &outcome, fit));
                summaries.push(serde_json::json!({
                    "design": "table1",
                    "outcome": outcome,
                    "sample": fit.options.sample_rule.label(),
                    "mode": fit.options.reopening_mode.label(),
                    "control_set": fit.options.control_set.label(),
                    "beta_gamma_t": fit.closure_eq_reopen.0,
                    "beta_gamma_p": fit.closure_eq_reopen.1,
                    "fit": report::fit_summary(&fit.fit, 1e-8),
                }));
            }
        }

        // attendance interactions
        let attendance_available = est_panel
            .column(col::ATTENDANCE)
            .map(|a| a.iter().any(|v| !v.is_nan()))
            .unwrap_or(false);
        if cfg_estimate.run_attendance && attendance_available {
            let mut me_rows: Vec<Vec<Cell>> = Vec::new();
            for cat in &categories {
                for &mode in &cfg_estimate.reopening_modes {
                    for &control in &cfg_estimate.control_sets {
                        let mut options = DesignOptions::new(col::rate(cat));
                        options.reopening_mode = mode;
                        options.control_set = control;
                        let out = did::run_attendance(
                            &est_panel,
                            &options,
                            &cfg_estimate.attendance_quantiles,
                        )?;
                        rows.extend(fit_rows("attendance", cat, &out.did));
                        for me in &out.marginal_effects {
                            me_rows.push(vec![
                                Cell::from(cat.clone()),
                                Cell::from(mode.label()),
                                Cell::from(control.label()),
                                Cell::from(me.quantile),
                                Cell::from(me.attendance),
                                Cell::from(me.estimate),
                                Cell::from(me.se),
                                Cell::from(me.ci_low),
                                Cell::from(me.ci_high),
                            ]);
                        }
                    }
                }
            }
            ctx.table(
                "attendance_marginal_effects.csv",
                &["outcome", "mode", "control_set", "quantile", "attendance", "estimate", "se", "ci_low", "ci_high"],
                me_rows,
            )?;
        }

        // intra-family-violence subclasses
        if cfg_estimate.run_subclasses {
            if let Some(parent) = ctx.config.study.subclass_of.clone() {
                for &mode in &cfg_estimate.reopening_modes {
                    for &control in &cfg_estimate.control_sets {
                        let mut options = DesignOptions::new(col::rate(&parent));
                        options.reopening_mode = mode;
                        options.control_set = control;
                        let subs = did::run_dv_subclasses(
                            &est_panel,
                            &options,
                            &parent,
                            &ingest::SUBCLASSES,
                        )?;
                        for (name, fit) in &subs {
                            rows.extend(fit_rows("subclass", name, fit));
                        }
                    }
                }
            }
        }

        ctx.table("table1_results.csv", &RESULTS_HEADER, rows)?;
        std::fs::write(
            ctx.out_dir.join("estimate_fits.json"),
            serde_json::to_string_pretty(&summaries).expect("serializable summaries"),
        )?;
        eprintln!("wrote estimate_fits.json");

        run_heterogeneity(ctx, &est_panel)
    })
}

fn run_heterogeneity(ctx: &mut Ctx, est_panel: &Panel) -> Result<()> {
    let cfg = ctx.config.clone();
    let mut groups: Vec<(String, Panel)> = Vec::new();

    if cfg.inputs.mode == InputMode::Raw {
        let raw = load_raw(ctx)?;
        let mut subgroups: Vec<Subgroup> = cfg
            .heterogeneity
            .age_bands
            .iter()
            .map(|&(min, max)| Subgroup::AgeBand { min, max })
            .collect();
        if cfg.heterogeneity.by_sex {
            subgroups.push(Subgroup::Sex {
                sex: ingest::Sex::Female,
            });
            subgroups.push(Subgroup::Sex {
                sex: ingest::Sex::Male,
            });
        }
        for sg in subgroups {
            let panel = build_panel_from_raw(ctx, &raw, &sg)?;
            let panel = estimation_panel(ctx, &panel)?;
            groups.push((sg.label(), panel));
        }
    }
    if cfg.heterogeneity.by_lockdown {
        let strata = treatments::lockdown_strata(est_panel, cfg.study.lockdown_early_cutoff)?;
        for stratum in [LockdownStratum::Early, LockdownStratum::Late, LockdownStratum::Never] {
            match treatments::stratum_panel(est_panel, &strata, stratum) {
                Ok(panel) => groups.push((stratum.label().to_string(), panel)),
                Err(_) => eprintln!("note: lockdown stratum {} is empty; skipped", stratum.label()),
            }
        }
    }
    if groups.is_empty() {
        eprintln!("note: no heterogeneity groups available; table skipped");
        return Ok(());
    }

    let mut rows: Vec<Vec<Cell>> = Vec::new();
    for cat in &cfg.study.categories {
        let mut options = DesignOptions::new(col::rate(cat));
        options.control_set = ControlSet::FePlusLockdownEpi;
        let estimates = did::run_heterogeneity(&groups, &options, est_panel.n_rows())?;
        for g in &estimates {
            let f = &g.fit.fit;
            for term in [col::CLOSURE, col::REOPEN_BINARY] {
                let i = f.term_index(term)?;
                let (lo, hi) = f.confidence_interval(i, 0.95);
                rows.push(vec![
                    Cell::from(cat.clone()),
                    Cell::from(g.group.clone()),
                    Cell::from(term),
                    Cell::from(f.coefficients[i]),
                    Cell::from(f.se(i)),
                    Cell::from(lo),
                    Cell::from(hi),
                    Cell::from(g.baseline_rate),
                    Cell::from(g.n_obs),
                    Cell::from(g.sample_share),
                ]);
            }
            let (est, se, lo, hi) = g.reopen_vs_closure;
            rows.push(vec![
                Cell::from(cat.clone()),
                Cell::from(g.group.clone()),
                Cell::from("reopen_vs_closure"),
                Cell::from(est),
                Cell::from(se),
                Cell::from(lo),
                Cell::from(hi),
                Cell::from(g.baseline_rate),
                Cell::from(g.n_obs),
                Cell::from(g.sample_share),
            ]);
        }
    }
    ctx.table(
        "heterogeneity_results.csv",
        &["outcome", "group", "term", "estimate", "se", "ci_low", "ci_high", "baseline_rate", "n_obs", "sample_share"],
        rows,
    )
}

/// eventstudy: closure and reopening dynamic paths per outcome.
pub fn run_eventstudy(ctx: &mut Ctx) -> Result<()> {
    let panel = obtain_panel(ctx, false)?;
    ctx.timed("eventstudy", |ctx| {
        let est_panel = estimation_panel(ctx, &panel)?;
        let cfg = ctx.config.eventstudy.clone();
        let categories = ctx.config.study.categories.clone();
        for cat in &categories {
            let single = eventstudy::select_outcome(&est_panel, cat)?;
            for (event, leads, lags) in [
                (EventKind::Closure, cfg.closure_leads, cfg.closure_lags),
                (EventKind::Reopening, cfg.reopening_leads, cfg.reopening_lags),
            ] {
                let window = EventWindow { event, leads, lags };
                let result = eventstudy::estimate_event_study(
                    &single,
                    &window,
                    cfg.control_set,
                    cfg.population_weights,
                )?;
                if !result.excluded.is_empty() {
                    eprintln!(
                        "note: {} municipalities without the {} event excluded: {:?}",
                        result.excluded.len(),
                        event.label(),
                        result.excluded
                    );
                }
                let rows: Vec<Vec<Cell>> = result
                    .path
                    .iter()
                    .map(|p| {
                        vec![
                            Cell::from(cat.clone()),
                            Cell::from(event.label()),
                            Cell::from(p.event_time),
                            Cell::from(p.estimate),
                            Cell::from(p.se),
                            Cell::from(p.ci_low),
                            Cell::from(p.ci_high),
                            Cell::from(result.n_obs),
                            Cell::from(result.n_clusters),
                        ]
                    })
                    .collect();
                ctx.table(
                    &format!("eventstudy_{}_{cat}.csv", event.label()),
                    &["outcome", "event", "event_time", "estimate", "se", "ci_low", "ci_high", "n_obs", "n_clusters"],
                    rows,
                )?;
            }
        }
        Ok(())
    })
}

/// Post-closure window with reopening as the sole treatment.
fn post_closure_panel(panel: &Panel) -> Result<Panel> {
    let cw = panel
        .closure_week
        .ok_or_else(|| Error::data("panel has no closure week"))?;
    let weeks = panel.week_indices().to_vec();
    Ok(panel.filter_rows(|i| weeks[i] >= cw))
}

/// bacon: pairwise decomposition of the reopening coefficient.
pub fn run_bacon(ctx: &mut Ctx) -> Result<()> {
    let panel = obtain_panel(ctx, false)?;
    ctx.timed("bacon", |ctx| {
        let est_panel = estimation_panel(ctx, &panel)?;
        let sub = post_closure_panel(&est_panel)?;
        let categories = ctx.config.study.categories.clone();
        let mut item_rows: Vec<Vec<Cell>> = Vec::new();
        let mut summary_rows: Vec<Vec<Cell>> = Vec::new();
        for cat in &categories {
            let single = eventstudy::select_outcome(&sub, cat)?;
            let out =
                diagnostics::bacon_decompose(&single, col::REOPEN_BINARY, Some(col::WEIGHT), &[])?;
            for item in &out.items {
                item_rows.push(vec![
                    Cell::from(cat.clone()),
                    Cell::from(item.class.label()),
                    Cell::from(item.treated_adoption),
                    match item.control_adoption {
                        Some(w) => Cell::from(w),
                        None => Cell::from("NA"),
                    },
                    Cell::from(item.weight),
                    Cell::from(item.dd_estimate),
                ]);
            }
            for agg in &out.by_class {
                summary_rows.push(vec![
                    Cell::from(cat.clone()),
                    Cell::from(agg.class.label()),
                    Cell::from(agg.weight),
                    Cell::from(agg.average_dd),
                    Cell::from(out.recomposed_coefficient),
                ]);
            }
        }
        ctx.table(
            "bacon_items.csv",
            &["outcome", "comparison", "treated_adoption_week", "control_adoption_week", "weight", "dd_estimate"],
            item_rows,
        )?;
        ctx.table(
            "bacon_summary.csv",
            &["outcome", "comparison", "weight", "average_dd", "recomposed_coefficient"],
            summary_rows,
        )
    })
}

/// dcdh: treated-cell estimand weights and the negative-weight share.
pub fn run_dcdh(ctx: &mut Ctx) -> Result<()> {
    let panel = obtain_panel(ctx, false)?;
    ctx.timed("dcdh", |ctx| {
        let est_panel = estimation_panel(ctx, &panel)?;
        let sub = post_closure_panel(&est_panel)?;
        let categories = ctx.config.study.categories.clone();
        let mut summary_rows: Vec<Vec<Cell>> = Vec::new();
        let mut cell_rows: Vec<Vec<Cell>> = Vec::new();
        for cat in &categories {
            let single = eventstudy::select_outcome(&sub, cat)?;
            let out = diagnostics::dcdh_weights(
                &single,
                col::REOPEN_BINARY,
                &[FeDim::Municipality, FeDim::Week],
                Some(col::WEIGHT),
            )?;
            let negative = out.cells.iter().filter(|c| c.2 < 0.0).count();
            summary_rows.push(vec![
                Cell::from(cat.clone()),
                Cell::from(out.sum_of_weights),
                Cell::from(out.negative_share),
                Cell::from(out.cells.len()),
                Cell::from(negative),
            ]);
            for (m, w, weight) in &out.cells {
                cell_rows.push(vec![
                    Cell::from(cat.clone()),
                    Cell::from(*m),
                    Cell::from(*w),
                    Cell::from(*weight),
                ]);
            }
        }
        ctx.table(
            "dcdh_summary.csv",
            &["outcome", "sum_of_weights", "negative_share", "n_treated_cells", "n_negative"],
            summary_rows,
        )?;
        ctx.table(
            "dcdh_weights.csv",
            &["outcome", "municipality_id", "week_index", "weight"],
            cell_rows,
        )
    })
}

struct SelectedModel {
    model: CounterfactualModel,
    series_by_scale: Vec<DifferentialSeries>,
}

fn counterfactual_channel(
    ctx: &mut Ctx,
    panel: &Panel,
    outcome_col: &str,
    channel: Channel,
    validation: &[bool],
    grid_rows: &mut Vec<Vec<Cell>>,
) -> Result<SelectedModel> {
    let cfg = ctx.config.counterfactual.clone();
    let windows = ctx.config.window_weeks()?;
    let (model, grid) = counterfactual::select_model(
        panel,
        outcome_col,
        &windows,
        &cfg.degrees,
        channel,
        validation,
        cfg.weighted_regression,
        cfg.weighted_rmspe,
    )?;
    let outcome = outcome_col.strip_prefix("rate_").unwrap_or(outcome_col);
    for row in &grid {
        grid_rows.push(vec![
            Cell::from(outcome),
            Cell::from(channel.label()),
            Cell::from(row.window_label as i64),
            Cell::from(row.window_start_week),
            Cell::from(row.degree as i64),
            Cell::from(row.rmspe),
            Cell::from(if row.selected { "yes" } else { "no" }),
        ]);
    }

    let mut series_by_scale = Vec::new();
    for &s in &cfg.scale_factors {
        series_by_scale.push(counterfactual::project_and_difference(&model, panel, s)?);
    }

    // bootstrap bands on the unscaled series: weekly differentials plus the
    // three period aggregates
    if cfg.bootstrap_intervals {
        let b = ctx.config.bootstrap.b;
        let seed = ctx.config.bootstrap.seed;
        let settings = model.settings;
        let outcome_owned = outcome_col.to_string();
        let weeks: Vec<WeekIndex> = series_by_scale[0].weeks.clone();
        let degrees = cfg.degrees.clone();
        let reselect = cfg.reselect_in_bootstrap;
        let validation_mask = validation.to_vec();
        let stat = move |p: &Panel| -> Result<Vec<f64>> {
            let model = if reselect {
                counterfactual::select_model(
                    p,
                    &outcome_owned,
                    &windows,
                    &degrees,
                    settings.channel,
                    &validation_mask,
                    settings.weighted,
                    false,
                )?
                .0
            } else {
                counterfactual::fit_projection(p, &outcome_owned, &settings)?
            };
            let series = counterfactual::project_and_difference(&model, p, 1.0)?;
            if series.weeks != weeks {
                return Err(Error::numerical("replicate produced a different week grid"));
            }
            let mut v = series.differential;
            v.push(series.closure_aggregate);
            v.push(series.reopening_aggregate);
            v.push(series.total_aggregate);
            Ok(v)
        };
        let bands = bootstrap::bootstrap_series(stat, panel, b, seed)?;
        let n = series_by_scale[0].weeks.len();
        let base = series_by_scale
            .iter_mut()
            .find(|s| s.scale_factor == 1.0);
        if let Some(base) = base {
            base.ci_low = bands.ci_low[..n].to_vec();
            base.ci_high = bands.ci_high[..n].to_vec();
            // aggregate CIs ride in the last three slots
            base.closure_ci = (bands.ci_low[n], bands.ci_high[n]);
            base.reopening_ci = (bands.ci_low[n + 1], bands.ci_high[n + 1]);
            base.total_ci = (bands.ci_low[n + 2], bands.ci_high[n + 2]);
        }
    }

    Ok(SelectedModel {
        model,
        series_by_scale,
    })
}

/// counterfactual: model grid and selection, differential series per scale
/// factor, channel comparison, and aggregates with bootstrap intervals.
pub fn run_counterfactual(ctx: &mut Ctx) -> Result<()> {
    let panel = obtain_panel(ctx, false)?;
    ctx.timed("counterfactual", |ctx| {
        let categories = ctx.config.study.categories.clone();
        let (v_lo, v_hi) = ctx.config.validation_weeks()?;
        let validation = counterfactual::validation_mask(&panel, v_lo, v_hi);

        let mut grid_rows: Vec<Vec<Cell>> = Vec::new();
        let mut series_rows: Vec<Vec<Cell>> = Vec::new();
        let mut aggregate_rows: Vec<Vec<Cell>> = Vec::new();
        let mut share_rows: Vec<Vec<Cell>> = Vec::new();
        let mut model_records: Vec<serde_json::Value> = Vec::new();

        for cat in &categories {
            let outcome_col = col::rate(cat);
            let time_only = counterfactual_channel(
                ctx,
                &panel,
                &outcome_col,
                Channel::TimeOnly,
                &validation,
                &mut grid_rows,
            )?;
            let with_school = counterfactual_channel(
                ctx,
                &panel,
                &outcome_col,
                Channel::WithSchoolOpening,
                &validation,
                &mut grid_rows,
            )?;

            for sel in [&time_only, &with_school] {
                let channel = sel.model.settings.channel;
                for series in &sel.series_by_scale {
                    for (k, &w) in series.weeks.iter().enumerate() {
                        series_rows.push(vec![
                            Cell::from(cat.clone()),
                            Cell::from(channel.label()),
                            Cell::Fp(series.scale_factor, 2),
                            Cell::from(w),
                            Cell::from(panel.week_start(w).to_string()),
                            Cell::from(series.actual_total[k]),
                            Cell::from(series.projected_total[k]),
                            Cell::from(series.differential[k]),
                            Cell::from(series.ci_low[k]),
                            Cell::from(series.ci_high[k]),
                        ]);
                    }
                    for (period, value, ci) in [
                        ("closure", series.closure_aggregate, series.closure_ci),
                        ("reopening", series.reopening_aggregate, series.reopening_ci),
                        ("total", series.total_aggregate, series.total_ci),
                    ] {
                        aggregate_rows.push(vec![
                            Cell::from(cat.clone()),
                            Cell::from(channel.label()),
                            Cell::Fp(series.scale_factor, 2),
                            Cell::from(period),
                            Cell::from(value),
                            Cell::from(ci.0),
                            Cell::from(ci.1),
                        ]);
                    }
                }
                model_records.push(serde_json::json!({
                    "outcome": cat,
                    "channel": channel.label(),
                    "window": sel.model.settings.window_label,
                    "degree": sel.model.settings.degree,
                    "rmspe": sel.model.rmspe,
                    "trend_coefficients": sel.model.trend_coefficients,
                    "school_opening_coefficient": sel.model.school_opening_coefficient,
                }));
            }

            let share = counterfactual::school_channel_share(
                &time_only.series_by_scale[0],
                &with_school.series_by_scale[0],
            )?;
            for (period, value) in [
                ("closure", share.closure),
                ("reopening", share.reopening),
                ("total", share.total),
            ] {
                share_rows.push(vec![
                    Cell::from(cat.clone()),
                    Cell::from(period),
                    Cell::from(value),
                ]);
            }
        }

        ctx.table(
            "counterfactual_model_grid.csv",
            &["outcome", "channel", "window", "window_start_week", "degree", "rmspe", "selected"],
            grid_rows,
        )?;
        ctx.table(
            "counterfactual_series.csv",
            &["outcome", "channel", "scale", "week_index", "week_start", "actual_cases", "projected_cases", "differential", "ci_low", "ci_high"],
            series_rows,
        )?;
        ctx.table(
            "counterfactual_aggregates.csv",
            &["outcome", "channel", "scale", "period", "missing_cases", "ci_low", "ci_high"],
            aggregate_rows,
        )?;
        ctx.table(
            "school_channel_share.csv",
            &["outcome", "period", "share"],
            share_rows,
        )?;
        std::fs::write(
            ctx.out_dir.join("counterfactual_models.json"),
            serde_json::to_string_pretty(&model_records).expect("serializable models"),
        )?;
        eprintln!("wrote counterfactual_models.json");
        Ok(())
    })
}

/// bootstrap: percentile intervals for the headline closure and reopening
/// coefficients, with optional replicate dumps.
pub fn run_bootstrap(ctx: &mut Ctx) -> Result<()> {
    let panel = obtain_panel(ctx, false)?;
    ctx.timed("bootstrap", |ctx| {
        let est_panel = estimation_panel(ctx, &panel)?;
        let categories = ctx.config.study.categories.clone();
        let b = ctx.config.bootstrap.b;
        let seed = ctx.config.bootstrap.seed;
        let mut rows: Vec<Vec<Cell>> = Vec::new();
        let mut replicate_rows: Vec<Vec<Cell>> = Vec::new();
        for cat in &categories {
            for (term, name) in [(col::CLOSURE, "closure"), (col::REOPEN_BINARY, "reopening")] {
                let outcome_col = col::rate(cat);
                let mut options = DesignOptions::new(outcome_col.clone());
                options.control_set = ControlSet::FeOnly;
                options.reopening_mode = ReopeningMode::Binary;
                let point = did::run_design(&est_panel, &options)?.fit.coefficient(term)?;
                let stat = {
                    let options = options.clone();
                    let term = term.to_string();
                    move |p: &Panel| did::run_design(p, &options)?.fit.coefficient(&term)
                };
                let out = bootstrap::bootstrap_ci(stat, &est_panel, b, seed)?;
                rows.push(vec![
                    Cell::from(name),
                    Cell::from(cat.clone()),
                    Cell::from(point),
                    Cell::from(out.ci.0),
                    Cell::from(out.ci.1),
                    Cell::from(out.b_count),
                    Cell::from(out.seed as i64),
                ]);
                if ctx.config.bootstrap.dump_replicates {
                    for (i, v) in out.replicates.iter().enumerate() {
                        replicate_rows.push(vec![
                            Cell::from(name),
                            Cell::from(cat.clone()),
                            Cell::from(i),
                            Cell::from(*v),
                        ]);
                    }
                }
            }
        }
        ctx.table(
            "bootstrap_results.csv",
            &["statistic", "outcome", "estimate", "ci_low", "ci_high", "b", "seed"],
            rows,
        )?;
        if ctx.config.bootstrap.dump_replicates {
            ctx.table(
                "bootstrap_replicates.csv",
                &["statistic", "outcome", "replicate", "value"],
                replicate_rows,
            )?;
        }
        Ok(())
    })
}

/// synth: write the canonical panel (and truth record) for the configured
/// data-generating process.
pub fn run_synth(ctx: &mut Ctx) -> Result<()> {
    if ctx.config.inputs.mode != InputMode::Synth {
        return Err(Error::config("synth subcommand requires inputs.mode = \"synth\""));
    }
    run_ingest(ctx)
}

/// all: the full pipeline in order.
pub fn run_all(ctx: &mut Ctx) -> Result<()> {
    run_ingest(ctx)?;
    run_estimate(ctx)?;
    run_eventstudy(ctx)?;
    run_bacon(ctx)?;
    run_dcdh(ctx)?;
    run_counterfactual(ctx)?;
    run_bootstrap(ctx)?;
    Ok(())
}
