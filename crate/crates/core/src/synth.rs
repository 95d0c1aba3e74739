//! Synthetic panels and raw tables with fully known ground truth, used to
//! validate every estimator against planted parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dates::{WeekIndex, WeekRange};
use crate::error::{Error, Result};
use crate::ingest::{CATEGORY_DV, CATEGORY_RAPE, CATEGORY_SEXUAL_ABUSE, SUBCLASSES};
use crate::panel::{col, MunicipalityId, Panel};

/// How municipalities adopt reopening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Adoption {
    /// Everyone reopens in the same week.
    Simultaneous { week: WeekIndex },
    /// Explicit timing cohorts: (reopen week, municipality count), assigned
    /// in municipality order; municipalities left over never reopen.
    Cohorts { cohorts: Vec<(WeekIndex, usize)> },
    /// Reopen weeks drawn uniformly on [earliest, latest]; a fraction never
    /// reopens.
    Staggered {
        earliest: WeekIndex,
        latest: WeekIndex,
        never_fraction: f64,
    },
    /// Closure never lifts.
    NoReopening,
}

/// Data-generating process for one synthetic panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_municipalities: usize,
    pub n_weeks: u32,
    pub closure_week: WeekIndex,
    pub adoption: Adoption,
    /// Planted closure effect on the rate (beta).
    pub effect_closure: f64,
    /// Planted reopening effect (gamma).
    pub effect_reopen: f64,
    /// Planted reopening-by-attendance interaction (delta); active only on
    /// cells with observed attendance.
    pub effect_attendance: f64,
    /// Extra constant post-reopening effect (tau) for event-study designs.
    pub effect_event: f64,
    /// Additional reopen effect per timing cohort (heterogeneous adoption).
    pub cohort_effects: Vec<f64>,
    /// When true, gamma multiplies the continuous reopen share instead of
    /// the binary indicator.
    pub continuous_effect: bool,
    pub baseline_rate: f64,
    pub municipal_fe_scale: f64,
    pub woy_amplitude: f64,
    pub trend_degree: u8,
    pub trend_linear: f64,
    pub trend_quadratic: f64,
    pub noise_scale: f64,
    /// First-order autocorrelation of the noise within each municipality.
    pub ar1: f64,
    pub population_range: (u32, u32),
    /// Generate observed attendance from this week onward.
    pub attendance_from_week: Option<WeekIndex>,
    /// Generate quarantine spells and epidemiological covariates.
    pub with_covariates: bool,
    pub categories: Vec<String>,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n_municipalities: 20,
            n_weeks: 120,
            closure_week: 60,
            adoption: Adoption::Staggered {
                earliest: 70,
                latest: 100,
                never_fraction: 0.0,
            },
            effect_closure: -1.5,
            effect_reopen: -0.8,
            effect_attendance: 0.0,
            effect_event: 0.0,
            cohort_effects: Vec::new(),
            continuous_effect: false,
            baseline_rate: 30.0,
            municipal_fe_scale: 3.0,
            woy_amplitude: 2.0,
            trend_degree: 0,
            trend_linear: 0.0,
            trend_quadratic: 0.0,
            noise_scale: 1.0,
            ar1: 0.4,
            population_range: (20_000, 120_000),
            attendance_from_week: None,
            with_covariates: false,
            categories: vec!["outcome".to_string()],
            seed: 1,
        }
    }
}

/// Everything that was planted, for oracle comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpTruth {
    pub effect_closure: f64,
    pub effect_reopen: f64,
    pub effect_attendance: f64,
    pub effect_event: f64,
    pub closure_week: WeekIndex,
    pub reopen_week: BTreeMap<MunicipalityId, Option<WeekIndex>>,
    pub cohort_of: BTreeMap<MunicipalityId, usize>,
    pub municipal_fe: BTreeMap<MunicipalityId, f64>,
    pub population: BTreeMap<MunicipalityId, u32>,
    pub seed: u64,
}

const SYNTH_ANCHOR: (i32, u32, u32) = (2018, 12, 31);

/// Generate a balanced synthetic panel with planted effects.
pub fn generate(spec: &DgpSpec) -> Result<(Panel, DgpTruth)> {
    if spec.n_municipalities < 2 {
        return Err(Error::config("DGP needs at least 2 municipalities"));
    }
    if spec.closure_week >= spec.n_weeks {
        return Err(Error::config("closure week outside panel range"));
    }
    if !(0.0..1.0).contains(&spec.ar1.abs()) {
        return Err(Error::config("ar1 must lie in (-1, 1)"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let m_count = spec.n_municipalities;
    let munis: Vec<MunicipalityId> = (1..=m_count as u32).map(|i| 100 + i).collect();
    let anchor = NaiveDate::from_ymd_opt(SYNTH_ANCHOR.0, SYNTH_ANCHOR.1, SYNTH_ANCHOR.2).unwrap();

    // municipality-level draws
    let normal_fe = Normal::new(0.0, spec.municipal_fe_scale.max(1e-12)).unwrap();
    let mut municipal_fe = BTreeMap::new();
    let mut population = BTreeMap::new();
    for &m in &munis {
        municipal_fe.insert(m, if spec.municipal_fe_scale > 0.0 { normal_fe.sample(&mut rng) } else { 0.0 });
        population.insert(m, rng.gen_range(spec.population_range.0..=spec.population_range.1));
    }

    // adoption schedule
    let mut reopen_week: BTreeMap<MunicipalityId, Option<WeekIndex>> = BTreeMap::new();
    let mut cohort_of: BTreeMap<MunicipalityId, usize> = BTreeMap::new();
    match &spec.adoption {
        Adoption::Simultaneous { week } => {
            if *week <= spec.closure_week || *week >= spec.n_weeks {
                return Err(Error::config("simultaneous adoption week outside range"));
            }
            for &m in &munis {
                reopen_week.insert(m, Some(*week));
                cohort_of.insert(m, 0);
            }
        }
        Adoption::Cohorts { cohorts } => {
            let assigned: usize = cohorts.iter().map(|(_, n)| n).sum();
            if assigned > m_count {
                return Err(Error::config("cohorts assign more municipalities than exist"));
            }
            let mut it = munis.iter();
            for (k, (week, n)) in cohorts.iter().enumerate() {
                if *week <= spec.closure_week || *week >= spec.n_weeks {
                    return Err(Error::config("cohort adoption week outside range"));
                }
                for _ in 0..*n {
                    let &m = it.next().unwrap();
                    reopen_week.insert(m, Some(*week));
                    cohort_of.insert(m, k);
                }
            }
            for &m in it {
                reopen_week.insert(m, None);
                cohort_of.insert(m, usize::MAX);
            }
        }
        Adoption::Staggered {
            earliest,
            latest,
            never_fraction,
        } => {
            if *earliest <= spec.closure_week || *latest >= spec.n_weeks || earliest > latest {
                return Err(Error::config("staggered adoption window outside range"));
            }
            for &m in &munis {
                if rng.gen_bool(*never_fraction) {
                    reopen_week.insert(m, None);
                    cohort_of.insert(m, usize::MAX);
                } else {
                    let w = rng.gen_range(*earliest..=*latest);
                    reopen_week.insert(m, Some(w));
                    cohort_of.insert(m, 0);
                }
            }
        }
        Adoption::NoReopening => {
            for &m in &munis {
                reopen_week.insert(m, None);
                cohort_of.insert(m, usize::MAX);
            }
        }
    }

    let n = m_count * spec.n_weeks as usize;
    let mut muni_col = Vec::with_capacity(n);
    let mut week_col = Vec::with_capacity(n);
    let mut pop = Vec::with_capacity(n);
    let mut closure = Vec::with_capacity(n);
    let mut reopen = Vec::with_capacity(n);
    let mut share = Vec::with_capacity(n);
    let mut attendance = Vec::with_capacity(n);
    let mut quarantine = vec![0.0; n];
    let mut covid = vec![0.0; n];
    let mut tests = vec![0.0; n];
    let mut positivity = vec![0.0; n];
    let mut rates: Vec<Vec<f64>> = vec![Vec::with_capacity(n); spec.categories.len()];

    let noise_dist = Normal::new(0.0, 1.0).unwrap();
    let range = WeekRange::new(anchor, anchor + chrono::Duration::weeks(spec.n_weeks as i64 - 1)).unwrap();

    for &m in &munis {
        let rw = reopen_week[&m];
        let fe = municipal_fe[&m];
        let cohort = cohort_of[&m];
        let cohort_extra = if cohort != usize::MAX {
            spec.cohort_effects.get(cohort).copied().unwrap_or(0.0)
        } else {
            0.0
        };

        // covariate processes
        let (q_start, q_len) = if spec.with_covariates && rng.gen_bool(0.75) {
            (
                spec.closure_week + rng.gen_range(1..20).min(spec.n_weeks - spec.closure_week - 1),
                rng.gen_range(4..16),
            )
        } else {
            (u32::MAX, 0)
        };

        // AR(1) noise per category stream
        let mut state: Vec<f64> = (0..spec.categories.len())
            .map(|_| {
                if spec.noise_scale > 0.0 {
                    noise_dist.sample(&mut rng) * spec.noise_scale
                } else {
                    0.0
                }
            })
            .collect();

        for w in 0..spec.n_weeks {
            let i = muni_col.len();
            muni_col.push(m);
            week_col.push(w);
            pop.push(population[&m] as f64);

            let closed = w >= spec.closure_week && rw.map_or(true, |r| w < r);
            let reopened = rw.map_or(false, |r| w >= r);
            closure.push(if closed { 1.0 } else { 0.0 });
            reopen.push(if reopened { 1.0 } else { 0.0 });
            let s = if reopened {
                let since = w - rw.unwrap();
                (0.3 + 0.7 * since as f64 / 30.0).min(1.0)
            } else {
                0.0
            };
            share.push(s);

            let att = match spec.attendance_from_week {
                Some(start) if w >= start => {
                    if reopened {
                        rng.gen_range(0.1..0.9)
                    } else if closed {
                        0.0
                    } else {
                        rng.gen_range(0.75..0.95) // schools normally open
                    }
                }
                _ => f64::NAN,
            };
            attendance.push(att);

            if spec.with_covariates {
                if w >= q_start && w < q_start + q_len {
                    quarantine[i] = 1.0;
                }
                if w >= spec.closure_week.saturating_sub(2) {
                    let c = (noise_dist.sample(&mut rng) * 0.8 + 1.5).max(0.0);
                    let t = c * 5.0 + (noise_dist.sample(&mut rng) * 2.0 + 4.0).max(0.0);
                    covid[i] = c;
                    tests[i] = t;
                    positivity[i] = (100.0 * c / (t + 1.0)).clamp(0.0, 100.0);
                }
            }

            let woy = crate::dates::week_of_year(range.week_start(w));
            let season = spec.woy_amplitude * (2.0 * std::f64::consts::PI * woy as f64 / 52.0).sin();
            let t = w as f64;
            let trend = match spec.trend_degree {
                0 => 0.0,
                1 => spec.trend_linear * t,
                _ => spec.trend_linear * t + spec.trend_quadratic * t * t,
            };
            let reopen_term = if spec.continuous_effect { s } else if reopened { 1.0 } else { 0.0 };
            let mut signal = spec.baseline_rate + fe + season + trend;
            if closed {
                signal += spec.effect_closure;
            }
            signal += (spec.effect_reopen + spec.effect_event + cohort_extra) * reopen_term;
            if !att.is_nan() && reopened {
                signal += spec.effect_attendance * att;
            }

            for (k, rate_col) in rates.iter_mut().enumerate() {
                let e = if spec.noise_scale > 0.0 {
                    let innov = noise_dist.sample(&mut rng)
                        * spec.noise_scale
                        * (1.0 - spec.ar1 * spec.ar1).sqrt();
                    state[k] = spec.ar1 * state[k] + innov;
                    state[k]
                } else {
                    0.0
                };
                rate_col.push(signal + e);
            }
        }
    }

    let mut cols: IndexMap<String, Vec<f64>> = IndexMap::new();
    cols.insert(col::POPULATION.into(), pop.clone());
    cols.insert(col::WEIGHT.into(), pop.clone());
    cols.insert(col::CLOSURE.into(), closure);
    cols.insert(col::REOPEN_BINARY.into(), reopen);
    cols.insert(col::REOPEN_SHARE.into(), share);
    cols.insert(col::ATTENDANCE.into(), attendance);
    cols.insert(col::QUARANTINE.into(), quarantine);
    cols.insert(col::COVID_CASES.into(), covid);
    cols.insert(col::TESTS.into(), tests);
    cols.insert(col::POSITIVITY.into(), positivity);
    for (k, cat) in spec.categories.iter().enumerate() {
        let counts: Vec<f64> = rates[k].iter().zip(&pop).map(|(r, p)| r * p / 100_000.0).collect();
        cols.insert(col::count(cat), counts);
        cols.insert(col::rate(cat), rates[k].clone());
    }

    let mut panel = Panel::from_parts(anchor, muni_col, week_col, cols, spec.categories.clone())?;
    panel.closure_week = Some(spec.closure_week);
    panel.validate()?;

    let truth = DgpTruth {
        effect_closure: spec.effect_closure,
        effect_reopen: spec.effect_reopen,
        effect_attendance: spec.effect_attendance,
        effect_event: spec.effect_event,
        closure_week: spec.closure_week,
        reopen_week,
        cohort_of,
        municipal_fe,
        population,
        seed: spec.seed,
    };
    Ok((panel, truth))
}

/// Parameters for record-level fixture generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSpec {
    pub n_municipalities: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub closure_date: NaiveDate,
    pub first_reopen_date: NaiveDate,
    /// Weeks over which staggered reopenings spread out.
    pub reopen_spread_weeks: u32,
    pub never_reopen: usize,
    /// Mean weekly reports per 100,000 at baseline, per category.
    pub base_rates: BTreeMap<String, f64>,
    /// Share of sexual-abuse and rape records recorded on day 1 of the month.
    pub first_day_inflation: f64,
    pub attendance_start: NaiveDate,
    pub seed: u64,
}

impl Default for RawSpec {
    fn default() -> Self {
        let mut base_rates = BTreeMap::new();
        base_rates.insert(CATEGORY_DV.to_string(), 4.3);
        base_rates.insert(CATEGORY_SEXUAL_ABUSE.to_string(), 2.7);
        base_rates.insert(CATEGORY_RAPE.to_string(), 0.6);
        RawSpec {
            n_municipalities: 12,
            start: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2021, 12, 31).unwrap(),
            closure_date: NaiveDate::from_ymd_opt(2020, 3, 16).unwrap(),
            first_reopen_date: NaiveDate::from_ymd_opt(2020, 8, 17).unwrap(),
            reopen_spread_weeks: 40,
            never_reopen: 1,
            base_rates,
            first_day_inflation: 0.3,
            // attendance coverage must reach back before the closure so the
            // attendance-sample designs keep their baseline period
            attendance_start: NaiveDate::from_ymd_opt(2019, 7, 1).unwrap(),
            seed: 20,
        }
    }
}

/// Write record-level victim data plus population, school-status,
/// epidemiological, and quarantine tables so the whole pipeline (including
/// ingest and smoothing) can run on synthetic inputs.
pub fn write_raw_fixtures(spec: &RawSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let range = WeekRange::new(spec.start, spec.end)?;
    let closure_week = range
        .week_index(spec.closure_date)
        .ok_or_else(|| Error::config("closure date outside range"))?;
    let first_reopen_week = range
        .week_index(spec.first_reopen_date)
        .ok_or_else(|| Error::config("reopen date outside range"))?;
    let attendance_week = range.week_index(spec.attendance_start);

    let munis: Vec<u32> = (1..=spec.n_municipalities as u32).map(|i| 100 + i).collect();
    let mut pop_by_age: BTreeMap<(u32, u8, crate::ingest::Sex), u32> = BTreeMap::new();
    for &m in &munis {
        let scale = rng.gen_range(300..2500);
        for age in 0..18u8 {
            for sex in [crate::ingest::Sex::Female, crate::ingest::Sex::Male] {
                pop_by_age.insert((m, age, sex), scale + rng.gen_range(0..200));
            }
        }
    }
    let pop_u18 = |m: u32| -> u64 {
        pop_by_age
            .iter()
            .filter(|((mm, _, _), _)| *mm == m)
            .map(|(_, &c)| c as u64)
            .sum()
    };

    // reopening schedule: staggered after the national first-reopen date
    let mut reopen_of: BTreeMap<u32, Option<WeekIndex>> = BTreeMap::new();
    for (k, &m) in munis.iter().enumerate() {
        if k < spec.never_reopen {
            reopen_of.insert(m, None);
        } else {
            let w = first_reopen_week + rng.gen_range(0..=spec.reopen_spread_weeks);
            reopen_of.insert(m, Some(w.min(range.n_weeks() - 1)));
        }
    }

    // --- victims.csv ---
    let mut victims = String::from("date,municipality,category,subclass,age,sex\n");
    let smooth_cats = [CATEGORY_SEXUAL_ABUSE, CATEGORY_RAPE];
    for &m in &munis {
        let p = pop_u18(m) as f64;
        let fe = rng.gen_range(0.7..1.4);
        for w in range.weeks() {
            let monday = range.week_start(w);
            let woy = crate::dates::week_of_year(monday);
            let season = 1.0 + 0.25 * (2.0 * std::f64::consts::PI * woy as f64 / 52.0).sin();
            let closed = w >= closure_week && reopen_of[&m].map_or(true, |r| w < r);
            let reopened = reopen_of[&m].map_or(false, |r| w >= r);
            let policy = if closed {
                0.55
            } else if reopened {
                0.8
            } else {
                1.0
            };
            for (cat, base) in &spec.base_rates {
                // sexual-abuse reporting drifts upward over the long window
                let drift = if cat == CATEGORY_SEXUAL_ABUSE {
                    1.0 + 0.3 * w as f64 / range.n_weeks() as f64
                } else {
                    1.0
                };
                let lambda = (base * fe * season * policy * drift * p / 100_000.0).max(1e-9);
                let draws = Poisson::new(lambda).unwrap().sample(&mut rng) as usize;
                for _ in 0..draws {
                    let mut date = monday + chrono::Duration::days(rng.gen_range(0..7));
                    if date > spec.end {
                        date = spec.end;
                    }
                    // recording artifact: some sexual-violence records snap
                    // to the first of the month
                    if smooth_cats.contains(&cat.as_str())
                        && rng.gen_bool(spec.first_day_inflation)
                    {
                        let first = NaiveDate::from_ymd_opt(date.year(), date.month(), 1).unwrap();
                        if first >= spec.start {
                            date = first;
                        }
                    }
                    let age = rng.gen_range(0..18u8);
                    let sex = if rng.gen_bool(0.62) { "f" } else { "m" };
                    let subclass = if cat == CATEGORY_DV {
                        let u: f64 = rng.gen();
                        if u < 0.35 {
                            SUBCLASSES[0]
                        } else if u < 0.93 {
                            SUBCLASSES[1]
                        } else {
                            SUBCLASSES[2]
                        }
                    } else {
                        ""
                    };
                    victims.push_str(&format!("{date},{m},{cat},{subclass},{age},{sex}\n"));
                }
            }
        }
    }
    std::fs::write(dir.join("victims.csv"), victims)?;

    // --- population.csv ---
    let mut popcsv = String::from("municipality,year,age,sex,count\n");
    let years: Vec<i32> = {
        let mut ys: Vec<i32> = range.weeks().map(|w| range.year_of(w)).collect();
        ys.dedup();
        ys
    };
    for &m in &munis {
        for &year in &years {
            for age in 0..18u8 {
                for sex in [crate::ingest::Sex::Female, crate::ingest::Sex::Male] {
                    let c = pop_by_age[&(m, age, sex)];
                    popcsv.push_str(&format!("{m},{year},{age},{},{c}\n", sex.as_str()));
                }
            }
        }
    }
    std::fs::write(dir.join("population.csv"), popcsv)?;

    // --- school_status.csv (openness + attendance) ---
    let mut school = String::from("municipality,week_start,openness,attendance\n");
    for &m in &munis {
        for w in range.weeks() {
            let monday = range.week_start(w);
            let openness = if w < closure_week {
                1.0
            } else {
                match reopen_of[&m] {
                    Some(r) if w >= r => (0.25 + 0.75 * (w - r) as f64 / 40.0).min(1.0),
                    _ => 0.0,
                }
            };
            let attendance = match attendance_week {
                Some(aw) if w >= aw => {
                    let v = if openness > 0.0 {
                        (0.2 + 0.6 * rng.gen_range(0.5..1.0) * openness).min(0.95)
                    } else {
                        0.0
                    };
                    format!("{v:.4}")
                }
                _ => String::new(),
            };
            school.push_str(&format!("{m},{monday},{openness:.4},{attendance}\n"));
        }
    }
    std::fs::write(dir.join("school_status.csv"), school)?;

    // --- epi.csv and quarantine.csv ---
    let mut epi = String::from("municipality,week_start,cases_per_1000,tests_per_1000,positivity_pct\n");
    let mut quar = String::from("municipality,week_start,quarantine\n");
    for &m in &munis {
        let q_start = closure_week + rng.gen_range(1..16);
        let q_len = rng.gen_range(4..14);
        let never_locked = rng.gen_bool(0.2);
        for w in range.weeks() {
            let monday = range.week_start(w);
            if w >= closure_week.saturating_sub(1) {
                let c = (rng.gen_range(-0.4..2.6_f64)).max(0.0);
                let t = c * 5.0 + rng.gen_range(2.0..8.0);
                let pos = (100.0 * c / (t + 1.0)).clamp(0.0, 100.0);
                epi.push_str(&format!("{m},{monday},{c:.4},{t:.4},{pos:.4}\n"));
            }
            let locked = !never_locked && w >= q_start && w < q_start + q_len;
            if locked {
                quar.push_str(&format!("{m},{monday},1\n"));
            }
        }
    }
    std::fs::write(dir.join("epi.csv"), epi)?;
    std::fs::write(dir.join("quarantine.csv"), quar)?;

    let manifest = serde_json::json!({
        "spec": spec,
        "files": ["victims.csv", "population.csv", "school_status.csv", "epi.csv", "quarantine.csv"],
    });
    let mut f = std::fs::File::create(dir.join("fixtures.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}
