//! Block bootstrap over municipalities: whole time series are resampled
//! with replacement, any statistic of the pipeline is recomputed per
//! replicate, and confidence intervals come from replicate order statistics.
//!
//! Each replicate derives its own RNG stream from the master seed by a
//! counter split, so results are bit-identical regardless of how replicates
//! are scheduled across threads.

use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{quantile_type7, Panel};

/// RNG stream for one replicate: same master seed, stream = replicate index.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Municipality draw indices for one resample: M draws with replacement.
pub fn draw_indices(rng: &mut impl Rng, n_municipalities: usize) -> Vec<usize> {
    (0..n_municipalities)
        .map(|_| rng.gen_range(0..n_municipalities))
        .collect()
}

/// Assemble a resampled panel from draw indices. Each draw copies the full
/// time series of the drawn municipality under a fresh synthetic id (the
/// draw position), so duplicated draws count as distinct clusters.
pub fn resample_from_draws(panel: &Panel, draws: &[usize]) -> Result<Panel> {
    let blocks = panel.municipality_blocks();
    if blocks.len() < 2 {
        return Err(Error::data("resampling needs at least 2 municipalities"));
    }
    let names: Vec<String> = panel.column_names().map(|s| s.to_string()).collect();
    let mut muni = Vec::new();
    let mut week = Vec::new();
    let mut cols: IndexMap<String, Vec<f64>> =
        names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (k, &d) in draws.iter().enumerate() {
        let (_, rows) = blocks
            .get(d)
            .ok_or_else(|| Error::numerical("draw index out of range"))?;
        for i in rows.clone() {
            muni.push(k as u32 + 1);
            week.push(panel.week_indices()[i]);
        }
        for name in &names {
            let src = panel.column(name)?;
            cols.get_mut(name).unwrap().extend_from_slice(&src[rows.clone()]);
        }
    }
    let mut out = Panel::from_parts(panel.anchor, muni, week, cols, panel.categories.clone())?;
    out.closure_week = panel.closure_week;
    Ok(out)
}

/// One resample using the given RNG stream.
pub fn resample_clusters(panel: &Panel, rng: &mut impl Rng) -> Result<Panel> {
    let m = panel.municipalities().len();
    let draws = draw_indices(rng, m);
    resample_from_draws(panel, &draws)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub b_count: usize,
    pub seed: u64,
    pub replicates: Vec<f64>,
    /// Percentile interval: centiles 2.5 and 97.5 of the replicates.
    pub ci: (f64, f64),
}

fn percentile_ci(replicates: &[f64]) -> (f64, f64) {
    let mut sorted = replicates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (
        quantile_type7(&sorted, 0.025),
        quantile_type7(&sorted, 0.975),
    )
}

/// Percentile bootstrap for a scalar statistic. Replicates run in parallel;
/// a failing replicate aborts the whole run naming its index.
pub fn bootstrap_ci<F>(statistic: F, panel: &Panel, b_count: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&Panel) -> Result<f64> + Sync,
{
    if b_count == 0 {
        return Err(Error::config("bootstrap needs at least one replicate"));
    }
    let replicates: Vec<f64> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(seed, b as u64);
            let resample = resample_clusters(panel, &mut rng)?;
            statistic(&resample)
                .map_err(|e| Error::numerical(format!("bootstrap replicate {b} failed: {e}")))
        })
        .collect::<Result<_>>()?;
    let ci = percentile_ci(&replicates);
    Ok(BootstrapResult {
        b_count,
        seed,
        replicates,
        ci,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSeries {
    pub b_count: usize,
    pub seed: u64,
    /// Elementwise centiles 2.5 and 97.5 across replicates.
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

/// Percentile bootstrap for a vector-valued statistic (for example a weekly
/// differential series); intervals are computed elementwise.
pub fn bootstrap_series<F>(
    statistic: F,
    panel: &Panel,
    b_count: usize,
    seed: u64,
) -> Result<BootstrapSeries>
where
    F: Fn(&Panel) -> Result<Vec<f64>> + Sync,
{
    if b_count == 0 {
        return Err(Error::config("bootstrap needs at least one replicate"));
    }
    let replicates: Vec<Vec<f64>> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(seed, b as u64);
            let resample = resample_clusters(panel, &mut rng)?;
            statistic(&resample)
                .map_err(|e| Error::numerical(format!("bootstrap replicate {b} failed: {e}")))
        })
        .collect::<Result<_>>()?;
    let len = replicates[0].len();
    if replicates.iter().any(|r| r.len() != len) {
        return Err(Error::numerical(
            "bootstrap statistic returned inconsistent lengths across replicates",
        ));
    }
    let mut ci_low = Vec::with_capacity(len);
    let mut ci_high = Vec::with_capacity(len);
    let mut buf = vec![0.0; b_count];
    for j in 0..len {
        for (b, r) in replicates.iter().enumerate() {
            buf[b] = r[j];
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ci_low.push(quantile_type7(&buf, 0.025));
        ci_high.push(quantile_type7(&buf, 0.975));
    }
    Ok(BootstrapSeries {
        b_count,
        seed,
        ci_low,
        ci_high,
    })
}
