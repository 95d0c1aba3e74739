//! Weighted two-way fixed-effects regression core.
//!
//! Fixed effects are absorbed by alternating weighted group-mean subtraction
//! (the within transformation), the slope coefficients come from weighted
//! least squares on the demeaned data, and inference uses the CR1
//! cluster-robust sandwich with t(G-1) reference distributions. By
//! Frisch-Waugh-Lovell the absorbed estimates equal explicit dummy-variable
//! OLS, which the test suite checks against a dense oracle.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::panel::{dense_codes, Panel};

/// Relative threshold under which singular values are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Categorical dimensions that can be absorbed or clustered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeDim {
    Municipality,
    WeekOfYear,
    Week,
}

impl FeDim {
    pub fn name(&self) -> &'static str {
        match self {
            FeDim::Municipality => "municipality",
            FeDim::WeekOfYear => "week_of_year",
            FeDim::Week => "week",
        }
    }

    /// Dense level codes for this dimension over the panel rows.
    pub fn codes(&self, panel: &Panel) -> (Vec<u32>, usize) {
        match self {
            FeDim::Municipality => dense_codes(panel.municipality_ids()),
            FeDim::WeekOfYear => dense_codes(panel.week_of_year_codes()),
            FeDim::Week => dense_codes(panel.week_indices()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub fe_dims: Vec<FeDim>,
    /// Analytic-weight column; unit weights when absent.
    pub weights: Option<String>,
    pub cluster_dim: FeDim,
    pub demean_tolerance: f64,
    pub demean_max_iter: usize,
}

impl RegressionSpec {
    pub fn new(outcome: impl Into<String>, regressors: Vec<String>) -> Self {
        RegressionSpec {
            outcome: outcome.into(),
            regressors,
            fe_dims: vec![FeDim::Municipality, FeDim::WeekOfYear],
            weights: Some(crate::panel::col::WEIGHT.to_string()),
            cluster_dim: FeDim::Municipality,
            demean_tolerance: 1e-8,
            demean_max_iter: 10_000,
        }
    }

    pub fn with_fe(mut self, fe_dims: Vec<FeDim>) -> Self {
        self.fe_dims = fe_dims;
        self
    }

    pub fn with_weights(mut self, weights: Option<String>) -> Self {
        self.weights = weights;
        self
    }
}

/// One fitted regression: point estimates, cluster-robust covariance, and
/// the sample metadata needed for reporting.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// Term names, aligned with `coefficients` and `vcov`.
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
    /// Regressors plus absorbed fixed-effect degrees of freedom.
    pub k_effective: usize,
    pub n_clusters: usize,
    /// Weighted mean outcome over pre-closure cells (NaN when the panel has
    /// no baseline period).
    pub baseline_mean: f64,
    pub demean_iterations: usize,
}

impl RegressionFit {
    pub fn term_index(&self, term: &str) -> Result<usize> {
        self.terms
            .iter()
            .position(|t| t == term)
            .ok_or_else(|| Error::numerical(format!("fit has no term {term:?}")))
    }

    pub fn coefficient(&self, term: &str) -> Result<f64> {
        Ok(self.coefficients[self.term_index(term)?])
    }

    pub fn se(&self, i: usize) -> f64 {
        self.vcov[(i, i)].max(0.0).sqrt()
    }

    pub fn dof(&self) -> f64 {
        (self.n_clusters - 1) as f64
    }

    pub fn t_stat(&self, i: usize) -> f64 {
        let se = self.se(i);
        if se > 0.0 {
            self.coefficients[i] / se
        } else {
            f64::NAN
        }
    }

    pub fn p_value(&self, i: usize) -> f64 {
        two_sided_t_pvalue(self.t_stat(i), self.dof())
    }

    /// Symmetric confidence interval at `level` (e.g. 0.95).
    pub fn confidence_interval(&self, i: usize, level: f64) -> (f64, f64) {
        let half = t_critical(self.dof(), level) * self.se(i);
        (self.coefficients[i] - half, self.coefficients[i] + half)
    }

    /// Point estimate, delta-method SE, and t(G-1) CI for a linear
    /// combination `c'b` of the coefficients.
    pub fn linear_combination(&self, contrast: &[f64], level: f64) -> Result<(f64, f64, f64, f64)> {
        if contrast.len() != self.coefficients.len() {
            return Err(Error::numerical("contrast length does not match terms"));
        }
        let c = DVector::from_column_slice(contrast);
        let est: f64 = self
            .coefficients
            .iter()
            .zip(contrast)
            .map(|(b, c)| b * c)
            .sum();
        let var = (c.transpose() * &self.vcov * &c)[(0, 0)].max(0.0);
        let se = var.sqrt();
        let half = t_critical(self.dof(), level) * se;
        Ok((est, se, est - half, est + half))
    }
}

/// Two-sided test of a linear restriction `c'b = 0`.
///
/// Returns the t statistic and the p-value under t(G-1). A contrast that is
/// identically zero (a coefficient compared with itself) yields statistic 0
/// and p-value 1; a zero-variance contrast with a nonzero estimate is an
/// error.
pub fn wald_linear(fit: &RegressionFit, contrast: &[f64]) -> Result<(f64, f64)> {
    if contrast.len() != fit.coefficients.len() {
        return Err(Error::numerical(format!(
            "contrast has {} entries for {} coefficients",
            contrast.len(),
            fit.coefficients.len()
        )));
    }
    let c = DVector::from_column_slice(contrast);
    let num: f64 = fit
        .coefficients
        .iter()
        .zip(contrast)
        .map(|(b, c)| b * c)
        .sum();
    let var = (c.transpose() * &fit.vcov * &c)[(0, 0)];
    if var <= 0.0 {
        if num == 0.0 {
            return Ok((0.0, 1.0));
        }
        return Err(Error::numerical("zero-variance contrast with nonzero estimate"));
    }
    let t = num / var.sqrt();
    Ok((t, two_sided_t_pvalue(t, fit.dof())))
}

pub fn two_sided_t_pvalue(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, dof.max(1.0)).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

pub fn t_critical(dof: f64, level: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, dof.max(1.0)).expect("valid t distribution");
    dist.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Group codes for one absorbed dimension.
#[derive(Debug, Clone)]
pub struct GroupCodes {
    pub codes: Vec<u32>,
    pub n_levels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DemeanReport {
    pub iterations: usize,
    pub last_delta: f64,
}

/// Alternating weighted group-mean subtraction across the fixed-effect
/// dimensions, applied jointly to every column.
///
/// After each full sweep the largest remaining weighted group mean, relative
/// to each column's initial scale, is compared against `tolerance`; a single
/// dimension therefore converges in one sweep. Levels whose total weight is
/// zero are left untouched (their rows carry no weight in the fit).
pub fn demean(
    cols: &mut [Vec<f64>],
    dims: &[GroupCodes],
    weights: &[f64],
    tolerance: f64,
    max_iter: usize,
) -> Result<DemeanReport> {
    if dims.is_empty() || cols.is_empty() {
        return Ok(DemeanReport {
            iterations: 0,
            last_delta: 0.0,
        });
    }
    if tolerance <= 0.0 {
        return Err(Error::config("demean tolerance must be positive"));
    }
    let n = weights.len();
    for d in dims {
        if d.codes.len() != n {
            return Err(Error::numerical("group codes length mismatch in demean"));
        }
        if d.n_levels == 0 {
            return Err(Error::numerical("fixed-effect dimension has no levels"));
        }
    }
    let scales: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().fold(1.0_f64, |a, v| a.max(v.abs())))
        .collect();

    let level_weights: Vec<Vec<f64>> = dims
        .iter()
        .map(|d| {
            let mut w = vec![0.0; d.n_levels];
            for i in 0..n {
                w[d.codes[i] as usize] += weights[i];
            }
            w
        })
        .collect();

    let mut sums = vec![0.0_f64; dims.iter().map(|d| d.n_levels).max().unwrap()];
    let mut last_delta = f64::INFINITY;
    // Converge one order past the declared tolerance so a second application
    // moves nothing by more than the tolerance itself.
    let threshold = tolerance / 10.0;
    for sweep in 1..=max_iter {
        for (d, lw) in dims.iter().zip(&level_weights) {
            for col in cols.iter_mut() {
                sums[..d.n_levels].fill(0.0);
                for i in 0..n {
                    sums[d.codes[i] as usize] += weights[i] * col[i];
                }
                for (s, &w) in sums[..d.n_levels].iter_mut().zip(lw) {
                    *s = if w > 0.0 { *s / w } else { 0.0 };
                }
                for i in 0..n {
                    col[i] -= sums[d.codes[i] as usize];
                }
            }
        }
        // Convergence: largest remaining scaled weighted group mean.
        let mut delta = 0.0_f64;
        for (d, lw) in dims.iter().zip(&level_weights) {
            for (col, scale) in cols.iter().zip(&scales) {
                sums[..d.n_levels].fill(0.0);
                for i in 0..n {
                    sums[d.codes[i] as usize] += weights[i] * col[i];
                }
                for (s, &w) in sums[..d.n_levels].iter().zip(lw) {
                    if w > 0.0 {
                        delta = delta.max((s / w).abs() / scale);
                    }
                }
            }
        }
        last_delta = delta;
        if delta < threshold {
            return Ok(DemeanReport {
                iterations: sweep,
                last_delta: delta,
            });
        }
    }
    Err(Error::numerical(format!(
        "demeaning did not converge in {max_iter} sweeps (last delta {last_delta:.3e})"
    )))
}

#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Weighted least squares: minimize sum of `w_i (y_i - x_i'b)^2`.
///
/// Rank deficiency is detected on the weighted design via a pivoted QR whose
/// triangle is then checked by SVD (singular values below `RANK_RTOL` times
/// the largest count as zero); the error names the dependent columns.
pub fn fit_wls(x_cols: &[&[f64]], names: &[&str], y: &[f64], weights: &[f64]) -> Result<WlsFit> {
    let n = y.len();
    let p = x_cols.len();
    if p == 0 {
        return Err(Error::numerical("design matrix has no columns"));
    }
    for c in x_cols {
        if c.len() != n {
            return Err(Error::numerical("design column length mismatch"));
        }
    }
    if n < p {
        return Err(Error::numerical(format!(
            "{n} observations cannot identify {p} coefficients"
        )));
    }

    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut sx = DMatrix::zeros(n, p);
    for (j, colv) in x_cols.iter().enumerate() {
        for i in 0..n {
            sx[(i, j)] = colv[i] * sqrt_w[i];
        }
    }
    let sy = DVector::from_iterator(n, y.iter().zip(&sqrt_w).map(|(v, s)| v * s));

    let qr = sx.clone().col_piv_qr();
    let r = qr.r();
    let sv = r.clone().svd(false, false).singular_values;
    let s_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let rank = sv.iter().filter(|&&s| s > RANK_RTOL * s_max).count();
    if rank < p || s_max == 0.0 {
        // Pivot order sorts columns by decreasing triangle magnitude; the
        // trailing positions identify the dependent columns.
        let mut order = DMatrix::from_fn(1, p, |_, j| j as f64);
        qr.p().permute_columns(&mut order);
        let mut dependent: Vec<&str> = (rank..p)
            .map(|k| names[order[(0, k)] as usize])
            .collect();
        dependent.sort_unstable();
        return Err(Error::numerical(format!(
            "design matrix is rank deficient (rank {rank} of {p}); dependent column(s): {}",
            dependent.join(", ")
        )));
    }

    let qty = qr.q().transpose() * &sy;
    let z = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    // A * P = Q * R, so coefficient j of A sits at the permuted position.
    let mut b = z;
    qr.p().inv_permute_rows(&mut b);

    let mut residuals = vec![0.0; n];
    for i in 0..n {
        let mut fitted = 0.0;
        for (j, colv) in x_cols.iter().enumerate() {
            fitted += colv[i] * b[j];
        }
        residuals[i] = y[i] - fitted;
    }
    Ok(WlsFit {
        coefficients: b.iter().copied().collect(),
        residuals,
    })
}

/// CR1 cluster-robust sandwich covariance.
///
/// `V = c (X'WX)^-1 [sum_g s_g s_g'] (X'WX)^-1` with `s_g = X_g' W_g u_g` and
/// `c = G/(G-1) * (N-1)/(N-K)`.
pub fn cluster_vcov(
    x_cols: &[&[f64]],
    weights: &[f64],
    residuals: &[f64],
    cluster_codes: &[u32],
    n_clusters: usize,
    k_effective: usize,
) -> Result<DMatrix<f64>> {
    let n = residuals.len();
    let p = x_cols.len();
    if n_clusters < 2 {
        return Err(Error::numerical(
            "cluster-robust covariance requires at least 2 clusters",
        ));
    }
    if n <= k_effective {
        return Err(Error::numerical(format!(
            "no residual degrees of freedom: N = {n}, K = {k_effective}"
        )));
    }

    let mut xtwx: DMatrix<f64> = DMatrix::zeros(p, p);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x_cols[a][i] * w;
            for b in a..p {
                xtwx[(a, b)] += xa * x_cols[b][i];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let bread = xtwx
        .try_inverse()
        .ok_or_else(|| Error::numerical("X'WX is singular"))?;

    let mut scores = vec![vec![0.0_f64; p]; n_clusters];
    for i in 0..n {
        let wu = weights[i] * residuals[i];
        if wu == 0.0 {
            continue;
        }
        let s = &mut scores[cluster_codes[i] as usize];
        for (a, colv) in x_cols.iter().enumerate() {
            s[a] += colv[i] * wu;
        }
    }
    let mut meat: DMatrix<f64> = DMatrix::zeros(p, p);
    for s in &scores {
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }

    let g = n_clusters as f64;
    let nf = n as f64;
    let kf = k_effective as f64;
    let c = (g / (g - 1.0)) * ((nf - 1.0) / (nf - kf));
    let mut v: DMatrix<f64> = &bread * meat * &bread * c;
    // symmetrize to wash out accumulation asymmetry
    for a in 0..p {
        for b in (a + 1)..p {
            let m = 0.5 * (v[(a, b)] + v[(b, a)]);
            v[(a, b)] = m;
            v[(b, a)] = m;
        }
    }
    Ok(v)
}

/// Absorbed degrees of freedom for a set of fixed-effect dimensions: the
/// first dimension contributes all its levels, each further dimension loses
/// one level to redundancy with the first.
pub fn absorbed_dof(dims: &[GroupCodes]) -> usize {
    dims.iter()
        .enumerate()
        .map(|(i, d)| if i == 0 { d.n_levels } else { d.n_levels - 1 })
        .sum()
}

/// Estimate one weighted fixed-effects regression on a panel: demean,
/// weighted least squares, cluster-robust covariance.
pub fn estimate(spec: &RegressionSpec, panel: &Panel) -> Result<RegressionFit> {
    if spec.regressors.is_empty() {
        return Err(Error::config("regression spec has no regressors"));
    }
    let n = panel.n_rows();
    if n == 0 {
        return Err(Error::data("cannot estimate on an empty panel"));
    }

    let y_raw = panel.column(&spec.outcome)?;
    let mut used: Vec<(&str, &[f64])> = vec![(spec.outcome.as_str(), y_raw)];
    for r in &spec.regressors {
        used.push((r.as_str(), panel.column(r)?));
    }
    let weights: Vec<f64> = match &spec.weights {
        Some(wcol) => panel.column(wcol)?.to_vec(),
        None => vec![1.0; n],
    };
    for (name, colv) in &used {
        if let Some(i) = colv.iter().position(|v| v.is_nan()) {
            return Err(Error::data(format!(
                "column {name} has a missing value in the estimation sample (row {i}); \
                 filter the sample first"
            )));
        }
    }
    if weights.iter().any(|&w| w < 0.0 || w.is_nan()) {
        return Err(Error::data("analytic weights must be nonnegative"));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::data("analytic weights sum to zero"));
    }

    let dims: Vec<GroupCodes> = spec
        .fe_dims
        .iter()
        .map(|d| {
            let (codes, n_levels) = d.codes(panel);
            GroupCodes { codes, n_levels }
        })
        .collect();

    let (terms, mut work): (Vec<String>, Vec<Vec<f64>>) = if dims.is_empty() {
        let mut t = vec!["const".to_string()];
        t.extend(spec.regressors.iter().cloned());
        let mut w = vec![y_raw.to_vec(), vec![1.0; n]];
        w.extend(used[1..].iter().map(|(_, c)| c.to_vec()));
        (t, w)
    } else {
        let t = spec.regressors.clone();
        let w = used.iter().map(|(_, c)| c.to_vec()).collect();
        (t, w)
    };

    let report = if dims.is_empty() {
        DemeanReport {
            iterations: 0,
            last_delta: 0.0,
        }
    } else {
        demean(
            &mut work,
            &dims,
            &weights,
            spec.demean_tolerance,
            spec.demean_max_iter,
        )?
    };

    let (y_work, x_work) = work.split_first().expect("outcome column present");
    let x_refs: Vec<&[f64]> = x_work.iter().map(|c| c.as_slice()).collect();
    let names: Vec<&str> = terms.iter().map(|s| s.as_str()).collect();
    let wls = fit_wls(&x_refs, &names, y_work, &weights)?;

    let k_effective = terms.len() + absorbed_dof(&dims);
    let (cluster_codes, n_clusters) = {
        let (codes, levels) = spec.cluster_dim.codes(panel);
        (codes, levels)
    };
    let vcov = cluster_vcov(
        &x_refs,
        &weights,
        &wls.residuals,
        &cluster_codes,
        n_clusters,
        k_effective,
    )?;

    let baseline = panel.baseline_rows();
    let baseline_mean =
        crate::panel::weighted_mean_masked(y_raw, &weights, &baseline).unwrap_or(f64::NAN);

    Ok(RegressionFit {
        terms,
        coefficients: wls.coefficients,
        vcov,
        residuals: wls.residuals,
        n_obs: n,
        k_effective,
        n_clusters,
        baseline_mean,
        demean_iterations: report.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn codes(v: &[u32]) -> GroupCodes {
        let (codes, n_levels) = dense_codes(v);
        GroupCodes { codes, n_levels }
    }

    #[test]
    fn single_dim_demean_converges_in_one_sweep() {
        let g = codes(&[0, 0, 1, 1]);
        let w = vec![1.0, 3.0, 1.0, 1.0];
        let mut cols = vec![vec![1.0, 5.0, 2.0, 4.0]];
        let report = demean(&mut cols, &[g], &w, 1e-10, 100).unwrap();
        assert_eq!(report.iterations, 1);
        // group 0 weighted mean: (1 + 15)/4 = 4
        assert_eq!(cols[0][0], 1.0 - 4.0);
        assert_eq!(cols[0][1], 5.0 - 4.0);
        assert_eq!(cols[0][2], -1.0);
        assert_eq!(cols[0][3], 1.0);
    }

    #[test]
    fn constant_within_level_is_absorbed() {
        let g = codes(&[7, 7, 9, 9, 9]);
        let mut cols = vec![vec![3.0, 3.0, -1.5, -1.5, -1.5]];
        demean(&mut cols, &[g], &[1.0; 5], 1e-12, 100).unwrap();
        for v in &cols[0] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn demean_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 120;
        let d1 = codes(&(0..n).map(|i| (i % 6) as u32).collect::<Vec<_>>());
        let d2 = codes(&(0..n).map(|i| (i / 30) as u32).collect::<Vec<_>>());
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let mut cols = vec![(0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>()];
        let tol = 1e-10;
        let scale = cols[0].iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        demean(&mut cols, &[d1.clone(), d2.clone()], &w, tol, 1000).unwrap();
        let before = cols[0].clone();
        demean(&mut cols, &[d1, d2], &w, tol, 1000).unwrap();
        for (a, b) in before.iter().zip(&cols[0]) {
            assert!(
                (a - b).abs() <= tol * scale,
                "idempotence violated: {a} vs {b}"
            );
        }
    }

    #[test]
    fn wls_intercept_only_recovers_weighted_mean() {
        let y = [1.0, 2.0, 10.0];
        let w = [1.0, 1.0, 2.0];
        let ones = [1.0, 1.0, 1.0];
        let fit = fit_wls(&[&ones], &["const"], &y, &w).unwrap();
        let expect = (1.0 + 2.0 + 20.0) / 4.0;
        assert!((fit.coefficients[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn wls_duplicate_column_is_rank_deficient() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let x = [0.5, 1.0, 1.5, 9.0];
        let err = fit_wls(&[&x, &x], &["a", "a_copy"], &y, &[1.0; 4]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank deficient"), "{msg}");
        assert!(msg.contains("a_copy") || msg.contains('a'), "{msg}");
    }

    #[test]
    fn wls_matches_normal_equations_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 200;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ones = vec![1.0; n];
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.3 + 1.2 * x1[i] - 0.7 * x2[i] + rng.gen_range(-0.5..0.5))
            .collect();

        let fit = fit_wls(&[&ones, &x1, &x2], &["c", "x1", "x2"], &y, &w).unwrap();

        // oracle: b = (X'WX)^-1 X'Wy assembled explicitly
        let cols = [&ones, &x1, &x2];
        let mut a: DMatrix<f64> = DMatrix::zeros(3, 3);
        let mut rhs: DVector<f64> = DVector::zeros(3);
        for i in 0..n {
            for p in 0..3 {
                rhs[p] += w[i] * cols[p][i] * y[i];
                for q in 0..3 {
                    a[(p, q)] += w[i] * cols[p][i] * cols[q][i];
                }
            }
        }
        let oracle = a.try_inverse().unwrap() * rhs;
        for j in 0..3 {
            let rel = (fit.coefficients[j] - oracle[j]).abs() / oracle[j].abs().max(1e-12);
            assert!(rel < 1e-10, "coef {j}: {} vs {}", fit.coefficients[j], oracle[j]);
        }
    }

    #[test]
    fn singleton_clusters_reduce_to_hc1() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 40;
        let ones = vec![1.0; n];
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + rng.gen_range(-1.0..1.0)).collect();
        let w = vec![1.0; n];
        let fit = fit_wls(&[&ones, &x], &["c", "x"], &y, &w).unwrap();
        let cl: Vec<u32> = (0..n as u32).collect();
        let v = cluster_vcov(&[&ones, &x], &w, &fit.residuals, &cl, n, 2).unwrap();

        // HC1: N/(N-K) (X'X)^-1 [sum x_i x_i' e_i^2] (X'X)^-1
        let cols = [&ones, &x];
        let mut a: DMatrix<f64> = DMatrix::zeros(2, 2);
        let mut meat: DMatrix<f64> = DMatrix::zeros(2, 2);
        for i in 0..n {
            for p in 0..2 {
                for q in 0..2 {
                    a[(p, q)] += cols[p][i] * cols[q][i];
                    meat[(p, q)] += cols[p][i] * cols[q][i] * fit.residuals[i] * fit.residuals[i];
                }
            }
        }
        let ainv = a.try_inverse().unwrap();
        let hc1: DMatrix<f64> = &ainv * meat * &ainv * (n as f64 / (n as f64 - 2.0));
        // CR1 with singleton clusters carries an extra G/(G-1) * (N-1)/N = 1 factor:
        // G = N, so G/(G-1)*(N-1)/(N-K) = N/(N-K) exactly.
        for p in 0..2 {
            for q in 0..2 {
                assert!((v[(p, q)] - hc1[(p, q)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wald_self_contrast_is_zero_with_p_one() {
        let fit = RegressionFit {
            terms: vec!["a".into(), "b".into()],
            coefficients: vec![1.0, 2.0],
            vcov: DMatrix::from_diagonal(&DVector::from_column_slice(&[0.1, 0.2])),
            residuals: vec![],
            n_obs: 10,
            k_effective: 2,
            n_clusters: 5,
            baseline_mean: f64::NAN,
            demean_iterations: 0,
        };
        let (t, p) = wald_linear(&fit, &[0.0, 0.0]).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
        let (t, _) = wald_linear(&fit, &[1.0, -1.0]).unwrap();
        assert!(t.abs() > 0.0);
    }

    #[test]
    fn p_value_bounds() {
        assert!((two_sided_t_pvalue(0.0, 10.0) - 1.0).abs() < 1e-12);
        assert!(two_sided_t_pvalue(50.0, 10.0) < 1e-6);
        let crit = t_critical(345.0, 0.95);
        assert!(crit > 1.95 && crit < 1.98, "crit = {crit}");
    }
}
