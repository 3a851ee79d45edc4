//! Final-visit estimands: standardized group means, risk difference and log
//! odds ratio with delta-method variances, Rubin pooling, and stratified
//! bootstrap percentile intervals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::exec::Execution;
use crate::marginal::LongitudinalLayout;
use crate::rng::{derive_seed, StreamRng};
use crate::trial::{expit, logit, Arm, TrialDataset};
use crate::{Error, Result};

pub const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Rd,
    LogOr,
}

impl Estimand {
    pub const ALL: [Estimand; 2] = [Estimand::Rd, Estimand::LogOr];

    pub fn label(self) -> &'static str {
        match self {
            Estimand::Rd => "RD",
            Estimand::LogOr => "LOG(OR)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Glmm,
    Mi,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Glmm => "GLMM",
            Method::Mi => "MI",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimand: Estimand,
    pub method: Method,
    pub estimate: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub used_fallback: bool,
    /// Degrees of freedom of the interval; `None` means a normal quantile.
    pub df: Option<f64>,
}

impl EstimateRecord {
    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

fn z_quantile() -> f64 {
    Normal::standard().inverse_cdf(0.5 + CONFIDENCE / 2.0)
}

/// Per-subject design rows at the final visit with treatment set to 0 and 1.
#[derive(Debug, Clone)]
pub struct CounterfactualDesign {
    n_cols: usize,
    rows0: Vec<f64>,
    rows1: Vec<f64>,
}

impl CounterfactualDesign {
    pub fn new(rows0: Vec<Vec<f64>>, rows1: Vec<Vec<f64>>) -> Result<Self> {
        if rows0.is_empty() || rows0.len() != rows1.len() {
            return Err(Error::Domain(
                "counterfactual rows must be non-empty and paired".into(),
            ));
        }
        let n_cols = rows0[0].len();
        if rows0.iter().chain(&rows1).any(|r| r.len() != n_cols) {
            return Err(Error::Domain("ragged counterfactual rows".into()));
        }
        Ok(Self {
            n_cols,
            rows0: rows0.into_iter().flatten().collect(),
            rows1: rows1.into_iter().flatten().collect(),
        })
    }

    /// Rows of the longitudinal mean model at the last visit, over all subjects.
    pub fn longitudinal(dataset: &TrialDataset) -> Self {
        let layout = LongitudinalLayout {
            n_visits: dataset.n_visits(),
        };
        let last = dataset.n_visits() - 1;
        let mut rows0 = Vec::new();
        let mut rows1 = Vec::new();
        for s in dataset.subjects() {
            rows0.extend(layout.row(s.baseline(), last, 0.0));
            rows1.extend(layout.row(s.baseline(), last, 1.0));
        }
        Self {
            n_cols: layout.n_cols(),
            rows0,
            rows1,
        }
    }

    /// Rows `(1, baseline, k)` of the final-visit logistic model.
    pub fn final_visit(dataset: &TrialDataset) -> Self {
        let mut rows0 = Vec::with_capacity(3 * dataset.n_subjects());
        let mut rows1 = Vec::with_capacity(3 * dataset.n_subjects());
        for s in dataset.subjects() {
            rows0.extend([1.0, s.baseline(), 0.0]);
            rows1.extend([1.0, s.baseline(), 1.0]);
        }
        Self {
            n_cols: 3,
            rows0,
            rows1,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.rows0.len() / self.n_cols
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, arm: Arm, i: usize) -> &[f64] {
        let rows = match arm {
            Arm::Control => &self.rows0,
            Arm::Treatment => &self.rows1,
        };
        &rows[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_dims(beta: &DVector<f64>, cfd: &CounterfactualDesign) -> Result<()> {
    if beta.len() != cfd.n_cols {
        return Err(Error::Domain(format!(
            "beta has {} entries, design has {} columns",
            beta.len(),
            cfd.n_cols
        )));
    }
    Ok(())
}

/// Average predicted probability over all subjects under each arm.
pub fn gcomp_means(beta: &DVector<f64>, cfd: &CounterfactualDesign) -> Result<(f64, f64)> {
    check_dims(beta, cfd)?;
    let n = cfd.n_subjects();
    let (mut p0, mut p1) = (0.0, 0.0);
    for i in 0..n {
        p0 += expit(dot(cfd.row(Arm::Control, i), beta));
        p1 += expit(dot(cfd.row(Arm::Treatment, i), beta));
    }
    Ok((p0 / n as f64, p1 / n as f64))
}

/// Gradients of `p0_hat` and `p1_hat` with respect to beta.
pub fn group_mean_gradients(
    beta: &DVector<f64>,
    cfd: &CounterfactualDesign,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dims(beta, cfd)?;
    let n = cfd.n_subjects();
    let mut g0 = DVector::zeros(cfd.n_cols);
    let mut g1 = DVector::zeros(cfd.n_cols);
    for i in 0..n {
        for (arm, g) in [(Arm::Control, &mut g0), (Arm::Treatment, &mut g1)] {
            let row = cfd.row(arm, i);
            let p = expit(dot(row, beta));
            let w = p * (1.0 - p);
            for (gc, x) in g.iter_mut().zip(row) {
                *gc += w * x;
            }
        }
    }
    Ok((g0 / n as f64, g1 / n as f64))
}

/// `G1`, the gradient of `p1_hat - p0_hat`.
pub fn rd_gradient(beta: &DVector<f64>, cfd: &CounterfactualDesign) -> Result<DVector<f64>> {
    let (g0, g1) = group_mean_gradients(beta, cfd)?;
    Ok(g1 - g0)
}

/// `G2`, the gradient of `logit(p1_hat) - logit(p0_hat)`.
pub fn log_or_gradient(beta: &DVector<f64>, cfd: &CounterfactualDesign) -> Result<DVector<f64>> {
    let (p0, p1) = gcomp_means(beta, cfd)?;
    check_probability(p0)?;
    check_probability(p1)?;
    let (g0, g1) = group_mean_gradients(beta, cfd)?;
    Ok(g1 / (p1 * (1.0 - p1)) - g0 / (p0 * (1.0 - p0)))
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::DegenerateProbability(p))
    }
}

fn delta_variance(g: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    (g.transpose() * cov * g)[(0, 0)].max(0.0)
}

fn normal_record(estimand: Estimand, method: Method, estimate: f64, variance: f64) -> EstimateRecord {
    let half = z_quantile() * variance.sqrt();
    EstimateRecord {
        estimand,
        method,
        estimate,
        variance,
        ci_low: estimate - half,
        ci_high: estimate + half,
        used_fallback: false,
        df: None,
    }
}

pub fn risk_difference(
    beta: &DVector<f64>,
    cov_beta: &DMatrix<f64>,
    cfd: &CounterfactualDesign,
    method: Method,
) -> Result<EstimateRecord> {
    let (p0, p1) = gcomp_means(beta, cfd)?;
    let g = rd_gradient(beta, cfd)?;
    Ok(normal_record(Estimand::Rd, method, p1 - p0, delta_variance(&g, cov_beta)))
}

pub fn log_odds_ratio(
    beta: &DVector<f64>,
    cov_beta: &DMatrix<f64>,
    cfd: &CounterfactualDesign,
    method: Method,
) -> Result<EstimateRecord> {
    let (p0, p1) = gcomp_means(beta, cfd)?;
    check_probability(p0)?;
    check_probability(p1)?;
    let g = log_or_gradient(beta, cfd)?;
    let est = logit(p1)? - logit(p0)?;
    Ok(normal_record(Estimand::LogOr, method, est, delta_variance(&g, cov_beta)))
}

/// RD and log(OR) records from one pass over the counterfactual rows.
pub fn standardized_estimates(
    beta: &DVector<f64>,
    cov_beta: &DMatrix<f64>,
    cfd: &CounterfactualDesign,
    method: Method,
) -> Result<(EstimateRecord, EstimateRecord)> {
    check_dims(beta, cfd)?;
    let n = cfd.n_subjects();
    let k = cfd.n_cols;
    let b = beta.as_slice();
    let (mut p0, mut p1) = (0.0, 0.0);
    let mut g0 = vec![0.0; k];
    let mut g1 = vec![0.0; k];
    for (r0, r1) in cfd.rows0.chunks_exact(k).zip(cfd.rows1.chunks_exact(k)) {
        for (row, g, acc) in [(r0, &mut g0, &mut p0), (r1, &mut g1, &mut p1)] {
            let p = expit(row.iter().zip(b).map(|(x, y)| x * y).sum());
            *acc += p;
            let w = p * (1.0 - p);
            for (gc, x) in g.iter_mut().zip(row) {
                *gc += w * x;
            }
        }
    }
    let nf = n as f64;
    let (p0, p1) = (p0 / nf, p1 / nf);
    let g0 = DVector::from_vec(g0) / nf;
    let g1 = DVector::from_vec(g1) / nf;
    let rd = normal_record(Estimand::Rd, method, p1 - p0, delta_variance(&(&g1 - &g0), cov_beta));
    check_probability(p0)?;
    check_probability(p1)?;
    let g2 = g1 / (p1 * (1.0 - p1)) - g0 / (p0 * (1.0 - p0));
    let lor = normal_record(
        Estimand::LogOr,
        method,
        logit(p1)? - logit(p0)?,
        delta_variance(&g2, cov_beta),
    );
    Ok((rd, lor))
}

/// Rubin's rules; the interval uses a t quantile with the Rubin degrees of
/// freedom (a normal quantile when the between variance is zero).
pub fn rubin_pool(records: &[EstimateRecord]) -> Result<EstimateRecord> {
    let m = records.len();
    if m < 2 {
        return Err(Error::Domain(format!("pooling needs m >= 2, got {m}")));
    }
    let first = records[0];
    if records.iter().any(|r| r.estimand != first.estimand) {
        return Err(Error::MixedEstimands);
    }
    let mf = m as f64;
    let identical = records.iter().all(|r| r.estimate == first.estimate);
    let estimate = if identical {
        first.estimate
    } else {
        records.iter().map(|r| r.estimate).sum::<f64>() / mf
    };
    let within = records.iter().map(|r| r.variance).sum::<f64>() / mf;
    let between = records
        .iter()
        .map(|r| (r.estimate - estimate).powi(2))
        .sum::<f64>()
        / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * between;
    let total = within + inflated;
    let df = if inflated > 0.0 {
        let df = (mf - 1.0) * (1.0 + within / inflated).powi(2);
        Some(df)
    } else {
        None
    };
    let q = match df {
        Some(df) if df < 1e7 => StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Domain(e.to_string()))?
            .inverse_cdf(0.5 + CONFIDENCE / 2.0),
        _ => z_quantile(),
    };
    let half = q * total.sqrt();
    Ok(EstimateRecord {
        estimand: first.estimand,
        method: first.method,
        estimate,
        variance: total,
        ci_low: estimate - half,
        ci_high: estimate + half,
        used_fallback: records.iter().any(|r| r.used_fallback),
        df,
    })
}

/// Percentile interval and variance from bootstrap replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub ci_low: f64,
    pub ci_high: f64,
    pub variance: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl BootstrapInterval {
    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Nearest-rank quantile of sorted data.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Resamples subjects with replacement within each arm.
pub fn stratified_resample<R: Rng + ?Sized>(dataset: &TrialDataset, rng: &mut R) -> TrialDataset {
    let subjects = dataset.subjects();
    let mut out = Vec::with_capacity(subjects.len());
    for arm in [Arm::Control, Arm::Treatment] {
        let idx: Vec<usize> = (0..subjects.len()).filter(|&i| subjects[i].arm == arm).collect();
        for _ in 0..idx.len() {
            out.push(subjects[idx[rng.random_range(0..idx.len())]].clone());
        }
    }
    TrialDataset::from_parts_unchecked(out, dataset.n_visits())
}

/// Maximum tolerated share of failed resamples.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.2;

/// Bootstrap for a pipeline returning several estimates at once. Resample `b`
/// draws from its own stream seeded from `rng`, so the result does not depend
/// on the execution strategy.
pub fn bootstrap_many<F, R>(
    dataset: &TrialDataset,
    pipeline: F,
    n_boot: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<Vec<BootstrapInterval>>
where
    F: Fn(&TrialDataset, &mut StreamRng) -> Result<Vec<f64>> + Sync + Send,
    R: Rng + ?Sized,
{
    if n_boot < 100 {
        return Err(Error::Domain(format!("bootstrap needs B >= 100, got {n_boot}")));
    }
    let base: u64 = rng.random();
    let draws = exec.map(n_boot, |b| {
        let mut r = StreamRng::seed_from_u64(derive_seed(base, &[b as u64]));
        let sample = stratified_resample(dataset, &mut r);
        pipeline(&sample, &mut r)
    });
    let ok: Vec<Vec<f64>> = draws.into_iter().filter_map(|d| d.ok()).collect();
    let failed = n_boot - ok.len();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE * n_boot as f64 || ok.len() < 2 {
        return Err(Error::BootstrapFailure {
            failed,
            total: n_boot,
        });
    }
    let k = ok[0].len();
    if ok.iter().any(|v| v.len() != k) {
        return Err(Error::Domain("pipeline returned varying output lengths".into()));
    }
    let alpha = (1.0 - CONFIDENCE) / 2.0;
    Ok((0..k)
        .map(|c| {
            let mut vals: Vec<f64> = ok.iter().map(|v| v[c]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            vals.sort_by(f64::total_cmp);
            BootstrapInterval {
                ci_low: nearest_rank(&vals, alpha),
                ci_high: nearest_rank(&vals, 1.0 - alpha),
                variance,
                n_ok: ok.len(),
                n_failed: failed,
            }
        })
        .collect())
}

/// Scalar bootstrap: `(ci_low, ci_high, boot_variance)` with tallies.
pub fn bootstrap_ci<F, R>(
    dataset: &TrialDataset,
    pipeline: F,
    n_boot: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<BootstrapInterval>
where
    F: Fn(&TrialDataset, &mut StreamRng) -> Result<f64> + Sync + Send,
    R: Rng + ?Sized,
{
    let out = bootstrap_many(dataset, |d, r| pipeline(d, r).map(|v| vec![v]), n_boot, rng, exec)?;
    Ok(out[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::Rng;

    fn two_group(n: usize) -> CounterfactualDesign {
        CounterfactualDesign::new(vec![vec![1.0, 0.0]; n], vec![vec![1.0, 1.0]; n]).unwrap()
    }

    fn record(est: f64, var: f64) -> EstimateRecord {
        normal_record(Estimand::Rd, Method::Mi, est, var)
    }

    #[test]
    fn gcomp_at_zero_and_saturated() {
        let cfd = two_group(10);
        assert_eq!(gcomp_means(&DVector::zeros(2), &cfd).unwrap(), (0.5, 0.5));
        let b0 = logit(0.4).unwrap();
        let beta = DVector::from_vec(vec![b0, logit(0.6).unwrap() - b0]);
        let (p0, p1) = gcomp_means(&beta, &cfd).unwrap();
        assert_abs_diff_eq!(p0, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(p1, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn gcomp_matches_direct_loop() {
        use rand::SeedableRng;
        let mut rng = StreamRng::seed_from_u64(2);
        let n = 50;
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(6.0..11.0)).collect();
        let rows = |k: f64| base.iter().map(|b| vec![1.0, *b, k]).collect::<Vec<_>>();
        let cfd = CounterfactualDesign::new(rows(0.0), rows(1.0)).unwrap();
        let beta = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0)]);
        let mut p = [0.0; 2];
        for b in &base {
            for (k, acc) in p.iter_mut().enumerate() {
                let eta = beta[0] + beta[1] * b + beta[2] * k as f64;
                *acc += 1.0 / (1.0 + (-eta).exp());
            }
        }
        let (p0, p1) = gcomp_means(&beta, &cfd).unwrap();
        assert_abs_diff_eq!(p0, p[0] / n as f64, epsilon = 1e-14);
        assert_abs_diff_eq!(p1, p[1] / n as f64, epsilon = 1e-14);
    }

    #[test]
    fn delta_at_symmetric_point() {
        let cfd = two_group(7);
        let beta = DVector::zeros(2);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.2]));
        let g1 = rd_gradient(&beta, &cfd).unwrap();
        assert_abs_diff_eq!(g1[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g1[1], 0.25, epsilon = 1e-15);
        let rd = risk_difference(&beta, &cov, &cfd, Method::Glmm).unwrap();
        assert_abs_diff_eq!(rd.variance, 0.0625 * 0.2, epsilon = 1e-15);
        let g2 = log_or_gradient(&beta, &cfd).unwrap();
        assert_abs_diff_eq!(g2[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g2[1], 1.0, epsilon = 1e-15);
        let lor = log_odds_ratio(&beta, &cov, &cfd, Method::Glmm).unwrap();
        assert_abs_diff_eq!(lor.variance, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn zero_covariance_gives_zero_variance() {
        let cfd = two_group(3);
        let beta = DVector::from_vec(vec![0.3, -0.7]);
        let rd = risk_difference(&beta, &DMatrix::zeros(2, 2), &cfd, Method::Glmm).unwrap();
        assert_eq!(rd.variance, 0.0);
        assert_eq!(rd.ci_low, rd.estimate);
    }

    #[test]
    fn log_or_from_group_means() {
        let est = logit(0.5419).unwrap() - logit(0.4166).unwrap();
        assert_abs_diff_eq!(est, 0.5047, epsilon = 1e-4);
    }

    #[test]
    fn degenerate_probability_rejected() {
        let cfd = two_group(3);
        let beta = DVector::from_vec(vec![800.0, 0.0]);
        assert!(matches!(
            log_odds_ratio(&beta, &DMatrix::zeros(2, 2), &cfd, Method::Glmm),
            Err(Error::DegenerateProbability(_))
        ));
    }

    #[test]
    fn rubin_hand_case() {
        let pooled = rubin_pool(&[record(0.1, 0.01), record(0.2, 0.01)]).unwrap();
        assert_abs_diff_eq!(pooled.estimate, 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(pooled.variance, 0.0175, epsilon = 1e-15);
        let df = pooled.df.unwrap();
        assert_abs_diff_eq!(df, (1.0 + 0.01 / 0.0075f64).powi(2), epsilon = 1e-12);
    }

    #[test]
    fn rubin_zero_between_uses_normal() {
        let pooled = rubin_pool(&[record(0.3, 0.02); 5]).unwrap();
        assert_eq!(pooled.df, None);
        assert_abs_diff_eq!(pooled.variance, 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(pooled.ci_high - 0.3, 1.959963984540054 * 0.02f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn rubin_rejects_mixed_and_single() {
        let mut other = record(0.1, 0.01);
        other.estimand = Estimand::LogOr;
        assert!(matches!(rubin_pool(&[record(0.1, 0.01), other]), Err(Error::MixedEstimands)));
        assert!(rubin_pool(&[record(0.1, 0.01)]).is_err());
    }

    proptest! {
        #[test]
        fn rubin_permutation_invariant(
            vals in proptest::collection::vec((-1.0f64..1.0, 0.0f64..0.1), 2..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let recs: Vec<_> = vals.iter().map(|(e, v)| record(*e, *v)).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut StreamRng::seed_from_u64(seed));
            let a = rubin_pool(&recs).unwrap();
            let b = rubin_pool(&shuffled).unwrap();
            prop_assert!((a.estimate - b.estimate).abs() < 1e-14);
            prop_assert!((a.variance - b.variance).abs() < 1e-14);
            prop_assert!(a.ci_low <= a.estimate && a.estimate <= a.ci_high);
        }
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&v, 0.025), 3.0);
        assert_eq!(nearest_rank(&v, 0.975), 98.0);
        assert_eq!(nearest_rank(&[5.0], 0.5), 5.0);
    }
}
