//! Sequential Bayesian-regression imputation of monotone-missing continuous
//! outcomes, the per-copy final-visit analysis, and the pooled MI pipeline.
//!
//! For each stratum (each arm, by default) and each visit `t = 2..J`, observed
//! `y_t` is regressed on the full history `(1, y_1, ..., y_{t-1})`. Each
//! imputation copy draws `σ*² = RSS / χ²_df` and `β* ~ N(β̂, σ*² (X'X)^{-1})`
//! and fills missing `y_t` with `x'β* + σ* z`; filled values become
//! predictors for later visits. With monotone data this sequential form is the
//! exact fully-conditional scheme, so no burn-in rounds are needed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::estimands::{
    rubin_pool, standardized_estimates, CounterfactualDesign, EstimateRecord, Method,
};
use crate::exec::Execution;
use crate::linalg::reciprocal_condition;
use crate::marginal::{final_visit_design, fit_marginal_logistic, Design, ModelSpec};
use crate::rng::{derive_seed, StreamRng};
use crate::trial::{dichotomize, Arm, SubjectRecord, Threshold, TrialDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    pub m: usize,
    /// Impute each arm separately; otherwise pool the arms and add treatment
    /// as a predictor.
    pub by_arm: bool,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self { m: 10, by_arm: true }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m must be at least 2, got {}", self.m)));
        }
        Ok(())
    }
}

/// `m` completed copies of one incomplete dataset.
#[derive(Debug, Clone)]
pub struct CompletedSet {
    pub copies: Vec<TrialDataset>,
}

/// Regression of one visit on its history within one stratum.
#[derive(Debug, Clone)]
struct VisitModel {
    visit: usize,
    beta_hat: DVector<f64>,
    /// Lower Cholesky factor of X'X.
    xtx_chol: DMatrix<f64>,
    rss: f64,
    chi: ChiSquared<f64>,
    /// Subjects to fill at this visit.
    missing: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Stratum {
    with_trt: bool,
    models: Vec<VisitModel>,
}

fn stratum_name(arm: Option<Arm>) -> String {
    arm.map_or_else(|| "pooled".to_string(), |a| a.name().to_string())
}

fn predictors(history: &[f64], trt: Option<f64>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(history);
    if let Some(t) = trt {
        out.push(t);
    }
}

/// Predictor row `(1, y_1, ..., y_t-1[, trt])` of an observed history.
fn history(s: &SubjectRecord, t: usize, with_trt: bool, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend(s.outcomes[..t].iter().map(|v| v.expect("monotone history")));
    if with_trt {
        out.push(s.arm.indicator());
    }
}

fn fit_strata(dataset: &TrialDataset, by_arm: bool) -> Result<Vec<Stratum>> {
    let subjects = dataset.subjects();
    let groups: Vec<(Option<Arm>, Vec<usize>)> = if by_arm {
        [Arm::Control, Arm::Treatment]
            .into_iter()
            .map(|a| (Some(a), (0..subjects.len()).filter(|&i| subjects[i].arm == a).collect()))
            .collect()
    } else {
        vec![(None, (0..subjects.len()).collect())]
    };
    let mut strata = Vec::new();
    let mut x = Vec::new();
    for (arm, members) in groups {
        let with_trt = arm.is_none();
        let mut models = Vec::new();
        for t in 1..dataset.n_visits() {
            let missing: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| subjects[i].outcomes[t].is_none())
                .collect();
            if missing.is_empty() {
                continue;
            }
            let observed: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| subjects[i].outcomes[t].is_some())
                .collect();
            let q = t + 1 + usize::from(with_trt);
            if observed.len() < q + 2 {
                return Err(Error::InsufficientCases {
                    visit: t + 1,
                    stratum: stratum_name(arm),
                    observed: observed.len(),
                    required: q + 2,
                });
            }
            let mut xtx_flat = vec![0.0; q * q];
            let mut xty = DVector::<f64>::zeros(q);
            for &i in &observed {
                let s = &subjects[i];
                history(s, t, with_trt, &mut x);
                let yt = s.outcomes[t].expect("observed");
                for a in 0..q {
                    xty[a] += x[a] * yt;
                    let row = &mut xtx_flat[a * q..(a + 1) * q];
                    for (cell, xb) in row.iter_mut().zip(&x) {
                        *cell += x[a] * xb;
                    }
                }
            }
            let xtx = DMatrix::from_row_slice(q, q, &xtx_flat);
            let diag: Vec<f64> = (0..q).map(|a| xtx[(a, a)].sqrt()).collect();
            let scaled = DMatrix::from_fn(q, q, |a, b| xtx[(a, b)] / (diag[a] * diag[b]));
            if diag.contains(&0.0) || reciprocal_condition(&scaled) < 1e-12 {
                return Err(Error::Collinear {
                    visit: t + 1,
                    stratum: stratum_name(arm),
                });
            }
            let chol = xtx.clone().cholesky().ok_or_else(|| Error::Collinear {
                visit: t + 1,
                stratum: stratum_name(arm),
            })?;
            let beta_hat = chol.solve(&xty);
            let mut rss = 0.0;
            for &i in &observed {
                let s = &subjects[i];
                history(s, t, with_trt, &mut x);
                let fitted: f64 = x.iter().zip(beta_hat.iter()).map(|(a, b)| a * b).sum();
                rss += (s.outcomes[t].expect("observed") - fitted).powi(2);
            }
            let df = observed.len() - q;
            models.push(VisitModel {
                visit: t,
                beta_hat,
                xtx_chol: chol.unpack(),
                rss,
                chi: ChiSquared::new(df as f64).expect("df >= 2"),
                missing,
            });
        }
        strata.push(Stratum { with_trt, models });
    }
    Ok(strata)
}

/// Fills one copy; returns the row-major `n x J` value matrix.
fn impute_values(dataset: &TrialDataset, strata: &[Stratum], rng: &mut StreamRng) -> Vec<f64> {
    let subjects = dataset.subjects();
    let j = dataset.n_visits();
    let mut values = Vec::with_capacity(subjects.len() * j);
    for s in subjects {
        values.extend(s.outcomes.iter().map(|v| v.unwrap_or(0.0)));
    }
    let mut x = Vec::new();
    for t in 1..j {
        for stratum in strata {
            let Some(model) = stratum.models.iter().find(|m| m.visit == t) else {
                continue;
            };
            let sigma2 = model.rss / model.chi.sample(rng);
            let sigma = sigma2.sqrt();
            let q = model.beta_hat.len();
            let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            // (X'X)^{-1} = L^{-T} L^{-1}, so L^{-T} z has that covariance.
            let u = model
                .xtx_chol
                .transpose()
                .solve_upper_triangular(&z)
                .expect("nonsingular factor");
            let beta = &model.beta_hat + u * sigma;
            for &i in &model.missing {
                let trt = stratum.with_trt.then(|| subjects[i].arm.indicator());
                predictors(&values[i * j..i * j + t], trt, &mut x);
                let mean: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let noise: f64 = rng.sample(StandardNormal);
                values[i * j + t] = mean + sigma * noise;
            }
        }
    }
    values
}

fn impute_copy(dataset: &TrialDataset, strata: &[Stratum], rng: &mut StreamRng) -> TrialDataset {
    let j = dataset.n_visits();
    let values = impute_values(dataset, strata, rng);
    let completed = dataset
        .subjects()
        .iter()
        .zip(values.chunks(j))
        .map(|(s, v)| SubjectRecord {
            id: s.id.clone(),
            arm: s.arm,
            outcomes: v.iter().map(|x| Some(*x)).collect(),
        })
        .collect();
    TrialDataset::from_parts_unchecked(completed, j)
}

fn copy_rng(base: u64, c: usize) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, &[c as u64]))
}

/// Creates `config.m` completed copies. Copy `c` draws from a sub-stream
/// derived from one seed taken from `rng`, so the copies can be produced in
/// any order.
pub fn impute_monotone_with<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    config: &ImputationConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<CompletedSet> {
    config.validate()?;
    let strata = fit_strata(dataset, config.by_arm)?;
    let base: u64 = rng.random();
    let copies = exec.map(config.m, |c| impute_copy(dataset, &strata, &mut copy_rng(base, c)));
    Ok(CompletedSet { copies })
}

pub fn impute_monotone<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    config: &ImputationConfig,
    rng: &mut R,
) -> Result<CompletedSet> {
    impute_monotone_with(dataset, config, rng, Execution::Sequential)
}

/// Final-visit logistic fit (baseline + treatment, sandwich covariance) on a
/// complete dataset, standardized to RD and log(OR).
pub fn analyze_final_visit(dataset: &TrialDataset, threshold: &Threshold) -> Result<(EstimateRecord, EstimateRecord)> {
    let panel = dichotomize(dataset, threshold);
    let design = final_visit_design(&panel, dataset)?;
    let cfd = CounterfactualDesign::final_visit(dataset);
    fit_and_standardize(&design, &cfd)
}

fn fit_and_standardize(design: &Design, cfd: &CounterfactualDesign) -> Result<(EstimateRecord, EstimateRecord)> {
    let fit = fit_marginal_logistic(design, &ModelSpec::independence())?;
    standardized_estimates(&fit.beta_hat, &fit.cov_sandwich, cfd, Method::Mi)
}

/// Per-copy `(RD, log(OR))` records.
pub fn analyze_completed(set: &CompletedSet, threshold: &Threshold) -> Result<Vec<(EstimateRecord, EstimateRecord)>> {
    set.copies
        .iter()
        .map(|copy| {
            if !copy.is_complete() {
                return Err(Error::Validation("completed copy has missing cells".into()));
            }
            analyze_final_visit(copy, threshold)
        })
        .collect()
}

/// Pooled MI result for both estimands.
#[derive(Debug, Clone, Copy)]
pub struct MiEstimate {
    pub rd: EstimateRecord,
    pub log_or: EstimateRecord,
}

/// Impute, analyze each copy and pool with Rubin's rules. Same draws and
/// results as [`impute_monotone`] followed by [`analyze_completed`], without
/// materializing the copies.
pub fn mi_pipeline<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    threshold: &Threshold,
    config: &ImputationConfig,
    rng: &mut R,
) -> Result<MiEstimate> {
    config.validate()?;
    let strata = fit_strata(dataset, config.by_arm)?;
    let base: u64 = rng.random();
    let j = dataset.n_visits();
    let cfd = CounterfactualDesign::final_visit(dataset);
    let mut design = final_visit_design(&dichotomize(dataset, threshold), dataset)?;
    let n = dataset.n_subjects();
    if design.n_rows() != n {
        // Every subject enters each completed copy.
        let all: Vec<Vec<f64>> = dataset
            .subjects()
            .iter()
            .map(|s| vec![1.0, s.baseline(), s.arm.indicator()])
            .collect();
        design = Design::from_rows(&all, &vec![0.0; n], &(0..n).collect::<Vec<_>>(), &vec![0; n], 1)?;
        design.columns = vec!["intercept".into(), "baseline".into(), "trt".into()];
    }
    let mut rds = Vec::with_capacity(config.m);
    let mut lors = Vec::with_capacity(config.m);
    for c in 0..config.m {
        let values = impute_values(dataset, &strata, &mut copy_rng(base, c));
        for (yi, v) in design.y.iter_mut().zip(values.chunks(j)) {
            *yi = if threshold.success(v[j - 1]) { 1.0 } else { 0.0 };
        }
        let (rd, lor) = fit_and_standardize(&design, &cfd)?;
        rds.push(rd);
        lors.push(lor);
    }
    Ok(MiEstimate {
        rd: rubin_pool(&rds)?,
        log_or: rubin_pool(&lors)?,
    })
}
