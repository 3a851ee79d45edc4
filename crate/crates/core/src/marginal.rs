//! Marginal logistic model for the longitudinal binary panel.
//!
//! The fit solves the estimating equations `Σ_i D_i' V_i^{-1} (y_i - p_i) = 0`
//! with `V_i = A_i^{1/2} R A_i^{1/2}` by Fisher scoring (an IRLS step per
//! outer iteration). The unstructured working correlation `R` is re-estimated
//! each outer iteration from pairwise-complete Pearson residuals. If that fit
//! does not converge, or `R` is not positive definite, the model is refit with
//! an independence working correlation and `used_fallback` is set.
//!
//! Covariances: `cov_model = B^{-1}` and `cov_sandwich = B^{-1} M B^{-1}` with
//! `B = Σ D'V^{-1}D` and `M` the cluster-summed outer product of score
//! contributions.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{reciprocal_condition, spd_inverse, symmetrize};
use crate::trial::{expit, BinaryPanel, TrialDataset};
use crate::{Error, Result};

/// Coefficients beyond this magnitude (logit scale) are treated as separation.
pub const SEPARATION_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkingStructure {
    Unstructured,
    Independence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub working_structure: WorkingStructure,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            working_structure: WorkingStructure::Unstructured,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

impl ModelSpec {
    pub fn independence() -> Self {
        Self {
            working_structure: WorkingStructure::Independence,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Stacked design: observed rows grouped into contiguous per-subject clusters.
#[derive(Debug, Clone)]
pub struct Design {
    /// Row-major `n_rows x n_cols`.
    pub x: Vec<f64>,
    pub n_cols: usize,
    pub y: Vec<f64>,
    /// Working-correlation slot of each row.
    pub slot: Vec<usize>,
    pub n_slots: usize,
    pub clusters: Vec<Range<usize>>,
    pub columns: Vec<String>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.n_cols..(r + 1) * self.n_cols]
    }

    /// Builds a design from explicit rows; each cluster id run must be
    /// contiguous.
    pub fn from_rows(
        rows: &[Vec<f64>],
        y: &[f64],
        cluster_ids: &[usize],
        slots: &[usize],
        n_slots: usize,
    ) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Validation("design has no observed rows".into()));
        }
        if y.len() != n || cluster_ids.len() != n || slots.len() != n {
            return Err(Error::Domain("design inputs have different lengths".into()));
        }
        let n_cols = rows[0].len();
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Domain("ragged design rows".into()));
        }
        if slots.iter().any(|&s| s >= n_slots) {
            return Err(Error::Domain("slot index out of range".into()));
        }
        let mut clusters = Vec::new();
        let mut start = 0;
        for r in 1..=n {
            if r == n || cluster_ids[r] != cluster_ids[start] {
                clusters.push(start..r);
                start = r;
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &clusters {
            if !seen.insert(cluster_ids[c.start]) {
                return Err(Error::Domain("cluster rows must be contiguous".into()));
            }
        }
        Ok(Self {
            x: rows.iter().flatten().copied().collect(),
            n_cols,
            y: y.to_vec(),
            slot: slots.to_vec(),
            n_slots,
            clusters,
            columns: (0..n_cols).map(|c| format!("x{c}")).collect(),
        })
    }
}

/// Column layout of the longitudinal mean model for `n_visits` visits:
/// intercept, baseline, visit indicators 3..J (visit 2 is the reference),
/// treatment, treatment x visit 3..J.
#[derive(Debug, Clone, Copy)]
pub struct LongitudinalLayout {
    pub n_visits: usize,
}

impl LongitudinalLayout {
    pub fn n_cols(&self) -> usize {
        2 * self.n_visits - 1
    }

    /// Design row for a post-baseline `visit` (0-based slot index, >= 1).
    pub fn row(&self, baseline: f64, visit: usize, trt: f64) -> Vec<f64> {
        let j = self.n_visits;
        let mut row = vec![0.0; self.n_cols()];
        row[0] = 1.0;
        row[1] = baseline;
        row[j] = trt;
        if visit >= 2 {
            row[2 + visit - 2] = 1.0;
            row[j + 1 + visit - 2] = trt;
        }
        row
    }

    pub fn columns(&self) -> Vec<String> {
        let j = self.n_visits;
        let mut cols = vec!["intercept".to_string(), "baseline".to_string()];
        cols.extend((3..=j).map(|v| format!("visit{v}")));
        cols.push("trt".into());
        cols.extend((3..=j).map(|v| format!("trt:visit{v}")));
        cols
    }
}

/// One row per observed (subject, post-baseline visit).
pub fn build_design(panel: &BinaryPanel, dataset: &TrialDataset) -> Result<Design> {
    let j = dataset.n_visits();
    let layout = LongitudinalLayout { n_visits: j };
    let n_cols = layout.n_cols();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut slot = Vec::new();
    let mut clusters = Vec::new();
    for (s, row) in dataset.subjects().iter().zip(&panel.values) {
        let start = y.len();
        let base = s.baseline();
        let trt = s.arm.indicator();
        for (v, val) in row.iter().enumerate().skip(1) {
            if let Some(b) = val {
                x.extend(layout.row(base, v, trt));
                y.push(if *b { 1.0 } else { 0.0 });
                slot.push(v - 1);
            }
        }
        if y.len() > start {
            clusters.push(start..y.len());
        }
    }
    if y.is_empty() {
        return Err(Error::Validation("no observed post-baseline rows".into()));
    }
    Ok(Design {
        x,
        n_cols,
        y,
        slot,
        n_slots: j - 1,
        clusters,
        columns: layout.columns(),
    })
}

/// Final-visit logistic design: intercept, baseline, treatment; one row per
/// subject observed at the last visit.
pub fn final_visit_design(panel: &BinaryPanel, dataset: &TrialDataset) -> Result<Design> {
    let last = dataset.n_visits() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (s, row) in dataset.subjects().iter().zip(&panel.values) {
        if let Some(b) = row[last] {
            x.extend([1.0, s.baseline(), s.arm.indicator()]);
            y.push(if b { 1.0 } else { 0.0 });
        }
    }
    if y.is_empty() {
        return Err(Error::Validation("no subjects observed at the final visit".into()));
    }
    let n = y.len();
    Ok(Design {
        x,
        n_cols: 3,
        y,
        slot: vec![0; n],
        n_slots: 1,
        clusters: (0..n).map(|r| r..r + 1).collect(),
        columns: vec!["intercept".into(), "baseline".into(), "trt".into()],
    })
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub cov_model: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
    pub working_corr: DMatrix<f64>,
    pub converged: bool,
    pub used_fallback: bool,
    pub n_iter: usize,
}

pub fn predict_prob(fit: &FitResult, row: &[f64]) -> f64 {
    expit(row.iter().zip(fit.beta_hat.iter()).map(|(a, b)| a * b).sum())
}

/// Working correlation inverses for every observed-slot pattern met so far.
struct CorrInverses {
    /// `prefix[m]` inverts the leading `m x m` block.
    prefix: Vec<DMatrix<f64>>,
    corr: DMatrix<f64>,
}

impl CorrInverses {
    fn new(corr: DMatrix<f64>) -> Result<Self> {
        let n = corr.nrows();
        let mut prefix = vec![DMatrix::zeros(0, 0)];
        for m in 1..=n {
            prefix.push(spd_inverse(&corr.view((0, 0), (m, m)).into_owned())?);
        }
        Ok(Self { prefix, corr })
    }

    fn for_slots(&self, slots: &[usize]) -> Result<std::borrow::Cow<'_, DMatrix<f64>>> {
        if slots.iter().enumerate().all(|(i, &s)| i == s) {
            return Ok(std::borrow::Cow::Borrowed(&self.prefix[slots.len()]));
        }
        let m = slots.len();
        let sub = DMatrix::from_fn(m, m, |a, b| self.corr[(slots[a], slots[b])]);
        Ok(std::borrow::Cow::Owned(spd_inverse(&sub)?))
    }
}

struct Accumulated {
    bread: DMatrix<f64>,
    score: DVector<f64>,
    meat: DMatrix<f64>,
}

/// Singleton clusters: the working correlation is 1 and the estimating
/// equations reduce to ordinary logistic scoring.
fn accumulate_singletons(design: &Design, beta: &[f64], with_meat: bool) -> Accumulated {
    match design.n_cols {
        2 => singletons::<2>(design, beta, with_meat),
        3 => singletons::<3>(design, beta, with_meat),
        4 => singletons::<4>(design, beta, with_meat),
        _ => singletons_dyn(design, beta, with_meat),
    }
}

fn singletons<const P: usize>(design: &Design, beta: &[f64], with_meat: bool) -> Accumulated {
    let beta: [f64; P] = beta.try_into().expect("coefficient count");
    let mut bread = [[0.0; P]; P];
    let mut meat = [[0.0; P]; P];
    let mut score = [0.0; P];
    for (x, &y) in design.x.chunks_exact(P).zip(&design.y) {
        let x: &[f64; P] = x.try_into().expect("row width");
        let mut eta = 0.0;
        for c in 0..P {
            eta += x[c] * beta[c];
        }
        let prob = expit(eta).clamp(1e-12, 1.0 - 1e-12);
        let w = prob * (1.0 - prob);
        let resid = y - prob;
        let r2 = resid * resid;
        for c in 0..P {
            score[c] += resid * x[c];
            for d in 0..P {
                bread[c][d] += w * x[c] * x[d];
            }
        }
        if with_meat {
            for c in 0..P {
                for d in 0..P {
                    meat[c][d] += r2 * x[c] * x[d];
                }
            }
        }
    }
    Accumulated {
        bread: DMatrix::from_fn(P, P, |c, d| bread[c][d]),
        score: DVector::from_column_slice(&score),
        meat: DMatrix::from_fn(P, P, |c, d| meat[c][d]),
    }
}

fn singletons_dyn(design: &Design, beta: &[f64], with_meat: bool) -> Accumulated {
    let p = design.n_cols;
    let mut bread = vec![0.0; p * p];
    let mut score = vec![0.0; p];
    let mut meat = vec![0.0; p * p];
    for (x, &y) in design.x.chunks_exact(p).zip(&design.y) {
        let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        let prob = expit(eta).clamp(1e-12, 1.0 - 1e-12);
        let w = prob * (1.0 - prob);
        let resid = y - prob;
        for c in 0..p {
            score[c] += resid * x[c];
            for d in 0..p {
                bread[c * p + d] += w * x[c] * x[d];
                if with_meat {
                    meat[c * p + d] += resid * resid * x[c] * x[d];
                }
            }
        }
    }
    Accumulated {
        bread: DMatrix::from_row_slice(p, p, &bread),
        score: DVector::from_vec(score),
        meat: DMatrix::from_row_slice(p, p, &meat),
    }
}

fn accumulate(design: &Design, beta: &DVector<f64>, inv: &CorrInverses, with_meat: bool) -> Result<Accumulated> {
    if design.clusters.len() == design.n_rows() {
        return Ok(accumulate_singletons(design, beta.as_slice(), with_meat));
    }
    let p = design.n_cols;
    let mut bread = vec![0.0; p * p];
    let mut score = vec![0.0; p];
    let mut meat = vec![0.0; p * p];
    let mut sa = Vec::new();
    let mut r = Vec::new();
    // Rows of W X for the current cluster, W = S R^{-1} S.
    let mut wx = Vec::new();
    let mut si = vec![0.0; p];
    let beta = beta.as_slice();
    for cluster in &design.clusters {
        sa.clear();
        r.clear();
        for row in cluster.clone() {
            let eta: f64 = design.row(row).iter().zip(beta).map(|(a, b)| a * b).sum();
            let prob = expit(eta).clamp(1e-12, 1.0 - 1e-12);
            let s = (prob * (1.0 - prob)).sqrt();
            sa.push(s);
            r.push((design.y[row] - prob) / s);
        }
        let rinv = inv.for_slots(&design.slot[cluster.clone()])?;
        let m = cluster.len();
        wx.clear();
        wx.resize(m * p, 0.0);
        si.fill(0.0);
        for a in 0..m {
            let mut ua = 0.0;
            let out = &mut wx[a * p..(a + 1) * p];
            for b in 0..m {
                let rab = rinv[(a, b)];
                ua += rab * r[b];
                let w = sa[a] * rab * sa[b];
                if w == 0.0 {
                    continue;
                }
                for (o, xb) in out.iter_mut().zip(design.row(cluster.start + b)) {
                    *o += w * xb;
                }
            }
            let xa = design.row(cluster.start + a);
            let coef = sa[a] * ua;
            for (sc, xc) in si.iter_mut().zip(xa) {
                *sc += coef * xc;
            }
            for (c, &xc) in xa.iter().enumerate() {
                if xc == 0.0 {
                    continue;
                }
                for (bd, wd) in bread[c * p..(c + 1) * p].iter_mut().zip(out.iter()) {
                    *bd += xc * wd;
                }
            }
        }
        for (sc, v) in score.iter_mut().zip(&si) {
            *sc += v;
        }
        if with_meat {
            for c in 0..p {
                let sc = si[c];
                for (md, sd) in meat[c * p..(c + 1) * p].iter_mut().zip(&si) {
                    *md += sc * sd;
                }
            }
        }
    }
    let mut bread = DMatrix::from_row_slice(p, p, &bread);
    symmetrize(&mut bread);
    Ok(Accumulated {
        bread,
        score: DVector::from_vec(score),
        meat: DMatrix::from_row_slice(p, p, &meat),
    })
}

fn check_separation(beta: &DVector<f64>) -> Result<()> {
    if let Some((index, &value)) = beta
        .iter()
        .enumerate()
        .find(|(_, b)| !b.is_finite() || b.abs() > SEPARATION_LIMIT)
    {
        return Err(Error::Separation { index, value });
    }
    Ok(())
}

fn check_rank(design: &Design) -> Result<()> {
    let p = design.n_cols;
    if design.n_rows() < p {
        return Err(Error::RankDeficient(format!(
            "{} rows for {} coefficients",
            design.n_rows(),
            p
        )));
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    for r in 0..design.n_rows() {
        let x = design.row(r);
        for c in 0..p {
            for d in 0..p {
                xtx[(c, d)] += x[c] * x[d];
            }
        }
    }
    // Scale to unit diagonal so the test is invariant to covariate units.
    let diag: Vec<f64> = (0..p).map(|c| xtx[(c, c)].sqrt()).collect();
    if let Some(c) = diag.iter().position(|d| *d == 0.0) {
        return Err(Error::RankDeficient(format!(
            "column {} is identically zero",
            design.columns.get(c).map(String::as_str).unwrap_or("?")
        )));
    }
    let scaled = DMatrix::from_fn(p, p, |a, b| xtx[(a, b)] / (diag[a] * diag[b]));
    if reciprocal_condition(&scaled) < 1e-12 {
        return Err(Error::RankDeficient("columns are linearly dependent".into()));
    }
    Ok(())
}

/// Pairwise-complete moment estimate of the working correlation.
fn estimate_corr(design: &Design, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = design.n_slots;
    let mut cross = DMatrix::<f64>::zeros(k, k);
    let mut ss_row = DMatrix::<f64>::zeros(k, k);
    let mut ss_col = DMatrix::<f64>::zeros(k, k);
    let mut r = Vec::new();
    for cluster in &design.clusters {
        r.clear();
        for row in cluster.clone() {
            let eta: f64 = design.row(row).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let prob = expit(eta).clamp(1e-12, 1.0 - 1e-12);
            r.push((design.slot[row], (design.y[row] - prob) / (prob * (1.0 - prob)).sqrt()));
        }
        for &(sa, ra) in &r {
            for &(sb, rb) in &r {
                cross[(sa, sb)] += ra * rb;
                ss_row[(sa, sb)] += ra * ra;
                ss_col[(sa, sb)] += rb * rb;
            }
        }
    }
    let mut corr = DMatrix::<f64>::identity(k, k);
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let den = (ss_row[(a, b)] * ss_col[(a, b)]).sqrt();
            if den.is_nan() || den <= 0.0 {
                return Err(Error::NotPositiveDefinite);
            }
            corr[(a, b)] = (cross[(a, b)] / den).clamp(-1.0, 1.0);
        }
    }
    Ok(corr)
}

fn scoring_step(acc: &Accumulated) -> Result<DVector<f64>> {
    let chol = acc.bread.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient("information matrix is singular".into())
    })?;
    Ok(chol.solve(&acc.score))
}

fn finish(
    design: &Design,
    beta: DVector<f64>,
    inv: &CorrInverses,
    n_iter: usize,
    used_fallback: bool,
) -> Result<FitResult> {
    let acc = accumulate(design, &beta, inv, true)?;
    let bread_inv = spd_inverse(&acc.bread)
        .map_err(|_| Error::RankDeficient("information matrix is singular".into()))?;
    let mut cov_sandwich = &bread_inv * &acc.meat * &bread_inv;
    symmetrize(&mut cov_sandwich);
    Ok(FitResult {
        beta_hat: beta,
        cov_model: bread_inv,
        cov_sandwich,
        working_corr: inv.corr.clone(),
        converged: true,
        used_fallback,
        n_iter,
    })
}

fn fit_independence(design: &Design, spec: &ModelSpec, start: Option<&DVector<f64>>) -> Result<(DVector<f64>, usize)> {
    let inv = CorrInverses::new(DMatrix::identity(design.n_slots, design.n_slots))?;
    let mut beta = start.cloned().unwrap_or_else(|| DVector::zeros(design.n_cols));
    for iter in 1..=spec.max_iter {
        let acc = accumulate(design, &beta, &inv, false)?;
        let delta = scoring_step(&acc)?;
        beta += &delta;
        check_separation(&beta)?;
        if delta.amax() < spec.tol {
            return Ok((beta, iter));
        }
    }
    Err(Error::NonConvergence {
        iterations: spec.max_iter,
    })
}

fn fit_unstructured(design: &Design, spec: &ModelSpec, start: DVector<f64>) -> Result<FitResult> {
    let mut beta = start;
    for iter in 1..=spec.max_iter {
        let corr = estimate_corr(design, &beta)?;
        let inv = CorrInverses::new(corr)?;
        let acc = accumulate(design, &beta, &inv, false)?;
        let delta = scoring_step(&acc)?;
        beta += &delta;
        // The independence start already ruled out separation, so runaway
        // coefficients here mean the working-correlation iteration diverged.
        if check_separation(&beta).is_err() {
            return Err(Error::NonConvergence { iterations: iter });
        }
        if delta.amax() < spec.tol {
            return finish(design, beta, &inv, iter, false);
        }
    }
    Err(Error::NonConvergence {
        iterations: spec.max_iter,
    })
}

/// Fits the marginal logistic model; see the module docs.
pub fn fit_marginal_logistic(design: &Design, spec: &ModelSpec) -> Result<FitResult> {
    spec.validate()?;
    check_rank(design)?;
    let independence = || -> Result<FitResult> {
        let (beta, n_iter) = fit_independence(design, spec, None)?;
        let inv = CorrInverses::new(DMatrix::identity(design.n_slots, design.n_slots))?;
        finish(design, beta, &inv, n_iter, false)
    };
    match spec.working_structure {
        WorkingStructure::Independence => independence(),
        WorkingStructure::Unstructured => {
            let (start, _) = fit_independence(design, spec, None)?;
            match fit_unstructured(design, spec, start) {
                Ok(fit) => Ok(fit),
                Err(Error::NonConvergence { .. }) | Err(Error::NotPositiveDefinite) => {
                    let mut fit = independence()?;
                    fit.used_fallback = true;
                    Ok(fit)
                }
                Err(e) => Err(e),
            }
        }
    }
}
