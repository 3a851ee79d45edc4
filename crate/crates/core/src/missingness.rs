//! Monotone dropout under MCAR and MAR.
//!
//! Both mechanisms walk a retention indicator `R_t` forward: once a subject
//! is not retained at step `t`, visit `t + 1` and everything after it is
//! blanked. MAR retention at step 1 depends on the raw baseline; later steps
//! depend on the at-risk OLS residual of the current visit on baseline, with
//! separate multipliers for the two arms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::simple_ols;
use crate::trial::{expit, logit, Arm, SubjectRecord, TrialDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    Mcar,
    Mar,
}

impl Mechanism {
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::None => "NONE",
            Mechanism::Mcar => "MCAR",
            Mechanism::Mar => "MAR",
        }
    }
}

pub const MCAR_RETENTION: [f64; 5] = [0.97, 0.969, 0.958, 0.967, 0.977];
pub const MAR_BASE: [f64; 5] = [0.99, 0.969, 0.958, 0.967, 0.977];
pub const MAR_COEFF_TRT: [f64; 5] = [0.12, 0.5, 0.51, 0.52, 0.53];
pub const MAR_COEFF_CTL: [f64; 5] = [0.14, 0.7, 0.72, 0.74, 0.76];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub mechanism: Mechanism,
    #[serde(default = "default_retention")]
    pub conditional_retention: Vec<f64>,
    #[serde(default = "default_mar_base")]
    pub mar_base: Vec<f64>,
    #[serde(default = "default_coeff_trt")]
    pub mar_coeff_trt: Vec<f64>,
    #[serde(default = "default_coeff_ctl")]
    pub mar_coeff_ctl: Vec<f64>,
}

fn default_retention() -> Vec<f64> {
    MCAR_RETENTION.to_vec()
}
fn default_mar_base() -> Vec<f64> {
    MAR_BASE.to_vec()
}
fn default_coeff_trt() -> Vec<f64> {
    MAR_COEFF_TRT.to_vec()
}
fn default_coeff_ctl() -> Vec<f64> {
    MAR_COEFF_CTL.to_vec()
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::None,
            conditional_retention: default_retention(),
            mar_base: default_mar_base(),
            mar_coeff_trt: default_coeff_trt(),
            mar_coeff_ctl: default_coeff_ctl(),
        }
    }
}

impl DropoutConfig {
    pub fn none(n_visits: usize) -> Self {
        Self {
            mechanism: Mechanism::None,
            conditional_retention: vec![1.0; n_visits - 1],
            ..Self::default()
        }
    }

    pub fn mcar() -> Self {
        Self {
            mechanism: Mechanism::Mcar,
            ..Self::default()
        }
    }

    pub fn mar() -> Self {
        Self {
            mechanism: Mechanism::Mar,
            ..Self::default()
        }
    }

    /// MCAR with the same conditional retention at every step, chosen so the
    /// final-visit missing fraction equals `final_missing`.
    pub fn mcar_uniform(n_visits: usize, final_missing: f64) -> Self {
        let steps = (n_visits - 1) as f64;
        let r = (1.0 - final_missing).powf(1.0 / steps);
        Self {
            mechanism: Mechanism::Mcar,
            conditional_retention: vec![r; n_visits - 1],
            ..Self::default()
        }
    }

    pub fn validate(&self, n_visits: usize) -> Result<()> {
        let steps = n_visits - 1;
        let check_len = |name: &str, v: &[f64]| {
            if v.len() != steps {
                Err(Error::Config(format!(
                    "missingness.{name} must have {steps} entries, got {}",
                    v.len()
                )))
            } else {
                Ok(())
            }
        };
        let check_prob = |name: &str, v: &[f64]| {
            if v.iter().all(|p| *p > 0.0 && *p <= 1.0) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "missingness.{name} entries must lie in (0, 1]"
                )))
            }
        };
        match self.mechanism {
            Mechanism::None => Ok(()),
            Mechanism::Mcar => {
                check_len("conditional_retention", &self.conditional_retention)?;
                // A zero retention is allowed here: it is an absorbing dropout.
                if self.conditional_retention.iter().all(|p| (0.0..=1.0).contains(p)) {
                    Ok(())
                } else {
                    Err(Error::Config(
                        "missingness.conditional_retention entries must lie in [0, 1]".into(),
                    ))
                }
            }
            Mechanism::Mar => {
                check_len("mar_base", &self.mar_base)?;
                check_len("mar_coeff_trt", &self.mar_coeff_trt)?;
                check_len("mar_coeff_ctl", &self.mar_coeff_ctl)?;
                check_prob("mar_base", &self.mar_base)?;
                if self.mar_base.iter().any(|p| *p >= 1.0) {
                    return Err(Error::Config(
                        "missingness.mar_base entries must be below 1".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Residuals of the least-squares line of `y` on `x` with intercept.
pub fn ols_residuals(y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if y.len() != x.len() {
        return Err(Error::Domain("x and y lengths differ".into()));
    }
    if y.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "OLS needs at least 3 points, got {}",
            y.len()
        )));
    }
    let (a, b) = simple_ols(y, x)
        .ok_or_else(|| Error::Underdetermined("constant predictor in OLS".into()))?;
    Ok(y.iter().zip(x).map(|(yi, xi)| yi - (a + b * xi)).collect())
}

fn blank_after(subject: &mut SubjectRecord, last_kept: usize) {
    for v in subject.outcomes.iter_mut().skip(last_kept + 1) {
        *v = None;
    }
}

fn require_complete(dataset: &TrialDataset) -> Result<()> {
    if !dataset.is_complete() {
        return Err(Error::Validation(
            "dropout can only be applied to complete data".into(),
        ));
    }
    Ok(())
}

pub fn apply_mcar<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    config: &DropoutConfig,
    rng: &mut R,
) -> Result<TrialDataset> {
    require_complete(dataset)?;
    config.validate(dataset.n_visits())?;
    let mut subjects = dataset.subjects().to_vec();
    let mut at_risk: Vec<usize> = (0..subjects.len()).collect();
    for (step, &q) in config.conditional_retention.iter().enumerate() {
        let mut next = Vec::with_capacity(at_risk.len());
        for &i in &at_risk {
            if rng.random_bool(q) {
                next.push(i);
            } else {
                // Not retained at step `step + 1`: visit `step + 2` onward blank.
                blank_after(&mut subjects[i], step);
            }
        }
        at_risk = next;
    }
    Ok(TrialDataset::from_parts_unchecked(subjects, dataset.n_visits()))
}

pub fn apply_mar<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    config: &DropoutConfig,
    rng: &mut R,
) -> Result<TrialDataset> {
    require_complete(dataset)?;
    config.validate(dataset.n_visits())?;
    let mut subjects = dataset.subjects().to_vec();
    let value = |s: &SubjectRecord, v: usize| s.outcomes[v].expect("complete input");
    let mut at_risk: Vec<usize> = (0..subjects.len()).collect();
    let steps = dataset.n_visits() - 1;
    for step in 0..steps {
        let base = logit(config.mar_base[step])?;
        let (a, b) = (config.mar_coeff_trt[step], config.mar_coeff_ctl[step]);
        // Step 1 uses raw baseline, later steps the residual of the current
        // visit on baseline within the at-risk set.
        let drivers: Vec<f64> = if step == 0 {
            at_risk.iter().map(|&i| value(&subjects[i], 0)).collect()
        } else {
            if at_risk.len() < 3 {
                return Err(Error::Underdetermined(format!(
                    "at-risk set at dropout step {} has {} subjects",
                    step + 1,
                    at_risk.len()
                )));
            }
            let y: Vec<f64> = at_risk.iter().map(|&i| value(&subjects[i], step)).collect();
            let x: Vec<f64> = at_risk.iter().map(|&i| value(&subjects[i], 0)).collect();
            ols_residuals(&y, &x)?
        };
        let mut next = Vec::with_capacity(at_risk.len());
        for (&i, e) in at_risk.iter().zip(&drivers) {
            let coeff = match subjects[i].arm {
                Arm::Treatment => a,
                Arm::Control => b,
            };
            let p = expit(base - coeff * e);
            if rng.random_bool(p) {
                next.push(i);
            } else {
                blank_after(&mut subjects[i], step);
            }
        }
        at_risk = next;
    }
    Ok(TrialDataset::from_parts_unchecked(subjects, dataset.n_visits()))
}

/// Dispatches on the configured mechanism; `None` returns the data unchanged.
pub fn apply_dropout<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    config: &DropoutConfig,
    rng: &mut R,
) -> Result<TrialDataset> {
    match config.mechanism {
        Mechanism::None => Ok(dataset.clone()),
        Mechanism::Mcar => apply_mcar(dataset, config, rng),
        Mechanism::Mar => apply_mar(dataset, config, rng),
    }
}

/// Retention probability at MAR step 1 for a given baseline and arm.
pub fn mar_step1_retention(config: &DropoutConfig, baseline: f64, arm: Arm) -> Result<f64> {
    let coeff = match arm {
        Arm::Treatment => config.mar_coeff_trt[0],
        Arm::Control => config.mar_coeff_ctl[0],
    };
    Ok(expit(logit(config.mar_base[0])? - coeff * baseline))
}
