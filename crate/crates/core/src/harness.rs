//! Replicate engine and metrics.
//!
//! A replicate is fully determined by `(master_seed, replicate_index)`:
//! generate complete data, apply dropout, then run the marginal-model
//! ("GLMM") pipeline on the binary panel and the MI pipeline on the
//! continuous outcome. Replicates are the unit of parallelism.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::{true_values, CompleteGenerator, Family, ScenarioSpec, TrueValues};
use crate::estimands::{
    bootstrap_many, log_odds_ratio, risk_difference, BootstrapInterval, CounterfactualDesign,
    Estimand, EstimateRecord, Method,
};
use crate::exec::Execution;
use crate::imputation::{mi_pipeline, ImputationConfig};
use crate::marginal::{build_design, fit_marginal_logistic, ModelSpec};
use crate::missingness::{apply_dropout, Mechanism};
use crate::numfmt::sig17;
use crate::rng::{stream, Stage, StreamRng};
use crate::trial::{dichotomize, read_wide_csv, Threshold, TrialDataset};
use crate::{Error, Result};

pub const DEFAULT_REPLICATES: usize = 1000;
/// Bootstrap size used for empirical scenarios when `bootstrap_B` is unset.
pub const DEFAULT_EMPIRICAL_BOOTSTRAP: usize = 1000;

fn default_name() -> String {
    "scenario".into()
}
fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}
fn default_methods() -> Vec<Method> {
    vec![Method::Glmm, Method::Mi]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: ScenarioSpec,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Bootstrap resamples per replicate; `0` disables. Unset means off for
    /// parametric families and [`DEFAULT_EMPIRICAL_BOOTSTRAP`] for empirical.
    #[serde(rename = "bootstrap_B", default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_b: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub imputation: ImputationConfig,
    #[serde(default)]
    pub model: ModelSpec,
}

impl StudyConfig {
    pub fn new(name: impl Into<String>, scenario: ScenarioSpec, n_replicates: usize, master_seed: u64) -> Self {
        Self {
            name: name.into(),
            scenario,
            n_replicates,
            methods: default_methods(),
            bootstrap_b: None,
            master_seed: Some(master_seed),
            imputation: ImputationConfig::default(),
            model: ModelSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Effective bootstrap size, if bootstrap is on.
    pub fn bootstrap(&self) -> Option<usize> {
        match self.bootstrap_b {
            Some(0) => None,
            Some(b) => Some(b),
            None if self.scenario.family == Family::Empirical => Some(DEFAULT_EMPIRICAL_BOOTSTRAP),
            None => None,
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.master_seed
            .ok_or_else(|| Error::Config("master_seed is not set".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_replicates < 1 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::Config("methods must not repeat".into()));
        }
        if let Some(b) = self.bootstrap() {
            if b < 100 {
                return Err(Error::Config(format!("bootstrap_B must be 0 or >= 100, got {b}")));
            }
        }
        self.scenario.validate()?;
        self.imputation.validate()?;
        self.model.validate()
    }
}

/// Reads a TOML study config, loading `scenario.source_data` relative to the
/// config file.
pub fn load_study_config(path: impl AsRef<Path>) -> Result<StudyConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = StudyConfig::from_toml(&text)?;
    if let Some(src) = &config.scenario.source_data {
        let resolved: PathBuf = if src.is_absolute() {
            src.clone()
        } else {
            path.parent().unwrap_or(Path::new(".")).join(src)
        };
        let data = read_wide_csv(&resolved)?;
        config.scenario.source = Some(Arc::new(data));
    }
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub rd: EstimateRecord,
    pub log_or: EstimateRecord,
    pub boot: Option<[BootstrapInterval; 2]>,
}

impl MethodOutcome {
    pub fn record(&self, estimand: Estimand) -> &EstimateRecord {
        match estimand {
            Estimand::Rd => &self.rd,
            Estimand::LogOr => &self.log_or,
        }
    }

    pub fn boot_interval(&self, estimand: Estimand) -> Option<&BootstrapInterval> {
        self.boot.as_ref().map(|b| match estimand {
            Estimand::Rd => &b[0],
            Estimand::LogOr => &b[1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: u64,
    pub final_missing: f64,
    pub results: Vec<(Method, std::result::Result<MethodOutcome, String>)>,
}

impl ReplicateOutcome {
    pub fn method(&self, method: Method) -> Option<&std::result::Result<MethodOutcome, String>> {
        self.results.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }
}

/// Marginal logistic fit on the longitudinal binary panel, standardized at
/// the final visit with sandwich covariance.
pub fn glmm_pipeline(dataset: &TrialDataset, threshold: &Threshold, model: &ModelSpec) -> Result<(EstimateRecord, EstimateRecord)> {
    let panel = dichotomize(dataset, threshold);
    let design = build_design(&panel, dataset)?;
    let fit = fit_marginal_logistic(&design, model)?;
    let cfd = CounterfactualDesign::longitudinal(dataset);
    let mut rd = risk_difference(&fit.beta_hat, &fit.cov_sandwich, &cfd, Method::Glmm)?;
    let mut lor = log_odds_ratio(&fit.beta_hat, &fit.cov_sandwich, &cfd, Method::Glmm)?;
    rd.used_fallback = fit.used_fallback;
    lor.used_fallback = fit.used_fallback;
    Ok((rd, lor))
}

/// Runs one method on one incomplete dataset.
pub fn run_method(
    method: Method,
    dataset: &TrialDataset,
    threshold: &Threshold,
    imputation: &ImputationConfig,
    model: &ModelSpec,
    rng: &mut StreamRng,
) -> Result<(EstimateRecord, EstimateRecord)> {
    match method {
        Method::Glmm => glmm_pipeline(dataset, threshold, model),
        Method::Mi => {
            let est = mi_pipeline(dataset, threshold, imputation, rng)?;
            Ok((est.rd, est.log_or))
        }
    }
}

/// Point estimates plus optional bootstrap intervals for one method.
#[allow(clippy::too_many_arguments)]
pub fn analyze_method(
    method: Method,
    dataset: &TrialDataset,
    threshold: &Threshold,
    imputation: &ImputationConfig,
    model: &ModelSpec,
    bootstrap: Option<usize>,
    rng: &mut StreamRng,
    boot_rng: &mut StreamRng,
    exec: Execution,
) -> Result<MethodOutcome> {
    let (rd, log_or) = run_method(method, dataset, threshold, imputation, model, rng)?;
    let boot = match bootstrap {
        None => None,
        Some(b) => {
            let out = bootstrap_many(
                dataset,
                |d, r| {
                    let (rd, lor) = run_method(method, d, threshold, imputation, model, r)?;
                    Ok(vec![rd.estimate, lor.estimate])
                },
                b,
                boot_rng,
                exec,
            )?;
            Some([out[0], out[1]])
        }
    };
    Ok(MethodOutcome { rd, log_or, boot })
}

/// A validated config with its generator and truth prepared once.
#[derive(Debug, Clone)]
pub struct Study {
    config: StudyConfig,
    seed: u64,
    generator: CompleteGenerator,
    truth: TrueValues,
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed()?;
        let generator = CompleteGenerator::new(&config.scenario)?;
        let truth = true_values(&config.scenario)?;
        Ok(Self {
            config,
            seed,
            generator,
            truth,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn truth(&self) -> &TrueValues {
        &self.truth
    }

    /// Incomplete dataset of replicate `index`.
    pub fn replicate_data(&self, index: u64) -> Result<TrialDataset> {
        let spec = &self.config.scenario;
        let complete = self
            .generator
            .generate(spec, &mut stream(self.seed, index, Stage::Data))?;
        apply_dropout(&complete, &spec.missingness, &mut stream(self.seed, index, Stage::Dropout))
    }

    pub fn run_replicate(&self, index: u64) -> ReplicateOutcome {
        self.run_replicate_with(index, Execution::Sequential)
    }

    /// `exec` drives the bootstrap resamples inside this replicate.
    pub fn run_replicate_with(&self, index: u64, exec: Execution) -> ReplicateOutcome {
        let data = match self.replicate_data(index) {
            Ok(d) => d,
            Err(e) => {
                let msg = e.to_string();
                return ReplicateOutcome {
                    index,
                    final_missing: f64::NAN,
                    results: self.config.methods.iter().map(|m| (*m, Err(msg.clone()))).collect(),
                };
            }
        };
        let last = data.n_visits() - 1;
        let cfg = &self.config;
        let results = cfg
            .methods
            .iter()
            .map(|&method| {
                let boot_stage = match method {
                    Method::Glmm => Stage::BootstrapGlmm,
                    Method::Mi => Stage::BootstrapMi,
                };
                let out = analyze_method(
                    method,
                    &data,
                    &cfg.scenario.threshold,
                    &cfg.imputation,
                    &cfg.model,
                    cfg.bootstrap(),
                    &mut stream(self.seed, index, Stage::Imputation),
                    &mut stream(self.seed, index, boot_stage),
                    exec,
                )
                .map_err(|e| e.to_string());
                (method, out)
            })
            .collect();
        ReplicateOutcome {
            index,
            final_missing: data.missing_fraction(last),
            results,
        }
    }

    pub fn run_replicates(&self, exec: Execution) -> Vec<ReplicateOutcome> {
        exec.map(self.config.n_replicates, |i| self.run_replicate(i as u64))
    }

    pub fn run(&self, exec: Execution) -> MetricsSummary {
        summarize(&self.config, &self.truth, &self.run_replicates(exec))
    }
}

/// Deterministic replicate given `(config.master_seed, index)`.
pub fn run_replicate(config: &StudyConfig, index: u64) -> Result<ReplicateOutcome> {
    Ok(Study::new(config.clone())?.run_replicate(index))
}

pub fn run_study(config: &StudyConfig, exec: Execution) -> Result<MetricsSummary> {
    Ok(Study::new(config.clone())?.run(exec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub estimand: Estimand,
    pub bias: Option<f64>,
    pub var: Option<f64>,
    pub evar: Option<f64>,
    pub cp: Option<f64>,
    pub cp_b: Option<f64>,
    /// MSE(GLMM) / MSE(MI); set on MI rows when both methods ran.
    pub rmse_ratio: Option<f64>,
    pub mse: Option<f64>,
    /// Mean bootstrap variance across replicates.
    pub boot_var: Option<f64>,
    pub n_ok: usize,
    pub n_fallback: usize,
    pub n_fail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub scenario: String,
    pub family: Family,
    pub missing: Mechanism,
    pub truth: TrueValues,
    pub n_replicates: usize,
    /// Mean final-visit missing fraction across replicates.
    pub final_missing_rate: f64,
    pub rows: Vec<MetricRow>,
}

impl MetricsSummary {
    pub fn row(&self, method: Method, estimand: Estimand) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.estimand == estimand)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_var(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

fn truth_of(truth: &TrueValues, estimand: Estimand) -> f64 {
    match estimand {
        Estimand::Rd => truth.rd,
        Estimand::LogOr => truth.log_or,
    }
}

pub fn summarize(config: &StudyConfig, truth: &TrueValues, outcomes: &[ReplicateOutcome]) -> MetricsSummary {
    let mut rows = Vec::new();
    for &method in &config.methods {
        let ok: Vec<&MethodOutcome> = outcomes
            .iter()
            .filter_map(|o| o.method(method).and_then(|r| r.as_ref().ok()))
            .collect();
        let n_fail = outcomes.len() - ok.len();
        let n_fallback = ok.iter().filter(|o| o.rd.used_fallback).count();
        for estimand in Estimand::ALL {
            let t = truth_of(truth, estimand);
            let recs: Vec<&EstimateRecord> = ok.iter().map(|o| o.record(estimand)).collect();
            let est: Vec<f64> = recs.iter().map(|r| r.estimate).collect();
            let vars: Vec<f64> = recs.iter().map(|r| r.variance).collect();
            let covered: Vec<f64> = recs.iter().map(|r| f64::from(u8::from(r.covers(t)))).collect();
            let sq: Vec<f64> = est.iter().map(|e| (e - t).powi(2)).collect();
            let boots: Vec<&BootstrapInterval> = ok.iter().filter_map(|o| o.boot_interval(estimand)).collect();
            let cp_b = mean(&boots.iter().map(|b| f64::from(u8::from(b.covers(t)))).collect::<Vec<_>>());
            let boot_var = mean(&boots.iter().map(|b| b.variance).collect::<Vec<_>>());
            rows.push(MetricRow {
                method,
                estimand,
                bias: mean(&est).map(|m| m - t),
                var: sample_var(&est),
                evar: mean(&vars),
                cp: mean(&covered),
                cp_b,
                rmse_ratio: None,
                mse: mean(&sq),
                boot_var,
                n_ok: ok.len(),
                n_fallback,
                n_fail,
            });
        }
    }
    for estimand in Estimand::ALL {
        let mse = |m: Method| {
            rows.iter()
                .find(|r| r.method == m && r.estimand == estimand)
                .and_then(|r| r.mse)
        };
        if let (Some(g), Some(mi)) = (mse(Method::Glmm), mse(Method::Mi)) {
            if let Some(row) = rows.iter_mut().find(|r| r.method == Method::Mi && r.estimand == estimand) {
                row.rmse_ratio = (mi > 0.0).then_some(g / mi);
            }
        }
    }
    let missing: Vec<f64> = outcomes
        .iter()
        .map(|o| o.final_missing)
        .filter(|v| v.is_finite())
        .collect();
    MetricsSummary {
        scenario: config.name.clone(),
        family: config.scenario.family,
        missing: config.scenario.missingness.mechanism,
        truth: *truth,
        n_replicates: outcomes.len(),
        final_missing_rate: mean(&missing).unwrap_or(f64::NAN),
        rows,
    }
}

/// Writes summaries as pretty JSON; floats round-trip exactly.
pub fn write_summaries(summaries: &[MetricsSummary], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(summaries).expect("summaries serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_summaries`] (a single object is accepted too).
pub fn read_summaries(path: impl AsRef<Path>) -> Result<Vec<MetricsSummary>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    };
    parsed.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
        }
    }
}

pub const TABLE_COLUMNS: [&str; 12] = [
    "scenario", "missing", "method", "estimand", "bias", "var", "evar", "cp", "cp_b",
    "rmse_ratio", "n_fallback", "n_fail",
];

enum Cell {
    Text(String),
    Num(Option<f64>),
    Int(usize),
}

fn table_cells(s: &MetricsSummary, r: &MetricRow) -> Vec<Cell> {
    vec![
        Cell::Text(s.scenario.clone()),
        Cell::Text(s.missing.label().into()),
        Cell::Text(r.method.label().into()),
        Cell::Text(r.estimand.label().into()),
        Cell::Num(r.bias),
        Cell::Num(r.var),
        Cell::Num(r.evar),
        Cell::Num(r.cp),
        Cell::Num(r.cp_b),
        Cell::Num(r.rmse_ratio),
        Cell::Int(r.n_fallback),
        Cell::Int(r.n_fail),
    ]
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn json_num(x: f64) -> String {
    if x.is_finite() {
        sig17(x)
    } else {
        "null".into()
    }
}

/// One row per (scenario, method, estimand); numbers carry 17 significant
/// digits in both formats and absent values are empty (CSV) or null (JSON).
pub fn emit_tables(summaries: &[MetricsSummary], format: TableFormat) -> String {
    let rows: Vec<Vec<Cell>> = summaries
        .iter()
        .flat_map(|s| s.rows.iter().map(move |r| table_cells(s, r)))
        .collect();
    match format {
        TableFormat::Csv => {
            let mut out = TABLE_COLUMNS.join(",");
            out.push('\n');
            for row in rows {
                let cells: Vec<String> = row
                    .into_iter()
                    .map(|c| match c {
                        Cell::Text(t) => csv_text(&t),
                        Cell::Num(Some(x)) if x.is_finite() => sig17(x),
                        Cell::Num(_) => String::new(),
                        Cell::Int(n) => n.to_string(),
                    })
                    .collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            out
        }
        TableFormat::Json => {
            let objs: Vec<String> = rows
                .into_iter()
                .map(|row| {
                    let fields: Vec<String> = TABLE_COLUMNS
                        .iter()
                        .zip(row)
                        .map(|(k, c)| {
                            let v = match c {
                                Cell::Text(t) => serde_json::to_string(&t).expect("string"),
                                Cell::Num(Some(x)) => json_num(x),
                                Cell::Num(None) => "null".into(),
                                Cell::Int(n) => n.to_string(),
                            };
                            format!("\"{k}\":{v}")
                        })
                        .collect();
                    format!("  {{{}}}", fields.join(","))
                })
                .collect();
            if objs.is_empty() {
                "[]\n".into()
            } else {
                format!("[\n{}\n]\n", objs.join(",\n"))
            }
        }
    }
}

pub fn write_tables(summaries: &[MetricsSummary], format: TableFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, emit_tables(summaries, format)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub scenario: String,
    pub missing_rate: f64,
    pub ratio_rd: f64,
    pub ratio_log_or: f64,
    /// `bootstrap` when both methods carried bootstrap variances, otherwise
    /// `empirical` (replicate variance).
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatioReport {
    pub points: Vec<RatioPoint>,
    pub fit_rd: LineFit,
    pub fit_log_or: LineFit,
}

fn line_fit(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    // Identical missing rates carry no slope information.
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    LineFit {
        intercept: my - slope * mx,
        slope,
    }
}

fn variance_ratio(s: &MetricsSummary, estimand: Estimand) -> Option<(f64, &'static str)> {
    let g = s.row(Method::Glmm, estimand)?;
    let m = s.row(Method::Mi, estimand)?;
    match (g.boot_var, m.boot_var) {
        (Some(a), Some(b)) if b > 0.0 => Some((a / b, "bootstrap")),
        _ => match (g.var, m.var) {
            (Some(a), Some(b)) if b > 0.0 => Some((a / b, "empirical")),
            _ => None,
        },
    }
}

/// GLMM/MI variance ratio against final-visit missing rate, with OLS lines.
pub fn variance_ratio_report(summaries: &[MetricsSummary]) -> Result<VarianceRatioReport> {
    if summaries.len() < 2 {
        return Err(Error::Underdetermined(format!(
            "variance ratio regression needs at least 2 scenarios, got {}",
            summaries.len()
        )));
    }
    let points = summaries
        .iter()
        .map(|s| {
            let (rd, src) = variance_ratio(s, Estimand::Rd).ok_or_else(|| {
                Error::Validation(format!("scenario {} lacks GLMM and MI variances", s.scenario))
            })?;
            let (lor, _) = variance_ratio(s, Estimand::LogOr).ok_or_else(|| {
                Error::Validation(format!("scenario {} lacks GLMM and MI variances", s.scenario))
            })?;
            Ok(RatioPoint {
                scenario: s.scenario.clone(),
                missing_rate: s.final_missing_rate,
                ratio_rd: rd,
                ratio_log_or: lor,
                source: src.into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = points.iter().map(|p| p.missing_rate).collect();
    let rd: Vec<f64> = points.iter().map(|p| p.ratio_rd).collect();
    let lor: Vec<f64> = points.iter().map(|p| p.ratio_log_or).collect();
    Ok(VarianceRatioReport {
        fit_rd: line_fit(&x, &rd),
        fit_log_or: line_fit(&x, &lor),
        points,
    })
}

impl VarianceRatioReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,missing_rate,ratio_rd,ratio_log_or,source\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_text(&p.scenario),
                sig17(p.missing_rate),
                sig17(p.ratio_rd),
                sig17(p.ratio_log_or),
                p.source
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::DropoutConfig;

    fn small_config(n: usize) -> StudyConfig {
        let mut scenario = ScenarioSpec::reference(Family::Mvnormal);
        scenario.n_per_arm = Some(100);
        scenario.missingness = DropoutConfig::mcar();
        StudyConfig::new("normal_mcar", scenario, n, 7)
    }

    #[test]
    fn replicate_is_deterministic() {
        let cfg = small_config(3);
        let a = run_replicate(&cfg, 2).unwrap();
        let b = run_replicate(&cfg, 2).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.results.len(), 2);
        assert!(a.results.iter().all(|(_, r)| r.is_ok()));
    }

    #[test]
    fn no_missingness_means_no_between_variance() {
        let mut cfg = small_config(1);
        cfg.scenario.missingness = DropoutConfig::none(6);
        let out = run_replicate(&cfg, 0).unwrap();
        let mi = out.method(Method::Mi).unwrap().as_ref().unwrap();
        assert_eq!(mi.rd.df, None);
        assert_eq!(out.final_missing, 0.0);
    }

    #[test]
    fn single_replicate_has_no_variance() {
        let s = run_study(&small_config(1), Execution::Sequential).unwrap();
        let row = s.row(Method::Glmm, Estimand::Rd).unwrap();
        assert_eq!(row.var, None);
        assert!(row.bias.is_some());
        let csv = emit_tables(&[s], TableFormat::Csv);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line.split(',').nth(5), Some(""));
    }

    #[test]
    fn failure_accounting_adds_up() {
        let s = run_study(&small_config(8), Execution::Sequential).unwrap();
        for r in &s.rows {
            assert_eq!(r.n_ok + r.n_fail, 8);
            if let Some(cp) = r.cp {
                assert!((0.0..=1.0).contains(&cp));
            }
        }
        assert!(s.row(Method::Mi, Estimand::Rd).unwrap().rmse_ratio.is_some());
        assert!(s.row(Method::Glmm, Estimand::Rd).unwrap().rmse_ratio.is_none());
    }

    #[test]
    fn rmse_ratio_absent_for_single_method() {
        let mut cfg = small_config(3);
        cfg.methods = vec![Method::Mi];
        let s = run_study(&cfg, Execution::Sequential).unwrap();
        assert!(s.rows.iter().all(|r| r.rmse_ratio.is_none()));
        assert_eq!(s.rows.len(), 2);
    }

    #[test]
    fn table_shapes() {
        let s = run_study(&small_config(3), Execution::Sequential).unwrap();
        let csv = emit_tables(std::slice::from_ref(&s), TableFormat::Csv);
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().next().unwrap(), TABLE_COLUMNS.join(","));
        let json = emit_tables(std::slice::from_ref(&s), TableFormat::Json);
        let parsed: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.len(), 4);
        // Same digits in both encodings.
        for (line, obj) in csv.lines().skip(1).zip(&parsed) {
            let bias_csv: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
            assert_eq!(bias_csv.to_bits(), obj["bias"].as_f64().unwrap().to_bits());
        }
        assert_eq!(emit_tables(&[], TableFormat::Csv), format!("{}\n", TABLE_COLUMNS.join(",")));
        assert_eq!(emit_tables(&[], TableFormat::Json), "[]\n");
    }

    #[test]
    fn schedule_independence() {
        let cfg = small_config(50);
        let a = run_study(&cfg, Execution::Sequential).unwrap();
        let b = run_study(&cfg, Execution::Parallel).unwrap();
        assert_eq!(emit_tables(&[a], TableFormat::Csv), emit_tables(&[b], TableFormat::Csv));
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let text = r#"
name = "normal_mcar"
n_replicates = 10
master_seed = 3
methods = ["glmm", "mi"]

[scenario]
family = "mvnormal"
mu0 = [8.5, 7.9, 7.2, 7.1, 7.1, 7.2]
mu1 = [8.5, 8.0, 7.1, 6.8, 6.8, 6.9]
sigma = [1.02, 0.96, 0.79, 0.84, 0.91, 0.95]
corr_decay = 0.8
n_per_arm = 200

[scenario.threshold]
lambda = 7.0
comparison = "strict_less"

[scenario.missingness]
mechanism = "mcar"
"#;
        let cfg = StudyConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.scenario.missingness.conditional_retention, vec![0.97, 0.969, 0.958, 0.967, 0.977]);
        assert_eq!(cfg.bootstrap(), None);
        let bad = text.replace("corr_decay = 0.8", "corr_decay = 0.8\nrho = 0.8");
        let err = StudyConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("rho"), "{err}");
        let zero = text.replace("n_replicates = 10", "n_replicates = 0");
        assert!(StudyConfig::from_toml(&zero).unwrap().validate().is_err());
    }

    fn fake_summary(name: &str, rate: f64, var_glmm: f64) -> MetricsSummary {
        let row = |method, estimand, var| MetricRow {
            method,
            estimand,
            bias: Some(0.0),
            var: Some(var),
            evar: Some(var),
            cp: Some(0.95),
            cp_b: None,
            rmse_ratio: None,
            mse: Some(var),
            boot_var: None,
            n_ok: 10,
            n_fallback: 0,
            n_fail: 0,
        };
        MetricsSummary {
            scenario: name.into(),
            family: Family::Mvnormal,
            missing: Mechanism::Mcar,
            truth: TrueValues { p0: 0.4, p1: 0.5, rd: 0.1, log_or: 0.4, visit: 6 },
            n_replicates: 10,
            final_missing_rate: rate,
            rows: vec![
                row(Method::Glmm, Estimand::Rd, var_glmm),
                row(Method::Glmm, Estimand::LogOr, var_glmm),
                row(Method::Mi, Estimand::Rd, 1.0),
                row(Method::Mi, Estimand::LogOr, 1.0),
            ],
        }
    }

    #[test]
    fn ratio_report_cases() {
        let same = [fake_summary("a", 0.15, 1.2), fake_summary("b", 0.15, 1.2)];
        let rep = variance_ratio_report(&same).unwrap();
        assert_eq!(rep.fit_rd.slope, 0.0);
        let trend = [
            fake_summary("a", 0.05, 1.05),
            fake_summary("b", 0.15, 1.15),
            fake_summary("c", 0.25, 1.25),
        ];
        let rep = variance_ratio_report(&trend).unwrap();
        assert!((rep.fit_rd.slope - 1.0).abs() < 1e-12);
        assert!(variance_ratio_report(&trend[..1]).is_err());
    }
}
