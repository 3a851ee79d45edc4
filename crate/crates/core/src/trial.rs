//! Domain types shared by every pipeline: wide-format longitudinal datasets,
//! dichotomization thresholds, binary panels, link functions and CSV I/O.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numfmt::sig17;
use crate::{Error, Result};

/// Treatment arm. `Control` is k = 0, `Treatment` is k = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub fn indicator(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Treatment => 1.0,
        }
    }

    pub fn from_indicator(k: u8) -> Option<Self> {
        match k {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treatment),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Treatment => "treatment",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: Arc<str>,
    pub arm: Arm,
    /// One slot per visit; slot 0 is baseline.
    pub outcomes: Vec<Option<f64>>,
}

impl SubjectRecord {
    pub fn complete(id: impl Into<Arc<str>>, arm: Arm, values: &[f64]) -> Self {
        Self {
            id: id.into(),
            arm,
            outcomes: values.iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn baseline(&self) -> f64 {
        self.outcomes[0].expect("baseline is never missing")
    }

    /// Number of observed slots (monotone, so the observed cells form a prefix).
    pub fn n_observed(&self) -> usize {
        self.outcomes.iter().take_while(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.outcomes.iter().all(Option::is_some)
    }
}

/// Wide-format longitudinal dataset with monotone missingness and a
/// never-missing baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    subjects: Vec<SubjectRecord>,
    n_visits: usize,
}

impl TrialDataset {
    pub fn new(subjects: Vec<SubjectRecord>, n_visits: usize) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Validation("no subjects".into()));
        }
        if n_visits < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 visits, got {n_visits}"
            )));
        }
        for s in &subjects {
            validate_subject(s, n_visits)?;
        }
        Ok(Self { subjects, n_visits })
    }

    /// Skips validation; callers guarantee the invariants (used on hot paths
    /// that only blank trailing cells or copy validated subjects).
    pub(crate) fn from_parts_unchecked(subjects: Vec<SubjectRecord>, n_visits: usize) -> Self {
        debug_assert!(subjects.iter().all(|s| validate_subject(s, n_visits).is_ok()));
        Self { subjects, n_visits }
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn into_subjects(self) -> Vec<SubjectRecord> {
        self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_visits(&self) -> usize {
        self.n_visits
    }

    pub fn is_complete(&self) -> bool {
        self.subjects.iter().all(SubjectRecord::is_complete)
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.subjects.iter().filter(|s| s.arm == arm).count()
    }

    /// Fraction of subjects missing at `visit` (0-based slot).
    pub fn missing_fraction(&self, visit: usize) -> f64 {
        let missing = self
            .subjects
            .iter()
            .filter(|s| s.outcomes[visit].is_none())
            .count();
        missing as f64 / self.subjects.len() as f64
    }

    /// Checks that both arms are present.
    pub fn require_both_arms(&self) -> Result<()> {
        for arm in [Arm::Control, Arm::Treatment] {
            if self.arm_count(arm) == 0 {
                return Err(Error::Validation(format!(
                    "dataset has no subjects in the {} arm",
                    arm.name()
                )));
            }
        }
        Ok(())
    }
}

fn validate_subject(s: &SubjectRecord, n_visits: usize) -> Result<()> {
    if s.outcomes.len() != n_visits {
        return Err(Error::Validation(format!(
            "subject {}: expected {} outcome slots, found {}",
            s.id,
            n_visits,
            s.outcomes.len()
        )));
    }
    match s.outcomes[0] {
        None => {
            return Err(Error::Validation(format!(
                "subject {}: baseline is missing",
                s.id
            )))
        }
        Some(v) if !v.is_finite() => {
            return Err(Error::Validation(format!(
                "subject {}: non-finite baseline",
                s.id
            )))
        }
        _ => {}
    }
    let mut seen_missing = false;
    for v in &s.outcomes {
        match v {
            None => seen_missing = true,
            Some(_) if seen_missing => {
                return Err(Error::Validation(format!(
                    "subject {}: non-monotone missingness",
                    s.id
                )))
            }
            Some(x) if !x.is_finite() => {
                return Err(Error::Validation(format!(
                    "subject {}: non-finite outcome",
                    s.id
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Success is `C < lambda`.
    StrictLess,
    /// Success is `C <= lambda`.
    LessOrEqual,
}

/// Clinical threshold; lower outcomes are successes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub lambda: f64,
    pub comparison: Comparison,
}

impl Threshold {
    pub fn new(lambda: f64, comparison: Comparison) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::Domain(format!("threshold {lambda} is not finite")));
        }
        Ok(Self { lambda, comparison })
    }

    pub fn strict(lambda: f64) -> Self {
        Self {
            lambda,
            comparison: Comparison::StrictLess,
        }
    }

    #[inline]
    pub fn success(&self, c: f64) -> bool {
        match self.comparison {
            Comparison::StrictLess => c < self.lambda,
            Comparison::LessOrEqual => c <= self.lambda,
        }
    }
}

/// n x J matrix of optional binary responses.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPanel {
    pub values: Vec<Vec<Option<bool>>>,
}

pub fn dichotomize(dataset: &TrialDataset, threshold: &Threshold) -> BinaryPanel {
    let values = dataset
        .subjects()
        .iter()
        .map(|s| {
            s.outcomes
                .iter()
                .map(|v| v.map(|c| threshold.success(c)))
                .collect()
        })
        .collect();
    BinaryPanel { values }
}

pub fn logit(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(Error::Domain(format!("logit undefined at p = {p}")))
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn read_wide_csv(path: impl AsRef<Path>) -> Result<TrialDataset> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_wide_csv(&text)
}

/// Parses `subject_id,trt,y1,...,yJ` with empty fields as missing.
pub fn parse_wide_csv(text: &str) -> Result<TrialDataset> {
    if text.trim().is_empty() {
        return Err(Error::Validation("no subjects".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "subject_id" || &headers[1] != "trt" {
        return Err(Error::Validation(
            "header must be subject_id,trt,y1,...,yJ with J >= 2".into(),
        ));
    }
    for (j, h) in headers.iter().skip(2).enumerate() {
        if h != format!("y{}", j + 1) {
            return Err(Error::Validation(format!(
                "unexpected column {h:?}, expected y{}",
                j + 1
            )));
        }
    }
    let n_visits = headers.len() - 2;
    let mut subjects = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let id = rec[0].to_string();
        let arm = match &rec[1] {
            "0" => Arm::Control,
            "1" => Arm::Treatment,
            other => {
                return Err(Error::Validation(format!(
                    "subject {id} (row {}): trt must be 0 or 1, got {other:?}",
                    line + 2
                )))
            }
        };
        let outcomes = rec
            .iter()
            .skip(2)
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| {
                        Error::Validation(format!("subject {id}: cannot parse value {f:?}"))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        subjects.push(SubjectRecord {
            id: id.into(),
            arm,
            outcomes,
        });
    }
    TrialDataset::new(subjects, n_visits)
}

pub fn write_wide_csv(dataset: &TrialDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_wide_csv(dataset).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn to_wide_csv(dataset: &TrialDataset) -> String {
    let mut out = String::from("subject_id,trt");
    for j in 1..=dataset.n_visits() {
        out.push_str(&format!(",y{j}"));
    }
    out.push('\n');
    for s in dataset.subjects() {
        out.push_str(&s.id);
        out.push(',');
        out.push_str(&s.arm.code().to_string());
        for v in &s.outcomes {
            out.push(',');
            if let Some(x) = v {
                out.push_str(&sig17(*x));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dichotomize_boundaries() {
        let lt = Threshold::strict(7.0);
        assert!(lt.success(6.9));
        assert!(!lt.success(7.0));
        let le = Threshold::new(6.5, Comparison::LessOrEqual).unwrap();
        assert!(le.success(6.5));
    }

    #[test]
    fn dichotomize_preserves_mask() {
        let subjects = (0..100)
            .map(|i| {
                let mut out = vec![Some(7.5), Some(7.0), Some(6.0), Some(6.8), Some(7.2), Some(6.9)];
                if i % 7 == 0 {
                    out[5] = None;
                }
                SubjectRecord {
                    id: format!("s{i}").into(),
                    arm: Arm::Control,
                    outcomes: out,
                }
            })
            .collect();
        let ds = TrialDataset::new(subjects, 6).unwrap();
        let panel = dichotomize(&ds, &Threshold::strict(7.0));
        for (s, row) in ds.subjects().iter().zip(&panel.values) {
            for (c, y) in s.outcomes.iter().zip(row) {
                assert_eq!(c.is_none(), y.is_none());
            }
            assert_eq!(row[2], Some(true));
            assert_eq!(row[1], Some(false));
        }
    }

    #[test]
    fn link_functions() {
        assert_eq!(expit(0.0), 0.5);
        assert!((expit(logit(0.99).unwrap()) - 0.99).abs() < 1e-12);
        assert!((logit(0.97).unwrap() - 3.4761).abs() < 5e-5);
        assert!(logit(0.0).is_err());
        assert!(logit(1.0).is_err());
        assert!(logit(-0.2).is_err());
    }

    #[test]
    fn expit_symmetry_grid() {
        for i in -400..=400 {
            let x = i as f64 * 0.1;
            assert!((expit(x) + expit(-x) - 1.0).abs() < 1e-12);
            assert!(expit(x + 0.1) >= expit(x));
        }
    }

    #[test]
    fn csv_row_with_dropout() {
        let ds = parse_wide_csv("subject_id,trt,y1,y2,y3,y4,y5,y6\ns1,1,8.5,7.9,,,,\n").unwrap();
        let s = &ds.subjects()[0];
        assert_eq!(s.arm, Arm::Treatment);
        assert_eq!(s.outcomes[..2], [Some(8.5), Some(7.9)]);
        assert!(s.outcomes[2..].iter().all(Option::is_none));
    }

    #[test]
    fn csv_rejects_non_monotone() {
        let err = parse_wide_csv("subject_id,trt,y1,y2,y3,y4,y5,y6\ns2,0,8.0,,7.1,7.0,7.0,7.0\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s2") && msg.contains("non-monotone"), "{msg}");
    }

    #[test]
    fn csv_rejects_missing_baseline() {
        let err = parse_wide_csv("subject_id,trt,y1,y2\ns3,0,,7.1\n").unwrap_err();
        assert!(err.to_string().contains("baseline"));
    }

    #[test]
    fn csv_empty_file() {
        let err = parse_wide_csv("").unwrap_err();
        assert!(err.to_string().contains("no subjects"));
        let err = parse_wide_csv("subject_id,trt,y1,y2\n").unwrap_err();
        assert!(err.to_string().contains("no subjects"));
    }

    fn arb_dataset() -> impl Strategy<Value = TrialDataset> {
        (2usize..7).prop_flat_map(|j| {
            proptest::collection::vec(
                (
                    any::<bool>(),
                    proptest::collection::vec(-1e6f64..1e6, j),
                    1usize..=j,
                ),
                1..30,
            )
            .prop_map(move |rows| {
                let subjects = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (t, vals, obs))| SubjectRecord {
                        id: format!("id{i}").into(),
                        arm: if t { Arm::Treatment } else { Arm::Control },
                        outcomes: vals
                            .into_iter()
                            .enumerate()
                            .map(|(k, v)| (k < obs).then_some(v))
                            .collect(),
                    })
                    .collect();
                TrialDataset::new(subjects, j).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_stable(ds in arb_dataset()) {
            let back = parse_wide_csv(&to_wide_csv(&ds)).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn dichotomize_is_monotone(a in 0.0f64..15.0, b in 0.0f64..15.0, lambda in 5.0f64..9.0, le in any::<bool>()) {
            let cmp = if le { Comparison::LessOrEqual } else { Comparison::StrictLess };
            let t = Threshold::new(lambda, cmp).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.success(lo) >= t.success(hi));
        }
    }
}
