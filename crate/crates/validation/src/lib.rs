//! Reporting helpers for the acceptance suite.

use std::fmt::Write as _;
use std::time::Instant;

/// One pass/fail judgement with supporting numbers.
#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(label: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            pass,
            detail: detail.into(),
        }
    }

    /// `|value - target| <= tol`.
    pub fn within(label: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        let pass = (value - target).abs() <= tol;
        Self::new(label, pass, format!("{value:.6} vs {target:.6} +/- {tol:.2e}"))
    }

    pub fn in_range(label: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        let pass = (lo..=hi).contains(&value);
        Self::new(label, pass, format!("{value:.4} in [{lo}, {hi}]"))
    }
}

/// A criterion: an id, a title and the function producing its checks.
pub struct Criterion {
    pub id: &'static str,
    pub title: &'static str,
    pub run: fn() -> Vec<Check>,
}

impl Criterion {
    fn selected(&self, filters: &[String]) -> bool {
        filters.is_empty()
            || filters
                .iter()
                .any(|f| f == self.id || self.title.contains(f.as_str()))
    }
}

/// Runs the selected criteria, printing one verdict line per criterion
/// followed by its individual checks. Returns true when all passed.
pub fn run_criteria(criteria: &[Criterion], filters: &[String]) -> bool {
    let mut all = true;
    let mut summary = String::new();
    for c in criteria.iter().filter(|c| c.selected(filters)) {
        let start = Instant::now();
        let checks = (c.run)();
        let pass = !checks.is_empty() && checks.iter().all(|k| k.pass);
        all &= pass;
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {:<3} {verdict}  {} ({:.1}s)",
            c.id,
            c.title,
            start.elapsed().as_secs_f64()
        );
        for k in &checks {
            println!("    [{}] {}: {}", if k.pass { "ok" } else { "x" }, k.label, k.detail);
        }
        let _ = writeln!(summary, "criterion {:<3} {verdict}  {}", c.id, c.title);
    }
    println!("\nacceptance summary\n{summary}");
    all
}

/// Positional command-line arguments, used as criterion filters.
pub fn filters_from_args() -> Vec<String> {
    std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect()
}
