//! `binmi`: simulation studies and single-trial analyses for a dichotomized
//! longitudinal endpoint, comparing a marginal logistic model with multiple
//! imputation.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use binmi_core::estimands::{EstimateRecord, Method};
use binmi_core::exec::Execution;
use binmi_core::harness::{
    analyze_method, load_study_config, read_summaries, variance_ratio_report, write_summaries,
    write_tables, MethodOutcome, Study, TableFormat,
};
use binmi_core::imputation::ImputationConfig;
use binmi_core::marginal::ModelSpec;
use binmi_core::numfmt::sig17;
use binmi_core::rng::{stream, Stage};
use binmi_core::trial::{read_wide_csv, write_wide_csv, Comparison, Threshold};
use binmi_core::{datagen, Error};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "binmi", version, about = "GLMM versus multiple imputation for a dichotomized endpoint")]
struct Cli {
    /// Worker threads (default: RAYON_NUM_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study and write metric tables.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Analyze one wide-format trial CSV.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = Cmp::Lt)]
        comparison: Cmp,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        /// Number of imputations.
        #[arg(long, default_value_t = 10)]
        m: usize,
        /// Bootstrap resamples (0 disables).
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print true final-visit probabilities, RD and log(OR) for a config.
    Truth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Merge summary.json files into one table and a variance-ratio report.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one simulated incomplete dataset as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cmp {
    /// success when value < lambda
    Lt,
    /// success when value <= lambda
    Le,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Glmm,
    Mi,
    Both,
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s: u64 = rand::random();
        eprintln!("seed: {s}");
        s
    })
}

fn create_dir(dir: &Path) -> binmi_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Validation(format!("{}: {e}", dir.display())))
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, replicates: Option<usize>, format: Format) -> binmi_core::Result<()> {
    let mut cfg = load_study_config(config)?;
    if let Some(r) = replicates {
        cfg.n_replicates = r;
    }
    if seed.is_some() || cfg.master_seed.is_none() {
        cfg.master_seed = Some(seed_or_random(seed));
    }
    let study = Study::new(cfg)?;
    create_dir(out)?;
    let summary = study.run(Execution::Parallel);
    let format = match format {
        Format::Csv => TableFormat::Csv,
        Format::Json => TableFormat::Json,
    };
    let summaries = [summary];
    write_tables(&summaries, format, out.join(format!("tables.{}", format.extension())))?;
    write_summaries(&summaries, out.join("summary.json"))?;
    let s = &summaries[0];
    eprintln!(
        "{}: {} replicates, final-visit missing {:.4}",
        s.scenario, s.n_replicates, s.final_missing_rate
    );
    Ok(())
}

const ANALYZE_HEADER: &str = "method,estimand,estimate,variance,ci_low,ci_high,df,used_fallback,boot_low,boot_high,boot_var";

fn opt(x: Option<f64>) -> String {
    x.map(sig17).unwrap_or_default()
}

fn analyze_rows(out: &MethodOutcome) -> Vec<String> {
    let line = |r: &EstimateRecord, b: Option<&binmi_core::estimands::BootstrapInterval>| {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method.label(),
            r.estimand.label(),
            sig17(r.estimate),
            sig17(r.variance),
            sig17(r.ci_low),
            sig17(r.ci_high),
            opt(r.df),
            r.used_fallback,
            opt(b.map(|b| b.ci_low)),
            opt(b.map(|b| b.ci_high)),
            opt(b.map(|b| b.variance)),
        )
    };
    vec![
        line(&out.rd, out.boot.as_ref().map(|b| &b[0])),
        line(&out.log_or, out.boot.as_ref().map(|b| &b[1])),
    ]
}

#[allow(clippy::too_many_arguments)]
fn analyze(data: &Path, lambda: f64, cmp: Cmp, method: MethodArg, m: usize, bootstrap: usize, seed: Option<u64>) -> binmi_core::Result<()> {
    let dataset = read_wide_csv(data)?;
    dataset.require_both_arms()?;
    let comparison = match cmp {
        Cmp::Lt => Comparison::StrictLess,
        Cmp::Le => Comparison::LessOrEqual,
    };
    let threshold = Threshold::new(lambda, comparison)?;
    let imputation = ImputationConfig { m, ..ImputationConfig::default() };
    imputation.validate()?;
    if bootstrap != 0 && bootstrap < 100 {
        return Err(Error::Config(format!("--bootstrap must be 0 or >= 100, got {bootstrap}")));
    }
    let methods = match method {
        MethodArg::Glmm => vec![Method::Glmm],
        MethodArg::Mi => vec![Method::Mi],
        MethodArg::Both => vec![Method::Glmm, Method::Mi],
    };
    let needs_seed = methods.contains(&Method::Mi) || bootstrap > 0;
    let seed = if needs_seed { seed_or_random(seed) } else { seed.unwrap_or(0) };
    let mut lines = vec![ANALYZE_HEADER.to_string()];
    for method in methods {
        let boot_stage = match method {
            Method::Glmm => Stage::BootstrapGlmm,
            Method::Mi => Stage::BootstrapMi,
        };
        let out = analyze_method(
            method,
            &dataset,
            &threshold,
            &imputation,
            &ModelSpec::default(),
            (bootstrap > 0).then_some(bootstrap),
            &mut stream(seed, 0, Stage::Imputation),
            &mut stream(seed, 0, boot_stage),
            Execution::Parallel,
        )?;
        lines.extend(analyze_rows(&out));
    }
    println!("{}", lines.join("\n"));
    Ok(())
}

fn truth(config: &Path) -> binmi_core::Result<()> {
    let cfg = load_study_config(config)?;
    let tv = datagen::true_values(&cfg.scenario)?;
    println!("visit,p0,p1,rd,log_or");
    println!("{},{},{},{},{}", tv.visit, sig17(tv.p0), sig17(tv.p1), sig17(tv.rd), sig17(tv.log_or));
    Ok(())
}

fn compare(paths: &[PathBuf], out: &Path) -> binmi_core::Result<()> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_summaries(p)?);
    }
    create_dir(out)?;
    write_tables(&all, TableFormat::Csv, out.join("tables.csv"))?;
    match variance_ratio_report(&all) {
        Ok(rep) => {
            let path = out.join("variance_ratio.csv");
            fs::write(&path, rep.to_csv()).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
            eprintln!(
                "variance ratio slope: rd {} log_or {}",
                sig17(rep.fit_rd.slope),
                sig17(rep.fit_log_or.slope)
            );
        }
        Err(e) => eprintln!("variance ratio report skipped: {e}"),
    }
    Ok(())
}

fn generate(config: &Path, out: &Path, seed: Option<u64>, replicate: u64) -> binmi_core::Result<()> {
    let mut cfg = load_study_config(config)?;
    if seed.is_some() || cfg.master_seed.is_none() {
        cfg.master_seed = Some(seed_or_random(seed));
    }
    let data = Study::new(cfg)?.replicate_data(replicate)?;
    write_wide_csv(&data, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Simulate { config, out, seed, replicates, format } => simulate(&config, &out, seed, replicates, format),
        Command::Analyze { data, lambda, comparison, method, m, bootstrap, seed } => {
            analyze(&data, lambda, comparison, method, m, bootstrap, seed)
        }
        Command::Truth { config } => truth(&config),
        Command::Compare { summaries, out } => compare(&summaries, &out),
        Command::Generate { config, out, seed, replicate } => generate(&config, &out, seed, replicate),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
