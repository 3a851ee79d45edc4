use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binmi"))
        .args(args)
        .output()
        .expect("run binmi")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = binmi(&["simulate", "--config", &config("normal_mcar.toml"), "--out", p(out), "--replicates", "20", "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["tables.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let table = fs::read_to_string(a.join("tables.csv")).unwrap();
    assert!(table.starts_with("scenario,missing,method,estimand,bias,var,evar,cp,cp_b,rmse_ratio,n_fallback,n_fail\n"));
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, t) in [(&a, "1"), (&b, "3")] {
        let o = binmi(&["--threads", t, "simulate", "--config", &config("normal_mar.toml"), "--out", p(out), "--replicates", "12", "--seed", "3", "--format", "json"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(a.join("tables.json")).unwrap(), fs::read(b.join("tables.json")).unwrap());
}

#[test]
fn missing_seed_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("normal_mcar.toml"))
        .unwrap()
        .replace("master_seed = 20240101\n", "");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let o = binmi(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o")), "--replicates", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed: "), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("normal_mcar.toml"))
        .unwrap()
        .replace("corr_decay = 0.8", "corr_decay = 0.8\nrho_typo = 0.8");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = binmi(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rho_typo"), "{}", stderr(&o));
}

#[test]
fn malformed_toml_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = [unterminated").unwrap();
    let o = binmi(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_replicates_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = binmi(&["simulate", "--config", &config("normal_mcar.toml"), "--out", p(dir.path()), "--replicates", "0", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn truth_values() {
    let o = binmi(&["truth", "--config", &config("normal_mcar.toml")]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[3] - 0.1253).abs() < 5e-5);
    assert!((row[4] - 0.5047).abs() < 5e-5);

    let o = binmi(&["truth", "--config", &config("lognormal_mar.toml")]);
    let row: Vec<f64> = stdout(&o).lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[3] - 0.128).abs() < 5e-4);
    assert!((row[4] - 0.515).abs() < 5e-4);

    let o = binmi(&["truth", "--config", &config("empirical_lt7_null.toml")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: Vec<f64> = stdout(&o).lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!((row[3], row[4]), (0.0, 0.0));
}

fn write_data(dir: &Path, cfg: &str, seed: &str) -> PathBuf {
    let out = dir.join("data.csv");
    let o = binmi(&["generate", "--config", &config(cfg), "--out", p(&out), "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn parse_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn analyze_complete_data_methods_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), "source_surrogate.toml", "5");
    let o = binmi(&["analyze", "--data", p(&data), "--lambda", "7", "--method", "both", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_rows(&stdout(&o));
    assert_eq!(rows.len(), 4);
    for estimand in ["RD", "LOG(OR)"] {
        let pick = |m: &str| rows.iter().find(|r| r[0] == m && r[1] == estimand).unwrap().clone();
        let (g, mi) = (pick("GLMM"), pick("MI"));
        let est = |r: &[String]| r[2].parse::<f64>().unwrap();
        let var = |r: &[String]| r[3].parse::<f64>().unwrap();
        assert!((est(&g) - est(&mi)).abs() <= 2.0 * (var(&g) + var(&mi)).sqrt());
    }
}

#[test]
fn analyze_mi_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), "normal_mar.toml", "9");
    let run = || binmi(&["analyze", "--data", p(&data), "--lambda", "7", "--method", "mi", "--m", "10", "--seed", "1"]);
    let (a, b) = (run(), run());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(parse_rows(&stdout(&a)).len(), 2);
}

#[test]
fn analyze_with_bootstrap_reports_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), "normal_mcar.toml", "4");
    let o = binmi(&["analyze", "--data", p(&data), "--lambda", "7", "--method", "glmm", "--bootstrap", "100", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for row in parse_rows(&stdout(&o)) {
        let lo: f64 = row[8].parse().unwrap();
        let hi: f64 = row[9].parse().unwrap();
        assert!(lo < hi);
    }
}

#[test]
fn analyze_single_arm_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one_arm.csv");
    let mut text = String::from("subject_id,trt,y1,y2,y3\n");
    for i in 0..30 {
        text.push_str(&format!("s{i},1,{},{},{}\n", 8.0 + i as f64 * 0.01, 7.5, 6.5 + i as f64 * 0.02));
    }
    fs::write(&data, text).unwrap();
    let o = binmi(&["analyze", "--data", p(&data), "--lambda", "7"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn analyze_names_bad_subject() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "subject_id,trt,y1,y2,y3\nok1,0,8.1,7.0,6.9\nbad7,1,8.2,,7.1\n").unwrap();
    let o = binmi(&["analyze", "--data", p(&data), "--lambda", "7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad7"), "{}", stderr(&o));
}

#[test]
fn compare_merges_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (i, cfg) in ["normal_mcar.toml", "normal_mar.toml"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let o = binmi(&["simulate", "--config", &config(cfg), "--out", p(&out), "--replicates", "10", "--seed", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        paths.push(out.join("summary.json"));
    }
    let merged = dir.path().join("merged");
    let o = binmi(&["compare", p(&paths[0]), p(&paths[1]), "--out", p(&merged)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(merged.join("tables.csv")).unwrap();
    assert_eq!(table.lines().count(), 9);
    let ratio = fs::read_to_string(merged.join("variance_ratio.csv")).unwrap();
    assert_eq!(ratio.lines().count(), 3);
}
