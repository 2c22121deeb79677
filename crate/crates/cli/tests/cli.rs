use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stgbgru::checkpoint::Checkpoint;
use stgbgru::metrics::ForecastReport;
use stgbgru::synthetic::{generate, SyntheticConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stgbgru"));
    c.env_remove("STGBGRU_OUT_DIR").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = generate(&SyntheticConfig { steps: 160, ..Default::default() }).unwrap();
        data.write(&root.join("data")).unwrap();
        Fixture { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }

    fn config(&self, out: &str, extra: &str) -> String {
        let path = self.root.join(format!("{out}.toml"));
        let body = format!(
            "[data]\nseries = {:?}\ncoords = {:?}\nout_dir = {:?}\n\n[graph]\nepsilon_km = 0.345\n\n[train]\nepochs = 2\nhidden_feat = 4\n\n[experiment]\nhorizons_min = [5, 15]\n{extra}\n",
            self.p("data/series.csv"),
            self.p("data/coords.csv"),
            self.p(out),
        );
        std::fs::write(&path, body).unwrap();
        path.to_string_lossy().into_owned()
    }
}

#[test]
fn graph_writes_matrices_and_summary() {
    let f = Fixture::new();
    let o = run(&["graph", "--coords", &f.p("data/coords.csv"), "--epsilon", "0.35", "--out", &f.p("g")]);
    assert!(o.status.success(), "{:?}", text(&o));
    let (out, _) = text(&o);
    assert!(out.contains("sites: 8") && out.contains("edges: 10"), "{out}");
    let a = std::fs::read_to_string(f.root.join("g/adjacency.csv")).unwrap();
    // metadata line, header, one row per site
    assert_eq!(a.lines().count(), 10);
    assert!(f.root.join("g/normalized_adjacency.csv").exists());
}

#[test]
fn graph_without_edges_warns() {
    let f = Fixture::new();
    let o = run(&["graph", "--coords", &f.p("data/coords.csv"), "--epsilon", "0", "--out", &f.p("g")]);
    assert!(o.status.success());
    assert!(text(&o).1.contains("graph has no edges"));
}

#[test]
fn graph_errors_reach_the_exit_code() {
    let f = Fixture::new();
    let missing = f.p("nope.csv");
    let o = run(&["graph", "--coords", &missing, "--out", &f.p("g")]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("nope.csv"));

    std::fs::write(f.root.join("empty.csv"), "site_id,lat,lon\n").unwrap();
    let o = run(&["graph", "--coords", &f.p("empty.csv"), "--out", &f.p("g")]);
    assert!(!o.status.success());
}

#[test]
fn config_keys_are_checked() {
    let f = Fixture::new();
    let cfg = f.config("run", "bogus_key = 1");
    let o = run(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("bogus_key"), "{}", text(&o).1);

    let cfg = f.config("run", "");
    let o = run(&["train", "--config", &cfg, "--horizons", "7"]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("7 min"));
}

#[test]
fn print_default_is_a_valid_config() {
    let o = run(&["config", "print-default"]);
    assert!(o.status.success());
    let parsed = stgbgru_cli::ExperimentConfig::from_toml(&text(&o).0).unwrap();
    assert_eq!(parsed, stgbgru_cli::ExperimentConfig::default());
}

#[test]
fn env_and_flags_override_the_file() {
    let f = Fixture::new();
    let cfg = f.config("run", "");
    let o = bin()
        .args(["config", "show", "--config", &cfg, "--epochs", "9"])
        .env("STGBGRU_OUT_DIR", f.p("elsewhere"))
        .output()
        .unwrap();
    let shown = stgbgru_cli::ExperimentConfig::from_toml(&text(&o).0).unwrap();
    assert_eq!(shown.train.epochs, 9);
    assert_eq!(shown.data.out_dir, PathBuf::from(f.p("elsewhere")));
    // explicit flag beats the environment
    let o = bin()
        .args(["config", "show", "--config", &cfg, "--out-dir", &f.p("flag")])
        .env("STGBGRU_OUT_DIR", f.p("elsewhere"))
        .output()
        .unwrap();
    let shown = stgbgru_cli::ExperimentConfig::from_toml(&text(&o).0).unwrap();
    assert_eq!(shown.data.out_dir, PathBuf::from(f.p("flag")));
}

fn ckpt(dir: &Path, name: &str) -> Checkpoint {
    Checkpoint::load(&dir.join("checkpoints").join(name)).unwrap()
}

#[test]
fn train_seeds_skipping_and_force() {
    let f = Fixture::new();
    let cfg = f.config("run", "repeats = 3\nseed_base = 42\nmethods = [\"direct\"]");
    let o = run(&["train", "--config", &cfg, "--horizons", "5"]);
    assert!(o.status.success(), "{:?}", text(&o));
    let out = f.root.join("run");
    let seeds: Vec<u64> = (0..3).map(|i| ckpt(&out, &format!("stgbgru_h1_r{i}.ckpt")).config.seed).collect();
    assert_eq!(seeds, vec![42, 43, 44]);
    assert_eq!(std::fs::read_dir(out.join("checkpoints")).unwrap().count(), 3);
    let history = std::fs::read_to_string(out.join("history/stgbgru_h1_r0.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_mse,val_mse"));

    let o = run(&["train", "--config", &cfg, "--horizons", "5"]);
    assert!(text(&o).0.contains("0 trained, 3 skipped"));
    let o = run(&["train", "--config", &cfg, "--horizons", "5", "--force"]);
    assert!(text(&o).0.contains("3 trained, 0 skipped"));
}

#[test]
fn evaluate_reports_both_methods_and_averages_repeats() {
    let f = Fixture::new();
    let cfg = f.config("run", "repeats = 2");
    assert!(run(&["train", "--config", &cfg]).status.success());
    let o = run(&["evaluate", "--config", &cfg]);
    assert!(o.status.success(), "{:?}", text(&o));
    let reports = f.root.join("run/reports");
    let avg = ForecastReport::read_csv(&reports.join("stgbgru.csv")).unwrap();
    // 8 sites x 2 horizons x 2 methods
    assert_eq!(avg.rows.len(), 32);
    let r0 = ForecastReport::read_csv(&reports.join("stgbgru_r0.csv")).unwrap();
    let r1 = ForecastReport::read_csv(&reports.join("stgbgru_r1.csv")).unwrap();
    for row in &avg.rows {
        let a = r0.get(&row.site, row.horizon_min, row.method).unwrap();
        let b = r1.get(&row.site, row.horizon_min, row.method).unwrap();
        assert!((row.mae - (a.mae + b.mae) / 2.0).abs() < 1e-9);
        assert!((row.rmse - (a.rmse + b.rmse) / 2.0).abs() < 1e-9);
    }
    let trace = std::fs::read_to_string(f.root.join("run/traces/stgbgru/St1.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("timestamp,site_id,horizon_min,method,predicted,actual"));

    // a report against itself has no strict wins; direct vs iterative at 5 min ties
    let a = reports.join("stgbgru.csv");
    let o = run(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(text(&o).0.contains("mae:    0 wins"));
    let o = run(&[
        "compare",
        a.to_str().unwrap(),
        a.to_str().unwrap(),
        "--method-a",
        "direct",
        "--method-b",
        "iterative",
        "--min-horizon-min",
        "15",
    ]);
    assert!(text(&o).0.contains("8 cells"), "{}", text(&o).0);

    let single = reports.join("single.csv");
    let mut one = avg.clone();
    one.rows.truncate(3);
    one.write_csv(&single).unwrap();
    let o = run(&["compare", a.to_str().unwrap(), single.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn minimal_single_method_report() {
    let f = Fixture::new();
    let cfg = f.config("run", "methods = [\"direct\"]");
    assert!(run(&["train", "--config", &cfg, "--horizons", "5"]).status.success());
    assert!(run(&["evaluate", "--config", &cfg, "--horizons", "5"]).status.success());
    let r = ForecastReport::read_csv(&f.root.join("run/reports/stgbgru.csv")).unwrap();
    assert_eq!(r.rows.len(), 8);
}

#[test]
fn strict_mode_refuses_other_data() {
    let f = Fixture::new();
    let cfg = f.config("run", "methods = [\"direct\"]");
    assert!(run(&["train", "--config", &cfg, "--horizons", "5"]).status.success());
    // same sites and timestamps, different counts
    let other = generate(&SyntheticConfig { steps: 160, seed: 5, ..Default::default() }).unwrap();
    other.write(&f.root.join("other")).unwrap();
    let series = f.p("other/series.csv");
    let o = run(&["evaluate", "--config", &cfg, "--horizons", "5", "--series", &series]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("fingerprint"));
    let o = run(&["evaluate", "--config", &cfg, "--horizons", "5", "--series", &series, "--no-strict"]);
    assert!(o.status.success(), "{:?}", text(&o));

    let ck = f.p("run/checkpoints/stgbgru_h1_r0.ckpt");
    let o = run(&["predict", "--checkpoint", &ck, "--series", &series, "--horizon-min", "5"]);
    assert!(!o.status.success());
}

#[test]
fn predict_prints_one_row_per_site() {
    let f = Fixture::new();
    let cfg = f.config("run", "methods = [\"iterative\"]");
    assert!(run(&["train", "--config", &cfg]).status.success());
    let ck = f.p("run/checkpoints/stgbgru_h1_r0.ckpt");
    let series = f.p("data/series.csv");
    let o = run(&["predict", "--checkpoint", &ck, "--series", &series, "--horizon-min", "30", "--method", "iterative"]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert_eq!(text(&o).0.lines().count(), 9);
    // a one-step model cannot serve a direct 30-minute forecast
    let o = run(&["predict", "--checkpoint", &ck, "--series", &series, "--horizon-min", "30"]);
    assert!(!o.status.success());
}

#[test]
fn identical_runs_give_identical_bytes() {
    let f = Fixture::new();
    let a = f.config("a", "methods = [\"direct\"]");
    let b = f.config("b", "methods = [\"direct\"]");
    for cfg in [&a, &b] {
        assert!(run(&["train", "--config", cfg, "--horizons", "5"]).status.success());
        assert!(run(&["evaluate", "--config", cfg, "--horizons", "5"]).status.success());
    }
    for rel in ["checkpoints/stgbgru_h1_r0.ckpt", "reports/stgbgru.csv", "traces/stgbgru/St3.csv", "history/stgbgru_h1_r0.csv"] {
        let x = std::fs::read(f.root.join("a").join(rel)).unwrap();
        let y = std::fs::read(f.root.join("b").join(rel)).unwrap();
        assert_eq!(x, y, "{rel}");
    }
}

#[test]
fn every_subcommand_has_help() {
    let expectations: [(&[&str], &[&str]); 7] = [
        (&["graph"], &["--coords", "--epsilon", "--weight-mode", "--out"]),
        (&["train"], &["--config", "--force", "--epochs", "--hidden-feat", "--gcn-depth", "--weight-mode", "--paper-faithful-scaling", "--repeats", "--seed-base", "--horizons"]),
        (&["evaluate"], &["--config", "--strict", "--no-strict", "--methods"]),
        (&["predict"], &["--checkpoint", "--series", "--method", "--horizon-min", "--capacities"]),
        (&["compare"], &["--method-a", "--method-b", "--min-horizon-min"]),
        (&["config"], &["print-default", "show"]),
        (&["synthetic"], &["--out", "--steps", "--seed"]),
    ];
    for (cmd, flags) in expectations {
        let mut args = cmd.to_vec();
        args.push("--help");
        let o = run(&args);
        assert!(o.status.success());
        let help = text(&o).0;
        for flag in flags {
            assert!(help.contains(flag), "{cmd:?} help lacks {flag}");
        }
    }
}
