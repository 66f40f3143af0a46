use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sparsebump::{GridConfig, SparseFamily, Weight, WeightKind};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sparsebump"));
    cmd.env_remove("SPARSEBUMP_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

struct Fixtures {
    dir: TempDir,
}

impl Fixtures {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let g = GridConfig::new(1, 4).unwrap();
        let one = Weight::constant(g, 1.0).unwrap();
        let cascade = Weight::generate(g, WeightKind::RandomCascade { seed: 3, volatility: 0.7 }).unwrap();
        let chain: Vec<_> = (0..=3).map(|k| g.cubes_at(k).next().unwrap()).collect();
        let chain = SparseFamily::new(g, g.root(), 0.5, &chain).unwrap();
        let single = SparseFamily::new(g, g.root(), 0.5, &[g.root()]).unwrap();
        let f = Fixtures { dir };
        f.write("const.json", &one.to_json().unwrap());
        f.write("cascade.json", &cascade.to_json().unwrap());
        f.write("chain.json", &chain.to_json().unwrap());
        f.write("single.json", &single.to_json().unwrap());
        f
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn close(x: &Value, y: f64) -> bool {
    (x.as_f64().unwrap() - y).abs() <= 1e-12 * y.abs().max(1.0)
}

#[test]
fn constants_on_constant_weight() {
    let f = Fixtures::new();
    let w = f.arg("const.json");
    let out = run(&["constants", "--weights", &w, "--p", "2", "--q", "4", "--alpha", "0", "--eps", "entropy:1"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert!(close(&v["A"], 2.0) && close(&v["E"], 2.0));
    assert!(v["D"].is_null());

    let out = run(&["constants", "--weights", &w, "--p", "2", "--q", "4", "--eps", "direct:1"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert!(close(&v["D"], 2.0) && close(&v["D_star"], 2.0));
    assert!(v["E"].is_null());
}

#[test]
fn constants_accepts_separate_weights() {
    let f = Fixtures::new();
    let (s, w) = (f.arg("cascade.json"), f.arg("const.json"));
    let out = run(&["constants", "--sigma", &s, "--w", &w, "--dual-rho", "as-printed"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["E_star"], v["E_star_printed"]);
}

#[test]
fn trace_chain_passes_all_stages() {
    let f = Fixtures::new();
    let (fam, w) = (f.arg("chain.json"), f.arg("cascade.json"));
    for eps in ["entropy:1", "direct:1"] {
        for dual in [false, true] {
            let mut args = vec!["trace", "--family", &fam, "--weights", &w, "--eps", eps];
            if dual {
                args.push("--dual");
            }
            let out = run(&args);
            assert_eq!(code(&out), 0, "{eps} dual={dual}");
            let v = stdout_json(&out);
            assert_eq!(v["pass"], true);
            for stage in ["partition", "inner", "final", "certificate"] {
                assert_eq!(v[stage]["pass"], true, "{stage}");
            }
        }
    }
}

#[test]
fn trace_rejects_root_outside_family() {
    let f = Fixtures::new();
    let out = run(&["trace", "--family", &f.arg("chain.json"), "--weights", &f.arg("const.json"), "--root", "1:1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn testing_singleton_family() {
    let f = Fixtures::new();
    let out = run(&["testing", "--family", &f.arg("single.json"), "--weights", &f.arg("const.json")]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert!(close(&v["T"], 1.0) && close(&v["T_star"], 1.0));
    assert!(v.get("warning").is_none_or(Value::is_null));
}

#[test]
fn norm_reports_exact_l2_only_for_p_equal_q_two() {
    let f = Fixtures::new();
    let (fam, w) = (f.arg("chain.json"), f.arg("cascade.json"));
    let out = run(&["norm", "--family", &fam, "--weights", &w, "--q", "2", "--mode", "extended", "--budget", "200"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    let (lb, exact) = (v["lower_bound"].as_f64().unwrap(), v["exact_l2"].as_f64().unwrap());
    assert!(lb <= exact * (1.0 + 1e-9) && lb >= 0.99 * exact, "{lb} {exact}");

    let out = run(&["norm", "--family", &fam, "--weights", &w]);
    assert_eq!(code(&out), 0);
    assert!(stdout_json(&out)["exact_l2"].is_null());
}

#[test]
fn usage_errors_exit_two() {
    let f = Fixtures::new();
    let w = f.arg("const.json");
    assert_eq!(code(&run(&["constants", "--weights", &w, "--bogus", "1"])), 2);
    assert_eq!(code(&run(&["constants", "--weights", &w, "--eps", "cubic:1"])), 2);
    assert_eq!(code(&run(&["constants"])), 2);
    assert_eq!(code(&run(&["constants", "--weights", &w, "--p", "1"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["verify-bounds", "--bogus", "1"])), 2);
    assert_eq!(code(&run(&["verify-bounds", "--lambda", "1.5"])), 2);
    assert_eq!(code(&run(&["verify-bounds", "--instances"])), 2);
    assert_eq!(code(&run(&["verify-bounds", "stray"])), 2);
    assert_eq!(code(&run(&["counterexample", "--q", "3"])), 2);

    f.write("broken.json", "{\"instances\": ");
    assert_eq!(code(&run(&["verify-bounds", "--config", &f.arg("broken.json")])), 2);
    assert_eq!(code(&run(&["verify-bounds", "--config", &f.arg("missing.json")])), 2);
    let out = bin().args(["verify-bounds", "--instances", "0"]).env("SPARSEBUMP_SEED", "x").output().unwrap();
    assert_eq!(code(&out), 2);
}

fn csv_lines(out: &Output) -> Vec<String> {
    String::from_utf8(out.stdout.clone()).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn empty_suite_prints_header_only() {
    let out = run(&["verify-bounds", "--instances", "0"]);
    assert_eq!(code(&out), 0);
    let lines = csv_lines(&out);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0], sparsebump::lab::CSV_COLUMNS.join(","));
}

fn seed_column(out: &Output) -> Vec<u64> {
    csv_lines(out)[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn seed_comes_from_flag_then_env_then_default() {
    let base = ["verify-bounds", "--instances", "2", "--leaf_level", "5"];
    let out = run(&base);
    assert_eq!(code(&out), 0);
    assert_eq!(seed_column(&out), vec![42, 43]);

    let out = bin().args(base).env("SPARSEBUMP_SEED", "100").output().unwrap();
    assert_eq!(seed_column(&out), vec![100, 101]);

    let mut with_flag = base.to_vec();
    with_flag.extend(["--seed", "8"]);
    let out = bin().args(&with_flag).env("SPARSEBUMP_SEED", "100").output().unwrap();
    assert_eq!(seed_column(&out), vec![8, 9]);
}

fn suite_files(dir: &Path, config: &Path) -> (Vec<u8>, Value) {
    let out = run(&[
        "verify-bounds",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let csv = std::fs::read(dir.join("verify-bounds.csv")).unwrap();
    let json = serde_json::from_slice(&std::fs::read(dir.join("verify-bounds.json")).unwrap()).unwrap();
    (csv, json)
}

#[test]
fn config_file_runs_are_deterministic() {
    let f = Fixtures::new();
    f.write("suite.json", r#"{"instances": 6, "leaf_level": 6, "seed": 7, "p": 2, "q": 3}"#);
    let (a, ja) = suite_files(&f.path("a"), &f.path("suite.json"));
    let (b, _) = suite_files(&f.path("b"), &f.path("suite.json"));
    assert_eq!(a, b);
    assert!(!a.contains(&b'\r'));
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 7);
    assert_eq!(ja["aggregate"]["instances"], 6);
    assert_eq!(ja["aggregate"]["violations"], 0);
    assert_eq!(ja["seed"], 7);
}

#[test]
fn overrides_beat_config_file() {
    let f = Fixtures::new();
    f.write("suite.json", r#"{"instances": 6, "leaf_level": 6, "seed": 7}"#);
    let out = run(&["verify-bounds", "--config", &f.arg("suite.json"), "--instances=2", "--seed", "11"]);
    assert_eq!(code(&out), 0);
    assert_eq!(seed_column(&out), vec![11, 10]);
}

#[test]
fn counterexample_and_sweep_run() {
    let out = run(&["counterexample", "--levels", "[4,6,8]"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines = csv_lines(&out);
    assert_eq!(lines[0], "N,llogl,A,E,D");
    assert_eq!(lines.len(), 4);

    let out = run(&["sweep", "--levels", "[4,5]", "--instances", "2"]);
    assert_eq!(code(&out), 0);
    let n: Vec<String> = csv_lines(&out)[1..].iter().map(|l| l.split(',').nth(2).unwrap().to_string()).collect();
    assert_eq!(n, ["4", "4", "5", "5"]);
}
