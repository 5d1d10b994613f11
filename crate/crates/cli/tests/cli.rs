use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tsinc"));
    c.env_remove("TSINC_OUT");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn tsinc(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

type Table = (Vec<(String, String)>, Vec<String>, Vec<Vec<String>>);

/// Schema line, header and rows of a CSV written by the CLI.
fn read_csv(path: &Path) -> Table {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let schema = lines
        .next()
        .unwrap()
        .strip_prefix("# schema: ")
        .expect("schema comment first")
        .split(',')
        .map(|c| {
            let (name, ty) = c.split_once(':').unwrap();
            (name.to_string(), ty.to_string())
        })
        .collect();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (schema, header, rows)
}

const SIGN_RUN: &str = r#"{
  "problem": { "kind": "sign", "dim": 1 },
  "run": {
    "schedule": { "a_exponent": 0.75, "b_exponent": 1.0, "a0": 0.5, "b0": 0.5 },
    "fast_noise": { "kind": "uniform", "c": 0.2 },
    "steps": 2000,
    "seed": 9
  },
  "init": { "x": [1.0], "y": [1.0] }
}"#;

#[test]
fn validate_canonical_passes() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("saddle_canonical.json");
    let o = tsinc(&["validate", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = fs::read_to_string(out.path().join("validation.txt")).unwrap();
    assert!(report.lines().all(|l| l.starts_with("PASS")));
    assert!(report.contains("schedule"));
}

#[test]
fn validate_rejects_slow_fast_exponent() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "bad.json",
        r#"{ "problem": { "kind": "saddle", "preset": "canonical" },
             "run": { "schedule": { "a_exponent": 0.4, "b_exponent": 0.9 } } }"#,
    );
    let o = tsinc(&["validate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL schedule"), "{stdout}");
    assert!(stdout.contains("fast exponent"), "{stdout}");
}

#[test]
fn missing_kernel_row_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "kernel.json",
        r#"{ "problem": { "kind": "saddle", "thetas": [[1, 0], [0, 1]],
               "constraints": [[[1, 0]], [[0, 1]]], "targets": [[2], [0]],
               "kernel": [[0.5, 0.5]], "eps": 0.01, "radius": 4, "growth_k": 2 } }"#,
    );
    let o = tsinc(&["validate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("problem.kernel: expected 2 rows, found 1"), "{stdout}");
}

#[test]
fn type_errors_report_path_and_position() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "typo.json",
        "{\n  \"problem\": { \"kind\": \"sign\", \"dim\": 1 },\n  \"run\": { \"schedule\": { \"a_exponent\": 0.6, \"b_exponent\": 0.9 }, \"steps\": \"many\" }\n}",
    );
    let o = tsinc(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("`run.steps`"), "{stderr}");
    assert!(stderr.contains("line 3"), "{stderr}");
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let o = tsinc(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn single_step_run_writes_two_rows_with_schema() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "sign.json", SIGN_RUN);
    let out = dir.path().join("out");
    let o = tsinc(&["run", "--config", &cfg, "--steps", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (schema, header, rows) = read_csv(&out.join("trajectory.csv"));
    assert_eq!(rows.len(), 2);
    let names: Vec<String> = schema.iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, header);
    for row in &rows {
        for ((_, ty), cell) in schema.iter().zip(row) {
            match ty.as_str() {
                "u64" => {
                    cell.parse::<u64>().unwrap();
                }
                _ if cell.is_empty() => {}
                _ => {
                    cell.parse::<f64>().unwrap();
                }
            }
        }
    }
    // x₀ = y₀ so the least-norm element of Sgn(0) is 0: x₁ = 1 + a(0)·m, y₁ = 1 − b(0).
    let x1: f64 = rows[1][3].parse().unwrap();
    let m: f64 = rows[0][7].parse().unwrap();
    assert!((x1 - (1.0 + 0.5 * m)).abs() < 1e-15);
    assert_eq!(rows[1][4].parse::<f64>().unwrap(), 0.5);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["steps"], 1);
}

#[test]
fn reruns_are_byte_identical_and_hash_tracks_content() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "sign.json", SIGN_RUN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(code(&tsinc(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    }
    assert_eq!(
        fs::read(a.join("trajectory.csv")).unwrap(),
        fs::read(b.join("trajectory.csv")).unwrap()
    );
    let ha = read_json(&a.join("manifest.json"))["config_sha256"].clone();
    assert_eq!(ha, read_json(&b.join("manifest.json"))["config_sha256"]);

    let cfg2 = write_config(&dir, "sign2.json", &SIGN_RUN.replace("\"seed\": 9", "\"seed\": 10"));
    let c = dir.path().join("c");
    assert_eq!(code(&tsinc(&["run", "--config", &cfg2, "--out", c.to_str().unwrap()])), 0);
    assert_ne!(ha, read_json(&c.join("manifest.json"))["config_sha256"]);
    assert_ne!(
        fs::read(a.join("trajectory.csv")).unwrap(),
        fs::read(c.join("trajectory.csv")).unwrap()
    );

    // The seed flag overrides the config and is recorded.
    let d = dir.path().join("d");
    assert_eq!(code(&tsinc(&["run", "--config", &cfg, "--seed", "10", "--out", d.to_str().unwrap()])), 0);
    assert_eq!(
        fs::read(c.join("trajectory.csv")).unwrap(),
        fs::read(d.join("trajectory.csv")).unwrap()
    );
    assert_eq!(read_json(&d.join("manifest.json"))["seed"], 10);
}

#[test]
fn output_directory_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "sign.json", SIGN_RUN);
    let target = dir.path().join("from_env");
    let o = bin()
        .args(["run", "--config", &cfg, "--steps", "10"])
        .env("TSINC_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("trajectory.csv").exists());
}

#[test]
fn replicas_get_their_own_directories() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "sign.json", SIGN_RUN);
    let out = dir.path().join("out");
    let o = tsinc(&["run", "--config", &cfg, "--replicas", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for i in 0..3 {
        let sub = out.join(format!("replica_{i}"));
        assert!(sub.join("trajectory.csv").exists());
        assert_eq!(read_json(&sub.join("manifest.json"))["seed"], 9 + i);
    }
    assert_eq!(read_json(&out.join("manifest.json"))["replicas"].as_array().unwrap().len(), 3);
}

#[test]
fn divergence_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "blowup.json",
        r#"{ "problem": { "kind": "affine",
               "fast": { "x": [[50.0]], "y": [[0.0]] },
               "slow": { "x": [[0.0]], "y": [[-1.0]] } },
             "run": { "schedule": { "a_exponent": 0.6, "b_exponent": 0.9 }, "steps": 5000 },
             "init": { "x": [1.0], "y": [0.0] } }"#,
    );
    let out = dir.path().join("out");
    let o = tsinc(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "diverged");
    assert!(manifest["divergence_step"].as_u64().unwrap() > 0);
}

#[test]
fn sign_inclusion_reaches_zero_at_one() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("sign_di.json");
    let o = tsinc(&["solve-di", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let (_, header, rows) = read_csv(&out.path().join("di_path.csv"));
    assert_eq!(header, ["t", "z0", "v0"]);
    let hit = rows
        .iter()
        .find(|r| r[1].parse::<f64>().unwrap().abs() <= 1e-9)
        .expect("path reaches zero");
    assert!((hit[0].parse::<f64>().unwrap() - 1.0).abs() <= 1e-3);
    assert!(rows.last().unwrap()[1].parse::<f64>().unwrap().abs() <= 1e-9);
}

#[test]
fn equilibrium_start_is_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "eq.json",
        r#"{ "problem": { "kind": "sign", "dim": 2 }, "di": { "z0": [0.0, 0.0], "horizon": 1.0, "dt": 0.01 } }"#,
    );
    let o = tsinc(&["solve-di", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let (_, _, rows) = read_csv(&dir.path().join("di_path.csv"));
    assert_eq!(rows.len(), 101);
    assert!(rows.iter().all(|r| r[1] == rows[0][1] && r[2] == rows[0][2]));
}

#[test]
fn envelope_requires_a_saddle_problem() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("sign_di.json");
    let o = tsinc(&["solve-di", "--config", cfg.to_str().unwrap(), "--envelope", "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn envelope_discrepancy_is_small_on_canonical_dual() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("saddle_canonical.json");
    let o = tsinc(&["solve-di", "--config", cfg.to_str().unwrap(), "--envelope", "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, header, rows) = read_csv(&out.path().join("envelope.csv"));
    assert_eq!(header, ["t", "value", "integral", "discrepancy"]);
    assert_eq!(rows.len(), 20_001);
    let worst = rows
        .iter()
        .map(|r| r[3].parse::<f64>().unwrap().abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-3, "{worst}");
    let values: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(values.windows(2).all(|v| v[1] >= v[0] - 1e-9));
}

#[test]
fn canonical_saddle_run_reaches_the_optimum() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("saddle_canonical.json");
    let o = tsinc(&["saddle", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "diagnostics.csv", "occupation.csv", "manifest.json", "optimality.json"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    let report = read_json(&out.path().join("optimality.json"));
    let x: Vec<f64> = serde_json::from_value(report["x_bar"].clone()).unwrap();
    assert!((x[0] - 1.0).hypot(x[1] - 1.0) <= 1e-2, "{x:?}");
    assert!(report["feasibility_gap"].as_f64().unwrap() <= 1e-2);

    // The last iterate carries Markov-noise jitter of order sqrt(a(N)).
    let (_, _, rows) = read_csv(&out.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 200_001);
    let last = rows.last().unwrap();
    let (x0, x1): (f64, f64) = (last[3].parse().unwrap(), last[4].parse().unwrap());
    assert!((x0 - 1.0).hypot(x1 - 1.0) <= 5e-2);

    let (_, _, diag) = read_csv(&out.path().join("diagnostics.csv"));
    let last_lambda: f64 = diag.last().unwrap()[3].parse().unwrap();
    assert!(last_lambda <= 5e-2);
}

#[test]
fn saddle_command_rejects_other_problems() {
    let out = TempDir::new().unwrap();
    let cfg = configs().join("affine_toy.json");
    let o = tsinc(&["saddle", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn shipped_configs_validate() {
    for name in ["saddle_canonical", "saddle_custom", "affine_toy", "sign_di"] {
        let out = TempDir::new().unwrap();
        let cfg = configs().join(format!("{name}.json"));
        let o = tsinc(&["validate", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stdout));
    }
}
