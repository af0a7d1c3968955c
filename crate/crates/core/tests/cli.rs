mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::config_path;
use gn_tracking::config::ExperimentConfig;
use gn_tracking::{GridSignal, TimeGrid};
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gn-tracking"))
        .args(args)
        .output()
        .expect("failed to start the binary")
}

fn run_config(command: &str, config: &Path, out: &Path) -> Output {
    run(&[command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Writes a copy of a shipped config with `edit` applied to its JSON.
fn edited_config(dir: &TempDir, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut value: Value = serde_json::from_str(&fs::read_to_string(config_path(name)).unwrap()).unwrap();
    edit(&mut value);
    let path = dir.path().join(name);
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn csv_column(path: &Path, name: &str) -> Vec<Option<f64>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let idx = reader.headers().unwrap().iter().position(|h| h == name).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            let field = &r[idx];
            (!field.is_empty()).then(|| field.parse().unwrap())
        })
        .collect()
}

#[test]
fn every_command_is_byte_reproducible() {
    let config = config_path("linear.json");
    for command in ["simulate", "solve", "compare", "verify"] {
        let tmp = TempDir::new().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let first = run_config(command, &config, &a);
        let second = run_config(command, &config, &b);
        assert_eq!(code(&first), 0, "{command}: {}", String::from_utf8_lossy(&first.stderr));
        assert_eq!(code(&second), 0);
        let (fa, fb) = (read_dir(&a), read_dir(&b));
        assert!(!fa.is_empty(), "{command} wrote nothing");
        assert_eq!(fa, fb, "{command} output differs between runs");
    }
}

#[test]
fn seed_changes_the_synthetic_reference() {
    let config = config_path("linear.json");
    let tmp = TempDir::new().unwrap();
    let dirs: Vec<PathBuf> = ["7", "8"].iter().map(|s| tmp.path().join(s)).collect();
    for (seed, dir) in ["7", "8"].iter().zip(&dirs) {
        let out = run(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code(&out), 0);
    }
    assert_ne!(fs::read(dirs[0].join("u_ref.csv")).unwrap(), fs::read(dirs[1].join("u_ref.csv")).unwrap());
}

#[test]
fn simulated_files_lie_on_the_declared_grid() {
    let tmp = TempDir::new().unwrap();
    let out = run_config("simulate", &config_path("experiment2.json"), tmp.path());
    assert_eq!(code(&out), 0);
    let grid = TimeGrid::with_step(0.0, 10.0, 0.01).unwrap();
    for (file, dim) in [("u_ref.csv", 1), ("y_ref.csv", 1), ("x_ref.csv", 4)] {
        let s = GridSignal::load_csv(&tmp.path().join(file)).unwrap();
        let g = s.grid();
        assert_eq!(g.n_steps(), grid.n_steps(), "{file}");
        assert!((g.t0() - grid.t0()).abs() < 1e-12 && (g.tf() - grid.tf()).abs() < 1e-9, "{file}");
        assert_eq!(s.dim(), dim);
    }
}

#[test]
fn zero_road_gives_zero_reference() {
    let tmp = TempDir::new().unwrap();
    let config = edited_config(&tmp, "experiment2.json", |v| {
        v["reference"] = json!({ "kind": "zero", "p": [230.0] });
    });
    let out_dir = tmp.path().join("out");
    assert_eq!(code(&run_config("simulate", &config, &out_dir)), 0);
    let y = GridSignal::load_csv(&out_dir.join("y_ref.csv")).unwrap();
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.json");
    let out = run_config("solve", &missing, tmp.path());
    assert_eq!(code(&out), 2);

    let broken = tmp.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    assert_eq!(code(&run_config("solve", &broken, tmp.path())), 2);

    let unknown = edited_config(&tmp, "linear.json", |v| {
        v["solver"]["max_outr"] = json!(3);
    });
    let out = run_config("solve", &unknown, tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_outr"));

    let bad_grid = edited_config(&tmp, "linear.json", |v| {
        v["grid"]["dt"] = json!(-0.1);
    });
    assert_eq!(code(&run_config("simulate", &bad_grid, tmp.path())), 2);
}

#[test]
fn riccati_without_control_regularization_is_refused() {
    let tmp = TempDir::new().unwrap();
    let config = edited_config(&tmp, "experiment2.json", |v| {
        v["weights"]["alpha_u"] = json!(0.0);
    });
    let out = run_config("verify", &config, &tmp.path().join("out"));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha_u"));
}

#[test]
fn verify_detects_a_corrupted_jacobian() {
    let tmp = TempDir::new().unwrap();
    let config = edited_config(&tmp, "linear.json", |v| {
        v["verify"]["fault_injection"] = json!(1e-3);
    });
    let out_dir = tmp.path().join("out");
    let out = run_config("verify", &config, &out_dir);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("jacobian_consistency"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], json!(false));
}

#[test]
fn exact_start_terminates_at_once() {
    let tmp = TempDir::new().unwrap();
    let out = run_config("solve", &config_path("self_test.json"), tmp.path());
    assert_eq!(code(&out), 0);
    assert_eq!(csv_column(&tmp.path().join("iterations.csv"), "J"), vec![Some(0.0)]);
}

#[test]
fn shipped_configs_round_trip() {
    for entry in fs::read_dir(config_path("")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        cfg.build().unwrap();
    }
}

#[test]
fn linear_compare_reaches_a_common_limit() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run_config("compare", &config_path("linear.json"), tmp.path())), 0);
    let path = tmp.path().join("compare.csv");
    let gn: Vec<f64> = csv_column(&path, "J_gn").into_iter().flatten().collect();
    let gd: Vec<f64> = csv_column(&path, "J_gd").into_iter().flatten().collect();
    let limit = *gn.last().unwrap();
    assert!((gd.last().unwrap() - limit).abs() <= 1e-4 * limit);
    assert!((gn[1] - limit).abs() <= 1e-10 * limit);
}

#[test]
fn experiment_two_log_is_decreasing_without_initial_regularization() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run_config("solve", &config_path("experiment2.json"), tmp.path())), 0);
    let log = tmp.path().join("iterations.csv");
    let j: Vec<f64> = csv_column(&log, "J").into_iter().flatten().collect();
    assert_eq!(j.len(), 6);
    assert!(j.windows(2).all(|w| w[1] < w[0]), "{j:?}");
    assert_eq!(csv_column(&log, "reg_u")[0], Some(0.0));
    for k in [1, 3, 5] {
        assert!(tmp.path().join(format!("y_iter_{k}.csv")).exists());
    }
}

#[test]
fn experiment_one_parameters_stay_in_bounds() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run_config("solve", &config_path("experiment1.json"), tmp.path())), 0);
    let p: Vec<f64> = csv_column(&tmp.path().join("iterations.csv"), "p_0_kN_per_m")
        .into_iter()
        .flatten()
        .collect();
    assert!(p.len() > 1);
    assert!(p.iter().all(|v| (195.5 - 1e-9..=264.5 + 1e-9).contains(v)), "{p:?}");
    assert!(p.iter().any(|v| *v > 230.0));
}
