use std::path::Path;
use std::process::{Command, Output};

use mfg_cli::report::Header;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 42
out = "run"
[model]
preset = "lq"
[grid]
steps = 20
[ensemble]
paths = 8
particles = 32
"#;

fn mfg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn with_preset(preset: &str) -> String {
    SMALL.replace("\"lq\"", &format!("\"{preset}\""))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn missing_preset_is_a_config_error_naming_the_field() {
    let dir = setup("[model]\nhorizon = 1.0\n");
    let o = mfg(dir.path(), &["solve", "--config", "run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("preset"), "{}", stderr(&o));
}

#[test]
fn misspelled_keys_are_config_errors() {
    let dir = setup(&format!("{SMALL}[solver]\nmethod = \"continuation\"\ntoll = 1e-4\n"));
    let o = mfg(dir.path(), &["solve", "--config", "run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("toll"), "{}", stderr(&o));
}

#[test]
fn solve_is_reproducible_across_runs_and_thread_counts() {
    let dir = setup(SMALL);
    let a = mfg(dir.path(), &["solve", "--config", "run.toml", "--out", "a", "--threads", "1"]);
    let b = mfg(dir.path(), &["solve", "--config", "run.toml", "--out", "b", "--threads", "3"]);
    assert_eq!((code(&a), code(&b)), (0, 0), "{}", stderr(&a));
    for name in ["residuals.csv", "conditional_mean.csv", "control_field.csv", "trajectories.csv", "feedback.json"] {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    let (ra, rb) = (json(&dir.path().join("a/report.json")), json(&dir.path().join("b/report.json")));
    for key in ["residuals", "cost", "optimality_residual", "max_ratio", "gamma_schedule"] {
        assert_eq!(ra[key], rb[key], "{key}");
    }
}

#[test]
fn every_output_declares_hash_and_seed() {
    let dir = setup(SMALL);
    assert_eq!(code(&mfg(dir.path(), &["solve", "--config", "run.toml", "--seed", "7"])), 0);
    let out = dir.path().join("run");
    let mut hashes = Vec::new();
    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                let h = Header::parse(text.lines().next().unwrap()).expect("header line");
                assert_eq!(h.seed, 7);
                hashes.push(h.config_hash);
            }
            _ => {
                let v: Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["seed"], 7);
                hashes.push(v["config_hash"].as_str().unwrap().to_string());
            }
        }
    }
    assert!(hashes.len() >= 6);
    assert!(hashes.iter().all(|h| h == &hashes[0] && h.len() == 64));
}

fn solve_then_resume(method: &str) -> (TempDir, Value, Value) {
    let dir = setup(&format!("{SMALL}[solver]\nmethod = \"{method}\"\n"));
    assert_eq!(code(&mfg(dir.path(), &["solve", "--config", "run.toml"])), 0);
    let first = json(&dir.path().join("run/report.json"));
    let o = mfg(dir.path(), &["solve", "--config", "run.toml", "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = json(&dir.path().join("run/report.json"));
    assert_eq!(again["resumed"], true);
    (dir, first, again)
}

fn cost(report: &Value) -> f64 {
    report["cost"].as_f64().unwrap()
}

#[test]
fn resume_from_a_converged_run_takes_at_most_one_iteration() {
    for method in ["continuation", "given_m"] {
        let (_dir, first, again) = solve_then_resume(method);
        assert!(again["final_iterations"].as_u64().unwrap() <= 1, "{method}: {}", again["residuals"]);
        assert!((cost(&first) - cost(&again)).abs() <= 1e-3 * cost(&first).abs(), "{method}");
    }
}

/// A stitched solution is a fixed point of the interval maps, not of the
/// global γ = 1 iteration; resuming refines it by the decoupling-field
/// error, after which a second resume is immediate.
#[test]
fn resume_from_a_stitched_run_refines_it_to_the_global_fixed_point() {
    let (dir, first, again) = solve_then_resume("stitched");
    assert!((cost(&first) - cost(&again)).abs() <= 1e-2 * cost(&first).abs());
    assert_eq!(code(&mfg(dir.path(), &["solve", "--config", "run.toml", "--resume"])), 0);
    let third = json(&dir.path().join("run/report.json"));
    assert!(third["final_iterations"].as_u64().unwrap() <= 1, "{}", third["residuals"]);
}

#[test]
fn resume_refuses_state_from_another_seed() {
    let dir = setup(SMALL);
    assert_eq!(code(&mfg(dir.path(), &["solve", "--config", "run.toml"])), 0);
    let o = mfg(dir.path(), &["solve", "--config", "run.toml", "--resume", "--seed", "43"]);
    assert_eq!(code(&o), 2);
    let dir = setup(SMALL);
    assert_eq!(code(&mfg(dir.path(), &["solve", "--config", "run.toml", "--resume"])), 2);
}

#[test]
fn validate_passes_lq_and_names_h4_for_a_concave_terminal_cost() {
    let dir = setup(SMALL);
    let o = mfg(dir.path(), &["validate", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("run/validate.json"))["all_passed"], true);

    let dir = setup(&with_preset("concave_terminal"));
    let o = mfg(dir.path(), &["validate", "--config", "run.toml"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("H4"), "{}", stderr(&o));
    let failed = json(&dir.path().join("run/validate.json"))["failed"].clone();
    assert!(failed.as_array().unwrap().iter().any(|f| f == "H4"), "{failed}");
}

/// Recomputes the smallness ratios from the reported structural constants
/// with the documented Gronwall formulas.
#[test]
fn validate_ratios_match_a_recomputation() {
    for (preset, extra) in [("lq", ""), ("lq", "params = { r = 10.0, s = 0.01 }\n"), ("mean_reverting", "")] {
        let config = with_preset(preset).replace("[grid]", &format!("{extra}[grid]"));
        let dir = setup(&config);
        assert_eq!(code(&mfg(dir.path(), &["validate", "--config", "run.toml"])), 0);
        let c = &json(&dir.path().join("run/validate.json"))["condition"];
        let f = |k: &str| c[k].as_f64().unwrap_or(f64::NAN);
        let (l, b_u, l_m, c_f, t) = (f("l"), f("b_u"), f("l_m"), f("c_f"), f("horizon"));
        let c1 = 3.0 * (1.0 + t) * (1.0 + l * l * t) * (3.0 * l * l * t * (t + 4.0)).exp();
        let c2 = 8.0 * (1.0 + l * l) * (1.0 + t) * (8.0 * l * l * t * (t + 1.0)).exp();
        let delta = 2.0 / (c2 * (1.0 + c1) * (t + 1.0) + 3.0 * t * c1);
        let close = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-12 * b.abs();
        assert!(close(f("continuation_ratio"), l_m / c_f));
        assert!(close(f("local_ratio"), b_u / c_f));
        assert!(close(f("local_bound"), 1.0 / (24.0 * l * l)));
        let stitch = (b_u / c_f * (1.0 + 1.0 / c_f).powi(4)).max(l_m / c_f);
        assert!(close(f("stitching_ratio"), stitch));
        if c1.is_finite() {
            assert!(close(f("c1"), c1) && close(f("c2"), c2) && close(f("delta"), delta), "{c}");
        }
        assert_eq!(c["continuation_ok"], l_m / c_f <= f("delta"));
    }
}

#[test]
fn compare_oracle_needs_a_linear_quadratic_model() {
    let dir = setup(&with_preset("tanh_drift"));
    let o = mfg(dir.path(), &["compare-oracle", "--config", "run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no oracle"), "{}", stderr(&o));
}

#[test]
fn compare_oracle_writes_error_tables() {
    let dir = setup(&format!("{SMALL}[oracle]\ndt_levels = [5, 10, 20]\nfine_factor = 2\nparticle_levels = [8, 16, 32]\n"));
    let o = mfg(dir.path(), &["compare-oracle", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("run");
    let errs = csv_rows(&out.join("oracle_errors.csv"));
    assert_eq!(errs.len(), 1);
    let control: f64 = errs[0][1].parse().unwrap();
    assert!(control < 0.05, "{control}");
    assert_eq!(csv_rows(&out.join("oracle_coefficients.csv")).len(), 21);
    assert_eq!(csv_rows(&out.join("dt_trend.csv")).len(), 3);
    let k: Vec<String> = csv_rows(&out.join("k_trend.csv")).iter().map(|r| r[1].to_string()).collect();
    assert_eq!(k, ["8", "16", "32"]);
}

#[test]
fn nash_writes_one_row_per_size_and_seed() {
    let dir = setup(&format!("{SMALL}[nash]\nplayers = [2, 8]\nseeds = [1, 2, 3]\nreplications = 64\n"));
    let o = mfg(dir.path(), &["nash", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("run/nash_gaps.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let (gap, se): (f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!(gap >= -3.0 * se, "{r:?}");
    }
    let report = json(&dir.path().join("run/nash_report.json"));
    assert_eq!(report["median_gaps"].as_array().unwrap().len(), 2);
}

#[test]
fn stitched_run_reports_agreement_with_continuation() {
    let dir = setup(&format!("{SMALL}[solver]\nmethod = \"stitched\"\nagreement = true\n"));
    assert_eq!(code(&mfg(dir.path(), &["solve", "--config", "run.toml"])), 0);
    let r = json(&dir.path().join("run/report.json"));
    let d = r["method_agreement"].as_f64().unwrap();
    assert!(d <= 0.06, "{d}");
    assert!(r["intervals"]["boundaries"].as_array().unwrap().len() >= 5);
}
