use std::path::Path;
use std::process::{Command, Output};

fn filterlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filterlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("FILTERLAB_WORKERS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn pinv_suite_passes_and_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = filterlab(&["pinv-test", "--trials", "200", "--out", "r"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("r/pinv.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    let s = summary(&tmp.path().join("r"));
    assert_eq!(s["all_passed"], true);
    assert_eq!(s["verdicts"][0]["statistics"][1]["value"], "2.0000000000000000e2");
    assert_eq!(s["files"][0]["name"], "pinv.csv");
}

#[test]
fn dt_not_dividing_the_horizon_exits_2_with_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "seed = 3\ndt = 0.003\n").unwrap();
    let o = filterlab(&["simulate", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:2: dt = 0.003 does not divide T = 1"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "seed = 3\nparticels = 10\n").unwrap();
    let o = filterlab(&["simulate", "--config", "c.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.toml:2:"), "{}", stderr(&o));
    let o = filterlab(&["simulate", "--scenario", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown scenario"));
    let o = filterlab(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_worker_variable_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_filterlab"))
        .args(["pinv-test", "--trials", "5"])
        .current_dir(tmp.path())
        .env("FILTERLAB_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("FILTERLAB_WORKERS"));
}

#[test]
fn degenerate_filter_reports_a_vanishing_stochastic_term() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "N = 300\ndt = 0.01\n[probe]\nphis = [\"x\", \"sin\"]\n").unwrap();
    let o = filterlab(&["filter", "--config", "c.toml", "--scenario", "degenerate_k0"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(&tmp.path().join("out"));
    let stats = s["verdicts"][0]["statistics"].as_array().unwrap();
    for name in ["x_max_stochastic_term", "sin_max_stochastic_term"] {
        let v = stats.iter().find(|x| x["name"] == name).unwrap();
        assert_eq!(v["value"], "0.0000000000000000e0");
    }
    let csv = std::fs::read_to_string(tmp.path().join("out/residual.csv")).unwrap();
    assert!(csv.starts_with("t,residual_x,stochastic_x,residual_sin,stochastic_sin\n"));
    assert_eq!(csv.lines().count(), 102);
}

#[test]
fn simulate_and_grid_write_csv() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.toml"),
        "scenario = \"decoupled_classical\"\nsolver = \"both\"\nreplicas = 2\nN = 200\n",
    )
    .unwrap();
    let o = filterlab(&["simulate", "--config", "c.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("out/paths_1.csv").exists());
    let o = filterlab(&["zakai-grid", "--config", "c.toml", "--out", "g"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("g/grid_T.csv")).unwrap();
    assert!(csv.starts_with("x,re,im\n"));
    assert_eq!(csv.lines().count(), 202);
    let names: Vec<String> = summary(&tmp.path().join("g"))["verdicts"][0]["statistics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap().to_string())
        .collect();
    assert!(names.contains(&"particle_tanh".to_string()));
}

#[test]
fn duality_on_unsupported_coefficients_names_the_failed_test() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "replicas = 100\nN = 4\ndt = 0.01\n").unwrap();
    let o = filterlab(&["duality", "--config", "c.toml", "--scenario", "correlated_bounded"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FAILED: duality_gap"), "{}", stderr(&o));
    let s = summary(&tmp.path().join("out"));
    assert_eq!(s["verdicts"].as_array().unwrap().len(), 3);
}

#[test]
fn duality_report_has_the_documented_columns() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.toml"),
        "scenario = \"decoupled_classical\"\nsolver = \"both\"\nreplicas = 100\nN = 4\ndt = 0.01\n[probe]\nfrequencies = [\"0\", \"1,-1\"]\n",
    )
    .unwrap();
    let o = filterlab(&["duality", "--config", "c.toml"], tmp.path());
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("out/duality.csv")).unwrap();
    assert!(csv.starts_with("r_label,phi_label,lhs_re,lhs_im,rhs_re,rhs_im,gap,se_lhs,se_rhs,verdict\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert_eq!(summary(&tmp.path().join("out"))["verdicts"].as_array().unwrap().len(), 4);
}

#[test]
fn accept_is_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |w: &'static str, out: &'static str| {
        vec!["accept", "--scale", "smoke", "--criteria", "1,3,4", "--seed", "42", "--workers", w, "--out", out]
    };
    for (w, out) in [("1", "a"), ("4", "b"), ("4", "c")] {
        let o = filterlab(&args(w, out), tmp.path());
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
    }
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("summary.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("b"), read("c"));
}
