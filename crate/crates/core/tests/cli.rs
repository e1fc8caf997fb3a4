use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cdconv");

const GAUSSIAN: &str = r#"
seed = 5

[family]
kind = "gaussian_mean"
sigma0 = [[1.0, 0.5], [0.5, 1.0]]
stat_bound_c = 6.0

[cd]
eta = 0.1
m = 3
steps = 50
starts = [[3.0, 3.0], [-3.0, -3.0]]

[data]
theta_star = [0.0, 0.0]
n = 200
n_list = [50, 100]
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn cdconv(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CDCONV_OUT").output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = cdconv(args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    (header, rows)
}

fn records(dir: &Path) -> Vec<Value> {
    let text = std::fs::read_to_string(dir.join("diagnostics.json")).unwrap();
    serde_json::from_str::<Value>(&text).unwrap().as_array().unwrap().clone()
}

fn has_flag(rec: &Value, flag: &str) -> bool {
    rec["flags"].as_array().unwrap().iter().any(|f| f == flag)
}

#[test]
fn unknown_key_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{GAUSSIAN}\n[cd.extra]\nfoo = 1\n"));
    let out = cdconv(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
}

#[test]
fn bad_value_exits_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &GAUSSIAN.replace("eta = 0.1", "eta = -1.0"));
    let out = cdconv(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cd.eta"));
}

#[test]
fn run_writes_trajectories_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", GAUSSIAN);
    let out = dir.path().join("out");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    for i in 0..2 {
        let (header, rows) = csv_rows(&out.join(format!("traj_{i}_5.csv")));
        assert_eq!(header, ["t", "theta_1", "theta_2", "gcd_1", "gcd_2"]);
        assert_eq!(rows.len(), 51);
        let (_, means) = csv_rows(&out.join(format!("traj_{i}_5_mean.csv")));
        assert_eq!(means.len(), 51);
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["config"]["seed"], 5);
    // The manifest reproduces the run.
    let again = dir.path().join("again");
    run_ok(&["run", "--config", out.join("manifest.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    for name in ["traj_0_5.csv", "traj_1_5.csv"] {
        assert_eq!(std::fs::read(out.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap());
    }
}

#[test]
fn zero_steps_writes_only_the_start() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &GAUSSIAN.replace("steps = 50", "steps = 0"));
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let (_, rows) = csv_rows(&dir.path().join("traj_0_5.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][..3], &[0.0, 3.0, 3.0]);
    assert!(rows[0][3].is_nan());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", GAUSSIAN);
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "9"]);
    assert!(dir.path().join("traj_0_9.csv").exists());
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", GAUSSIAN);
    let target = dir.path().join("from-env");
    let out = Command::new(BIN)
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("CDCONV_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(target.join("manifest.json").exists());
}

#[test]
fn too_few_sweep_seeds_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{GAUSSIAN}\n[diagnostics]\nsweep_seeds = 1\n"));
    let out = cdconv(&["sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diagnostics.sweep_seeds"));
}

#[test]
fn zero_jobs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdconv(&["run", "--preset", "gaussian-n50", "--out", dir.path().to_str().unwrap(), "--jobs", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn job_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &GAUSSIAN.replace("n = 200", "n = 700"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for verb in ["run", "gradient-field"] {
        run_ok(&[verb, "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--jobs", "1"]);
        run_ok(&[verb, "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--jobs", "4"]);
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
        }
    }
}

#[test]
fn gradient_field_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    run_ok(&["gradient-field", "--preset", "gaussian-n50", "--out", g.to_str().unwrap()]);
    let (header, rows) = csv_rows(&g.join("gradient_field_1_2.csv"));
    assert_eq!(header, ["theta_1", "theta_2", "exact_1", "exact_2", "rep", "gcd_1", "gcd_2", "dir_1", "dir_2"]);
    assert_eq!(rows.len(), 9 * 9 * 5);

    let r = dir.path().join("r");
    run_ok(&["gradient-field", "--preset", "rbm-n100", "--out", r.to_str().unwrap()]);
    let mut files = 0;
    for entry in std::fs::read_dir(&r).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap().to_str().unwrap().starts_with("gradient_field_") {
            files += 1;
            assert_eq!(csv_rows(&path).1.len(), 6 * 6 * 5);
        }
    }
    assert_eq!(files, 6);
}

/// Median over grid points of the circular spread `1 − |mean unit vector|`
/// of the CD gradient directions.
fn median_spread(path: &Path) -> f64 {
    let (_, rows) = csv_rows(path);
    let mut by_point: std::collections::BTreeMap<(i64, i64), (f64, f64, f64)> = Default::default();
    for r in rows {
        let key = ((r[0] * 1e6).round() as i64, (r[1] * 1e6).round() as i64);
        if r[7].is_nan() {
            continue;
        }
        let e = by_point.entry(key).or_default();
        e.0 += r[7];
        e.1 += r[8];
        e.2 += 1.0;
    }
    let mut spreads: Vec<f64> = by_point.values().map(|(x, y, k)| 1.0 - (x * x + y * y).sqrt() / k).collect();
    spreads.sort_by(f64::total_cmp);
    spreads[spreads.len() / 2]
}

#[test]
fn gradient_directions_tighten_with_more_data() {
    let dir = tempfile::tempdir().unwrap();
    let spread = |n: usize| {
        let body = GAUSSIAN.replace("n = 200", &format!("n = {n}"))
            + "\n[gradient_field]\nlower = [-4.0, -4.0]\nupper = [4.0, 4.0]\npoints_per_dim = 9\nreplicates = 20\n";
        let cfg = write_config(dir.path(), &format!("c{n}.toml"), &body);
        let out = dir.path().join(format!("f{n}"));
        run_ok(&["gradient-field", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        median_spread(&out.join("gradient_field_1_2.csv"))
    };
    let (small, large) = (spread(50), spread(500));
    assert!(large < small, "spread n=50 {small}, n=500 {large}");
    assert!((0.0..=1.0).contains(&small));
}

#[test]
fn exact_resample_field_is_unbiased() {
    let dir = tempfile::tempdir().unwrap();
    let body = GAUSSIAN.to_string()
        + "\n[kernel]\nkind = \"exact_resample\"\n\n[gradient_field]\nlower = [-4.0, -4.0]\nupper = [4.0, 4.0]\npoints_per_dim = 5\nreplicates = 40\n";
    let cfg = write_config(dir.path(), "c.toml", &body);
    run_ok(&["gradient-field", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let (_, rows) = csv_rows(&dir.path().join("gradient_field_1_2.csv"));
    for point in rows.chunks(40) {
        for (exact, col) in [(point[0][2], 5), (point[0][3], 6)] {
            let xs: Vec<f64> = point.iter().map(|r| r[col]).collect();
            let k = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / k;
            let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
            assert!((mean - exact).abs() <= 4.0 * se, "{mean} vs {exact} (se {se})");
        }
    }
}

#[test]
fn diagnose_with_exact_resampling_passes_its_checks() {
    let dir = tempfile::tempdir().unwrap();
    let body = GAUSSIAN.replace("n = 200", "n = 500").replace("steps = 50", "steps = 200")
        + "\n[kernel]\nkind = \"exact_resample\"\n\n[diagnostics]\nhitting_replicates = 50\n\
           checks = [\"spectral\", \"drift_constants\", \"bias\", \"variance\", \"drift\", \"hitting_time\", \"concentration\"]\n";
    let cfg = write_config(dir.path(), "c.toml", &body);
    run_ok(&["diagnose", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let recs = records(dir.path());
    let spectral = recs.iter().find(|r| r["check"] == "spectral").unwrap();
    assert_eq!(spectral["estimate"].as_f64(), Some(0.0));
    let drift: Vec<&Value> = recs.iter().filter(|r| r["check"] == "drift").collect();
    assert_eq!(drift.len(), 5);
    assert!(drift.iter().all(|r| r["pass"] == true));
    assert!(recs.iter().all(|r| r["pass"] != false));
    assert!(dir.path().join("diagnostics.csv").exists());
}

#[test]
fn diagnose_with_huge_step_size_flags_instead_of_failing() {
    let dir = tempfile::tempdir().unwrap();
    let body = GAUSSIAN.replace("eta = 0.1", "eta = 50.0")
        + "\n[kernel]\nkind = \"exact_resample\"\n\n[diagnostics]\n\
           checks = [\"drift_constants\", \"drift\", \"hitting_time\"]\n";
    let cfg = write_config(dir.path(), "c.toml", &body);
    run_ok(&["diagnose", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let recs = records(dir.path());
    let constants = recs.iter().find(|r| r["check"] == "drift_constants").unwrap();
    assert!(has_flag(constants, "condition-violated"));
    for r in recs.iter().filter(|r| r["check"] == "drift" || r["check"] == "hitting_time") {
        assert!(r["pass"].is_null());
        assert!(has_flag(r, "skipped"));
    }
}

#[test]
fn sweep_writes_summary_and_per_seed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &GAUSSIAN.replace("steps = 50", "steps = 20"));
    run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let summary = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let per_seed = std::fs::read_to_string(dir.path().join("sweep_seeds.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 1 + 2 * 20);
}
