use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ensemble-bridge"))
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn report(o: &Output) -> Value {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn cosine_config(eps: f64) -> Value {
    json!({
        "ensemble": {"kind": "scalar-decay"},
        "epsilon": eps,
        "t_f": 1.0,
        "time_steps": 100,
        "theta_nodes": 32,
        "marginals": {"kind": "cosine-mirror"},
        "grids": {"n0": 64, "nf": 64},
        "montecarlo": {"n_samples": 400, "seed": 11}
    })
}

fn rotation_config(eps: f64) -> Value {
    json!({
        "ensemble": {"kind": "planar-rotation"},
        "epsilon": eps,
        "t_f": 1.0,
        "time_steps": 200,
        "marginals": {"kind": "dirac", "x0": [1.0, 0.0], "xf": [0.0, 1.0]}
    })
}

fn entry(m: &Value, i: usize, j: usize) -> f64 {
    m[i][j].as_f64().unwrap()
}

#[test]
fn gramian_of_rotation_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rot.json", &rotation_config(0.1));
    let r = report(&run(&["gramian"], &cfg, &dir.path().join("out")));
    let m = &r["state_map_tf"];
    let (s, c) = (1f64.sin(), 1.0 - 1f64.cos());
    assert!((entry(m, 0, 0) - s).abs() < 1e-6 && (entry(m, 1, 1) - s).abs() < 1e-6);
    assert!((entry(m, 0, 1) + c).abs() < 1e-6 && (entry(m, 1, 0) - c).abs() < 1e-6);
    let g = &r["gramian"];
    assert!((entry(g, 0, 0) - 0.972770752470645464).abs() < 1e-9);
    assert!(entry(g, 0, 1).abs() < 1e-12);
    for f in ["gramian.json", "phi.csv", "state_map.csv", "gramian.manifest.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn gramian_of_constant_and_decay_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = rotation_config(0.1);
    cfg["ensemble"] = json!({"kind": "constant", "a": [[0.0]], "b": [[1.0]]});
    cfg["marginals"] = json!({"kind": "dirac", "x0": [0.0], "xf": [1.0]});
    let p = write_config(dir.path(), "c.json", &cfg);
    let r = report(&run(&["gramian"], &p, &dir.path().join("c")));
    assert!((entry(&r["gramian"], 0, 0) - 1.0).abs() < 1e-12);

    let p = write_config(dir.path(), "d.json", &cosine_config(0.1));
    let r = report(&run(&["gramian"], &p, &dir.path().join("d")));
    assert!((entry(&r["gramian"], 0, 0) - 0.645751112851244262).abs() < 1e-9);
}

#[test]
fn uncontrollable_ensemble_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = rotation_config(0.1);
    cfg["ensemble"] = json!({"kind": "constant", "a": [[0.0, 0.0], [0.0, 0.0]], "b": [[1.0], [0.0]]});
    let p = write_config(dir.path(), "u.json", &cfg);
    let o = run(&["gramian"], &p, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn solve_converges_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "cos.json", &cosine_config(0.1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let r = report(&run(&["solve"], &p, &a));
    assert!(r["residual"].as_f64().unwrap() <= 1e-9);
    report(&run(&["solve"], &p, &b));
    for f in ["potentials/phi0.csv", "potentials/phif.csv", "solve.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = read_json(&a.join("solve.manifest.json"));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["solver_residual"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn dirac_marginals_solve_in_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "rot.json", &rotation_config(0.1));
    let r = report(&run(&["solve"], &p, &dir.path().join("out")));
    assert_eq!(r["iterations"], json!(1));
}

#[test]
fn nonconvergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cosine_config(0.1);
    cfg["sinkhorn"] = json!({"tol": 1e-14, "max_iter": 1});
    let p = write_config(dir.path(), "cos.json", &cfg);
    let o = run(&["solve"], &p, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_configurations_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cosine_config(-1.0);
    let p = write_config(dir.path(), "neg.json", &cfg);
    assert_eq!(run(&["gramian"], &p, &dir.path().join("o")).status.code(), Some(2));
    cfg = cosine_config(0.1);
    cfg["unknown_field"] = json!(1);
    let p = write_config(dir.path(), "unk.json", &cfg);
    assert_eq!(run(&["gramian"], &p, &dir.path().join("o")).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["gramian"], &missing, &dir.path().join("o")).status.code(), Some(2));
    let mut cfg = cosine_config(0.1);
    cfg["marginals"] = json!({"kind": "files", "rho0": "nope.csv", "rhof": "nope.csv"});
    let p = write_config(dir.path(), "files.json", &cfg);
    assert_eq!(run(&["gramian"], &p, &dir.path().join("o")).status.code(), Some(2));
    // cosine marginals on a planar ensemble
    let mut cfg = rotation_config(0.1);
    cfg["marginals"] = json!({"kind": "cosine-mirror"});
    let p = write_config(dir.path(), "dim.json", &cfg);
    assert_eq!(run(&["solve"], &p, &dir.path().join("o")).status.code(), Some(2));
}

#[test]
fn pinned_simulation_writes_one_file_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "rot.json", &rotation_config(0.1));
    let out = dir.path().join("out");
    let r = report(&run(&["simulate", "--mode", "pinned", "--seeds", "10"], &p, &out));
    assert_eq!(r["runs"].as_array().unwrap().len(), 10);
    let files = std::fs::read_dir(out.join("simulate")).unwrap().count();
    assert_eq!(files, 10);
    let m = read_json(&out.join("simulate.manifest.json"));
    assert_eq!(m["seeds"].as_array().unwrap().len(), 10);
    for run in r["runs"].as_array().unwrap() {
        assert!(run["terminal_error"].as_f64().unwrap() < 0.3);
    }
    let header = std::fs::read_to_string(out.join("simulate/pinned-seed-0.csv")).unwrap();
    assert!(header.starts_with("t,x1,x2,u1,u2,cost"), "{}", &header[..40]);
}

#[test]
fn noiseless_pinned_run_matches_gramian_cost() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "rot.json", &rotation_config(0.0));
    let out = dir.path().join("out");
    let r = report(&run(&["simulate", "--seeds", "5", "--x0", "-1,0.5", "--xf", "0.5,-2"], &p, &out));
    let runs = r["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert!(runs[0]["terminal_error"].as_f64().unwrap() < 1e-9);
    assert!(r["cost_relative_deviation"].as_f64().unwrap() < 1e-6);
}

#[test]
fn bridge_simulation_reuses_matching_potentials() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "cos.json", &cosine_config(0.1));
    let out = dir.path().join("out");
    let fresh = report(&run(&["simulate", "--mode", "bridge", "--seeds", "3", "--x0", "0.3"], &p, &out));
    assert_eq!(fresh["potentials_reused"], json!(false));
    report(&run(&["solve"], &p, &out));
    let reused = report(&run(&["simulate", "--mode", "bridge", "--seeds", "3", "--x0", "0.3"], &p, &out));
    assert_eq!(reused["potentials_reused"], json!(true));
    assert_eq!(fresh["runs"], reused["runs"]);
    assert_eq!(std::fs::read_dir(out.join("simulate")).unwrap().count(), 3);
}

#[test]
fn montecarlo_reports_floor_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "cos.json", &cosine_config(0.1));
    let out = dir.path().join("out");
    let r = report(&run(&["montecarlo"], &p, &out));
    let (l1, floor) = (r["l1"].as_f64().unwrap(), r["statistical_floor"].as_f64().unwrap());
    assert!(l1 <= 3.0 * floor, "{l1} vs {floor}");
    let m = read_json(&out.join("montecarlo.manifest.json"));
    assert_eq!(m["seeds"], json!([11]));
    assert_eq!(m["command"], json!("montecarlo"));
    assert!(out.join("montecarlo/histogram.csv").exists());
}

#[test]
fn relative_marginal_files_resolve_against_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let n = 32;
    let csv = |f: &dyn Fn(f64) -> f64| {
        let mut s = String::from("x1,density\n");
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            s.push_str(&format!("{x},{}\n", f(x)));
        }
        s
    };
    std::fs::write(data.join("rho0.csv"), csv(&|x| 1.0 + (x - 0.5))).unwrap();
    std::fs::write(data.join("rhof.csv"), csv(&|x| 1.0 - (x - 0.5))).unwrap();
    let mut cfg = cosine_config(0.1);
    cfg["marginals"] = json!({"kind": "files", "rho0": "data/rho0.csv", "rhof": "data/rhof.csv"});
    let p = write_config(dir.path(), "files.json", &cfg);
    let r = report(&bin().current_dir("/").args(["solve", "--config"]).arg(&p).arg("--out").arg(dir.path().join("o")).output().unwrap());
    assert!(r["residual"].as_f64().unwrap() <= 1e-9);
    assert_eq!(r["source_cells"], json!(n));
}

#[test]
fn verify_passes_and_catches_flipped_noise_sign() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("verify").arg("--out").arg(dir.path().join("v")).output().unwrap();
    let r = report(&o);
    assert_eq!(r["passed"], json!(true));
    assert_eq!(r["checks"].as_array().unwrap().len(), 4);
    let o = bin().args(["verify", "--flip-noise-sign"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_refuses_mixed_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let a = write_config(dir.path(), "a.json", &rotation_config(0.1));
    let b = write_config(dir.path(), "b.json", &rotation_config(0.2));
    report(&run(&["gramian"], &a, &out));
    report(&run(&["gramian"], &a, &out));
    assert!(run(&["verify"], &a, &out).status.success());
    report(&run(&["solve"], &b, &out));
    let o = bin().arg("verify").arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
