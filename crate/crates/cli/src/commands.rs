//! The five subcommands. Each returns a JSON report for stdout and writes
//! its artifacts plus a manifest into the output directory.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Value};

use ensemble_bridge::controllers::{BridgePlan, NoiseHistory};
use ensemble_bridge::marginals::{GridDensity, SchrodingerPotentials};
use ensemble_bridge::pipeline::BridgeProblem;
use ensemble_bridge::simulator::{
    monte_carlo_transport, run_distribution_bridge_with, run_pinned_bridge_with, statistical_floor, Trajectory,
};
use ensemble_bridge::verify::{run_suite, VerifyOptions};
use ensemble_bridge::{averaged_input_map, EnsembleSystem, PropagatorCache, TimeGrid};

use crate::artifacts::{manifest_path, read_manifests, sha256_hex, write_atomic, ArtifactEntry, ArtifactSet, GridInfo, Manifest};
use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};

/// Control law used by `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Feedforward bridge to a single terminal point.
    Pinned,
    /// Path-integral bridge to the target density.
    Bridge,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Pinned => "pinned",
            Mode::Bridge => "bridge",
        }
    }
}

/// A loaded configuration together with its built ensemble and cache.
pub struct Context {
    pub cfg: LoadedConfig,
    pub out: PathBuf,
    pub ens: EnsembleSystem,
    pub cache: PropagatorCache,
}

impl Context {
    pub fn new(cfg: LoadedConfig, out: Option<PathBuf>) -> CliResult<Self> {
        let ens = cfg.config.ensemble()?;
        let grid = cfg.config.grid()?;
        let cache = PropagatorCache::build(&ens, grid)?;
        let out = out.unwrap_or_else(|| cfg.config.output_dir.clone());
        Ok(Self { cfg, out, ens, cache })
    }

    fn grid(&self) -> TimeGrid {
        *self.cache.grid()
    }

    fn manifest(&self, command: &str, seeds: Vec<u64>, solver_residual: Option<f64>, extra: Value) -> Manifest {
        let g = self.grid();
        Manifest {
            command: command.to_string(),
            config_hash: self.cfg.hash.clone(),
            ensemble: self.ens.name().to_string(),
            epsilon: self.ens.epsilon(),
            theta_nodes: self.ens.node_count(),
            grid: GridInfo { t_f: g.t_final(), steps: g.steps(), dt: g.dt() },
            seeds,
            solver_residual,
            artifacts: Vec::new(),
            extra,
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Rows of `t` followed by the matrix entries in row-major order.
fn matrix_series_csv(prefix: &str, times: &[f64], mats: &[DMatrix<f64>]) -> Vec<u8> {
    let (r, c) = mats.first().map_or((0, 0), |m| m.shape());
    let mut s = String::from("t");
    for i in 1..=r {
        for j in 1..=c {
            s.push_str(&format!(",{prefix}{i}{j}"));
        }
    }
    s.push('\n');
    for (t, m) in times.iter().zip(mats) {
        s.push_str(&fmt(*t));
        for i in 0..r {
            for j in 0..c {
                s.push(',');
                s.push_str(&fmt(m[(i, j)]));
            }
        }
        s.push('\n');
    }
    s.into_bytes()
}

/// `gramian`: M(t_f), Φ(t_f, ·) on the grid, G_{t_f,0} and its conditioning.
pub fn cmd_gramian(ctx: &Context) -> CliResult<Value> {
    let mut set = ArtifactSet::new(&ctx.out)?;
    let g = ctx.grid();
    let times = g.times();
    let states: Vec<_> = (0..=g.steps()).map(|i| ctx.cache.state_map(i).clone()).collect();
    let phis = times
        .iter()
        .map(|&t| averaged_input_map(&ctx.ens, g.t_final(), t))
        .collect::<ensemble_bridge::Result<Vec<_>>>()?;
    set.write("state_map.csv", &matrix_series_csv("m", &times, &states), None)?;
    set.write("phi.csv", &matrix_series_csv("phi", &times, &phis), None)?;
    let report = json!({
        "ensemble": ctx.ens.name(),
        "t_f": g.t_final(),
        "state_map_tf": rows(ctx.cache.terminal_map()),
        "gramian": rows(ctx.cache.gramian_tail(0)),
        "min_eigenvalue": ctx.cache.min_eig(),
        "condition_number": ctx.cache.condition_number(),
    });
    set.write_json("gramian.json", &report)?;
    set.finish(ctx.manifest("gramian", vec![], None, Value::Null))?;
    Ok(report)
}

fn potential_csv(grid: &GridDensity, phi: &[f64], log_phi: &[f64]) -> Vec<u8> {
    let mut s = String::new();
    for r in 1..=grid.dim() {
        s.push_str(&format!("x{r},"));
    }
    s.push_str("phi,log_phi\n");
    for (j, p) in grid.points().iter().enumerate() {
        for v in p.iter() {
            s.push_str(&fmt(*v));
            s.push(',');
        }
        s.push_str(&format!("{},{}\n", fmt(phi[j]), fmt(log_phi[j])));
    }
    s.into_bytes()
}

fn read_log_potential(path: &Path, expected: usize) -> CliResult<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let vals = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Config(format!("{}: malformed row {l:?}", path.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if vals.len() != expected {
        return Err(CliError::Config(format!(
            "{} has {} rows, the configured grid has {expected}",
            path.display(),
            vals.len()
        )));
    }
    Ok(vals)
}

/// `solve`: kernel and Sinkhorn potentials for the configured marginals.
pub fn cmd_solve(ctx: &Context) -> CliResult<Value> {
    let (rho0, rhof) = ctx.cfg.marginals(&ctx.ens, &ctx.cache)?;
    let sk = ctx.cfg.config.sinkhorn;
    let p = BridgeProblem::solve(&ctx.ens, &ctx.cache, rho0, rhof, sk.tol, sk.max_iter)?;
    let pot = &p.potentials;
    let mut set = ArtifactSet::new(&ctx.out)?;
    set.write("potentials/phi0.csv", &potential_csv(&p.rho0, &pot.phi0, &pot.log_phi0), None)?;
    set.write("potentials/phif.csv", &potential_csv(&p.rhof, &pot.phif, &pot.log_phif), None)?;
    set.write_csv("potentials/rho0.csv", None, |b| p.rho0.write_csv(b))?;
    set.write_csv("potentials/rhof.csv", None, |b| p.rhof.write_csv(b))?;
    let report = json!({
        "residual": pot.residual,
        "iterations": pot.iterations,
        "log_domain": pot.log_domain,
        "source_cells": p.rho0.len(),
        "target_cells": p.rhof.len(),
        "target_axes": p.rhof.axes().iter().map(|a| json!({"lo": a.lo, "hi": a.hi, "n": a.n})).collect::<Vec<_>>(),
        "residual_history": pot.history,
    });
    set.write_json("solve.json", &report)?;
    set.finish(ctx.manifest("solve", vec![], Some(pot.residual), Value::Null))?;
    Ok(report)
}

/// Marginals and potentials, read from a matching `solve` run when one
/// exists in the output directory and computed otherwise.
fn potentials_for(ctx: &Context) -> CliResult<(GridDensity, GridDensity, SchrodingerPotentials, bool)> {
    let (rho0, rhof) = ctx.cfg.marginals(&ctx.ens, &ctx.cache)?;
    let mpath = manifest_path(&ctx.out, "solve");
    if let Ok(text) = std::fs::read_to_string(&mpath) {
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("unreadable manifest {}: {e}", mpath.display())))?;
        if m.config_hash == ctx.cfg.hash {
            let log_phi0 = read_log_potential(&ctx.out.join("potentials/phi0.csv"), rho0.len())?;
            let log_phif = read_log_potential(&ctx.out.join("potentials/phif.csv"), rhof.len())?;
            let pot = SchrodingerPotentials {
                phi0: log_phi0.iter().map(|v| v.exp()).collect(),
                phif: log_phif.iter().map(|v| v.exp()).collect(),
                log_phi0,
                log_phif,
                residual: m.solver_residual.unwrap_or(f64::NAN),
                iterations: 0,
                log_domain: false,
                history: Vec::new(),
            };
            return Ok((rho0, rhof, pot, true));
        }
        log::info!("solve manifest belongs to another configuration; recomputing potentials");
    }
    let sk = ctx.cfg.config.sinkhorn;
    let p = BridgeProblem::solve(&ctx.ens, &ctx.cache, rho0, rhof, sk.tol, sk.max_iter)?;
    Ok((p.rho0, p.rhof, p.potentials, false))
}

fn parse_point(s: &str, d: usize, what: &str) -> CliResult<DVector<f64>> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("--{what}: {e}")))?;
    if v.len() != d || v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Config(format!("--{what} needs {d} finite comma-separated values")));
    }
    Ok(DVector::from_vec(v))
}

/// Options of `simulate`.
#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub mode: Mode,
    pub seeds: usize,
    pub x0: Option<String>,
    pub xf: Option<String>,
}

fn seed_summary(seed: u64, traj: &Trajectory) -> Value {
    json!({
        "seed": seed,
        "terminal_state": traj.terminal_state().as_slice(),
        "terminal_error": traj.terminal_error,
        "cost": traj.total_cost(),
    })
}

/// `simulate`: one trajectory CSV per seed for the pinned or the bridge law.
pub fn cmd_simulate(ctx: &Context, args: &SimulateArgs) -> CliResult<Value> {
    if args.seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let d = ctx.ens.state_dim();
    let dirac = ctx.cfg.config.dirac_points();
    let point = |flag: &Option<String>, from_cfg: Option<&[f64]>, what: &str| -> CliResult<Option<DVector<f64>>> {
        match (flag, from_cfg) {
            (Some(s), _) => parse_point(s, d, what).map(Some),
            (None, Some(p)) if p.len() == d => Ok(Some(DVector::from_column_slice(p))),
            _ => Ok(None),
        }
    };
    let x0 = point(&args.x0, dirac.map(|p| p.0), "x0")?;
    let xf = point(&args.xf, dirac.map(|p| p.1), "xf")?;
    let grid = ctx.grid();
    let m = ctx.ens.input_dim();
    let base = ctx.cfg.config.montecarlo.seed;
    let deterministic = ctx.ens.epsilon() == 0.0;
    let n_runs = if deterministic { 1 } else { args.seeds };
    let seeds: Vec<u64> = (0..n_runs as u64).map(|s| base + s).collect();
    let history = |seed| {
        if deterministic {
            NoiseHistory::zeros(grid, m)
        } else {
            NoiseHistory::sample(seed, grid, m)
        }
    };
    let mode = args.mode.name();
    let dir = ctx.out.join("simulate");
    let file = |seed: u64| format!("simulate/{mode}-seed-{seed}.csv");

    let mut extra = json!({"mode": mode});
    let runs: Vec<(u64, Trajectory)> = match args.mode {
        Mode::Pinned => {
            let x0 = x0.ok_or_else(|| CliError::Config("pinned mode needs --x0".into()))?;
            let xf = xf.ok_or_else(|| CliError::Config("pinned mode needs --xf".into()))?;
            extra["x0"] = json!(x0.as_slice());
            extra["xf"] = json!(xf.as_slice());
            if deterministic {
                let r = &xf - ctx.cache.terminal_map() * &x0;
                extra["gramian_cost"] = json!(0.5 * r.dot(&ctx.cache.solve_gramian(&r)));
            }
            seeds
                .par_iter()
                .map(|&s| Ok((s, run_pinned_bridge_with(&ctx.ens, &ctx.cache, &x0, &xf, &history(s))?)))
                .collect::<CliResult<_>>()?
        }
        Mode::Bridge => {
            let x0 = x0.unwrap_or_else(|| DVector::zeros(d));
            extra["x0"] = json!(x0.as_slice());
            let (_, rhof, pot, reused) = potentials_for(ctx)?;
            extra["potentials_reused"] = json!(reused);
            extra["solver_residual"] = json!(pot.residual);
            let plan = BridgePlan::new(&ctx.ens, &ctx.cache, &pot, &rhof)?;
            seeds
                .par_iter()
                .map(|&s| {
                    let (t, ctl) = run_distribution_bridge_with(&ctx.ens, &plan, &x0, &history(s))?;
                    log::debug!("seed {s}: max affine deviation {:e}", ctl.max_affine_deviation);
                    Ok((s, t))
                })
                .collect::<CliResult<_>>()?
        }
    };
    std::fs::create_dir_all(&dir)?;
    let entries: Vec<ArtifactEntry> = runs
        .par_iter()
        .map(|(s, t)| {
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            let rel = file(*s);
            write_atomic(&ctx.out.join(&rel), &buf)?;
            Ok(ArtifactEntry { file: rel, sha256: sha256_hex(&buf), seed: Some(*s) })
        })
        .collect::<CliResult<_>>()?;
    let mut set = ArtifactSet::new(&ctx.out)?;
    entries.into_iter().for_each(|e| set.record(e));
    let mut report = extra.clone();
    report["runs"] = Value::Array(runs.iter().map(|(s, t)| seed_summary(*s, t)).collect());
    if let Some(gc) = extra.get("gramian_cost").and_then(Value::as_f64) {
        let cost = runs[0].1.total_cost();
        report["cost_relative_deviation"] = json!((cost - gc).abs() / gc.abs().max(f64::MIN_POSITIVE));
    }
    set.write_json("simulate.json", &report)?;
    let residual = extra.get("solver_residual").and_then(Value::as_f64);
    set.finish(ctx.manifest("simulate", seeds, residual, extra))?;
    Ok(report)
}

/// `montecarlo`: histogram of bridge endpoints against the target and the
/// statistical floor of exact target samples.
pub fn cmd_montecarlo(ctx: &Context) -> CliResult<Value> {
    let mc = ctx.cfg.config.montecarlo;
    let (rho0, rhof, pot, reused) = potentials_for(ctx)?;
    let rep = monte_carlo_transport(&ctx.ens, &ctx.cache, &pot, &rho0, &rhof, mc.n_samples, mc.seed)?;
    let floor = statistical_floor(&rhof, mc.n_samples, mc.seed)?;
    let mut set = ArtifactSet::new(&ctx.out)?;
    set.write_csv("montecarlo/histogram.csv", Some(mc.seed), |b| rep.histogram.write_csv(b))?;
    let report = json!({
        "n_samples": rep.n_samples,
        "seed": rep.seed,
        "bins": rhof.len(),
        "l1": rep.l1,
        "statistical_floor": floor,
        "threshold": 3.0 * floor,
        "within_threshold": rep.l1 <= 3.0 * floor,
        "outside": rep.outside,
        "mean_cost": rep.mean_cost,
        "potentials_reused": reused,
    });
    set.write_json("montecarlo.json", &report)?;
    set.finish(ctx.manifest("montecarlo", vec![mc.seed], Some(pot.residual), Value::Null))?;
    Ok(report)
}

/// `verify`: the oracle suite. Refuses an output directory whose manifests
/// come from different configurations.
pub fn cmd_verify(cfg: Option<&LoadedConfig>, out: Option<&Path>, flip_noise_sign: bool) -> CliResult<Value> {
    let out_dir = out.map(Path::to_path_buf).or_else(|| cfg.map(|c| c.config.output_dir.clone()));
    if let Some(dir) = &out_dir {
        let manifests = read_manifests(dir)?;
        let mut hashes: Vec<&str> = manifests.iter().map(|(_, m)| m.config_hash.as_str()).collect();
        if let Some(c) = cfg {
            hashes.push(&c.hash);
        }
        hashes.sort_unstable();
        hashes.dedup();
        if hashes.len() > 1 {
            return Err(CliError::Config(format!(
                "{} holds artifacts from {} different configurations",
                dir.display(),
                hashes.len()
            )));
        }
    }
    let seed = cfg.map_or(VerifyOptions::default().seed, |c| c.config.montecarlo.seed);
    let checks = run_suite(VerifyOptions { seed, flip_noise_term: flip_noise_sign })?;
    let all = checks.iter().all(|c| c.passed);
    let report = json!({
        "passed": all,
        "flip_noise_sign": flip_noise_sign,
        "checks": checks.iter().map(|c| json!({
            "name": c.name,
            "passed": c.passed,
            "measured": c.measured,
            "detail": c.detail,
        })).collect::<Vec<_>>(),
    });
    if let Some(dir) = &out_dir {
        let mut set = ArtifactSet::new(dir)?;
        set.write_json("verify.json", &report)?;
        let manifest = Manifest {
            command: "verify".into(),
            config_hash: cfg.map_or_else(String::new, |c| c.hash.clone()),
            ensemble: String::new(),
            epsilon: 0.0,
            theta_nodes: 0,
            grid: GridInfo { t_f: 0.0, steps: 0, dt: 0.0 },
            seeds: vec![seed],
            solver_residual: None,
            artifacts: Vec::new(),
            extra: Value::Null,
        };
        if cfg.is_some() {
            set.finish(manifest)?;
        }
    }
    if !all {
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        eprintln!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
        return Err(CliError::Numerical(format!("verification failed: {}", failed.join(", "))));
    }
    Ok(report)
}
