//! The verification suite: every oracle equivalence as a measured check.

use nalgebra::{dmatrix, dvector, DVector};

use crate::controllers::{conditional_mean, FeedforwardState, NoiseHistory, ZeroControl};
use crate::ensemble::linalg::mat_exp;
use crate::ensemble::{EnsembleSystem, PropagatorCache, TimeGrid};
use crate::error::Result;
use crate::oracles::{discrete_brute_force, discrete_closed_form, markov_bridge_oracle_with, sweep_ensemble};
use crate::pipeline::{cosine_mirror_problem, DEFAULT_PADDING};
use crate::simulator::{run_distribution_bridge_with, simulate};

/// Outcome of one check: a measured quantity against its acceptance band.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub measured: Vec<f64>,
    pub detail: String,
}

/// Options of the suite.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Flip the sign of the stochastic term in the feedforward law; the
    /// feedforward/feedback check must then fail.
    pub flip_noise_term: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 7, flip_noise_term: false }
    }
}

/// Discrete LQ sweep over (d, m, k, a) ∈ {1,2}×{1,2}×{2,4}×{1,10,100}
/// at ε = 1. Returns the largest block deviation per case.
pub fn discrete_sweep_deviations() -> Result<Vec<((usize, usize, usize, f64), f64)>> {
    let mut out = Vec::new();
    for d in [1, 2] {
        for m in [1, 2] {
            for k in [2, 4] {
                let (ens, cache) = sweep_ensemble(d, m, 1.0, k)?;
                for a in [1.0, 10.0, 100.0] {
                    let cf = discrete_closed_form(&ens, &cache, a)?;
                    let bf = discrete_brute_force(&ens, &cache, a)?;
                    out.push(((d, m, k, a), cf.max_block_deviation(&bf)));
                }
            }
        }
    }
    Ok(out)
}

pub fn check_discrete_oracle() -> Result<Check> {
    let devs = discrete_sweep_deviations()?;
    let worst = devs.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    Ok(Check {
        name: "discrete closed form vs brute force",
        passed: worst <= 1e-9,
        measured: vec![worst],
        detail: format!("{} cases, max block deviation {worst:.3e} (tol 1e-9)", devs.len()),
    })
}

/// Max |u_ff − u_fb| over t ∈ [0, t_f/2] for A = 0, B = 1, ε = 1, t_f = 1,
/// at dt = 1e−2, 5e−3, 2.5e−3, all grids driven by one Brownian path.
pub fn feedforward_feedback_deviations(seed: u64, flip_noise_term: bool) -> Result<Vec<f64>> {
    let ens = EnsembleSystem::constant(dmatrix![0.0], dmatrix![1.0], 1.0, 1.0)?;
    let x0 = dvector![0.0];
    let xf = dvector![1.0];
    let fine = NoiseHistory::sample(seed, TimeGrid::new(1.0, 400)?, 1);
    let mut out = Vec::new();
    for factor in [4, 2, 1] {
        let hist = fine.coarsen(factor)?;
        let cache = PropagatorCache::build(&ens, *hist.grid())?;
        let mut ff = FeedforwardState::pinned(&ens, &cache, &x0, &xf)?;
        if flip_noise_term {
            ff = ff.with_flipped_noise_term();
        }
        let tff = simulate(&ens, &cache, &mut ff, &x0, &hist, false)?;
        let tfb = markov_bridge_oracle_with(&ens, &cache, &x0, &xf, &hist)?;
        let half = hist.grid().steps() / 2;
        let dev = (0..=half).map(|i| (&tff.u[i] - &tfb.u[i]).amax()).fold(0.0, f64::max);
        out.push(dev);
    }
    Ok(out)
}

pub fn check_feedforward_feedback(opts: VerifyOptions) -> Result<Check> {
    let devs = feedforward_feedback_deviations(opts.seed, opts.flip_noise_term)?;
    let ratios = [devs[0] / devs[1], devs[1] / devs[2]];
    let passed = ratios.iter().all(|r| (1.6..=2.4).contains(r));
    Ok(Check {
        name: "feedforward vs feedback pinned control",
        passed,
        measured: devs.clone(),
        detail: format!(
            "max deviation {:.3e}, {:.3e}, {:.3e} (C = {:.3}); halving ratios {:.3}, {:.3} (band [1.6, 2.4])",
            devs[0],
            devs[1],
            devs[2],
            devs[0] / 1e-2,
            ratios[0],
            ratios[1]
        ),
    })
}

/// For a θ-independent system the noise-history mean M x₀ + √εΣΦ̄ΔW equals
/// e^{A(t_f−t_i)}x_i on a passive path. Returns the largest relative gap.
pub fn markov_reduction_deviation(seed: u64) -> Result<f64> {
    let a = dmatrix![0.0, 1.0; -1.0, -0.3];
    let b = dmatrix![0.0; 1.0];
    let ens = EnsembleSystem::constant(a.clone(), b, 0.5, 1.0)?;
    let grid = TimeGrid::new(1.0, 200)?;
    let cache = PropagatorCache::build(&ens, grid)?;
    let x0 = dvector![1.0, -0.5];
    let hist = NoiseHistory::sample(seed, grid, 1);
    let traj = simulate(&ens, &cache, &mut ZeroControl { m: 1 }, &x0, &hist, false)?;
    let mut worst: f64 = 0.0;
    for i in 0..grid.steps() {
        let mean = conditional_mean(&ens, &cache, &x0, &hist, i)?;
        let markov: DVector<f64> = mat_exp(&a, 1.0 - grid.time(i))? * &traj.x_avg[i];
        worst = worst.max((&mean - &markov).amax() / (1.0 + markov.amax()));
    }
    Ok(worst)
}

pub fn check_markov_reduction(opts: VerifyOptions) -> Result<Check> {
    let dev = markov_reduction_deviation(opts.seed)?;
    Ok(Check {
        name: "conditional kernel Markov reduction",
        passed: dev <= 1e-10,
        measured: vec![dev],
        detail: format!("max relative gap of conditional mean {dev:.3e} (tol 1e-10)"),
    })
}

/// Largest |quadrature − affine| bridge control over a 1000-step run of
/// the scalar-decay cosine problem (ε = 0.1, 256 cells).
pub fn affine_reduction_deviation(seed: u64) -> Result<f64> {
    let ens = EnsembleSystem::scalar_decay(32, 0.1, 1.0)?;
    let grid = TimeGrid::new(1.0, 1000)?;
    let cache = PropagatorCache::build(&ens, grid)?;
    let problem = cosine_mirror_problem(&ens, &cache, 256, DEFAULT_PADDING, 1e-9, 100_000)?;
    let plan = crate::controllers::BridgePlan::new(&ens, &cache, &problem.potentials, &problem.rhof)?;
    let hist = NoiseHistory::sample(seed, grid, 1);
    let (_, ctl) = run_distribution_bridge_with(&ens, &plan, &dvector![0.25], &hist)?;
    Ok(ctl.max_affine_deviation)
}

pub fn check_affine_reduction(opts: VerifyOptions) -> Result<Check> {
    let dev = affine_reduction_deviation(opts.seed)?;
    Ok(Check {
        name: "bridge control affine reduction",
        passed: dev <= 1e-10,
        measured: vec![dev],
        detail: format!("max |quadrature - affine| over 1000 steps {dev:.3e} (tol 1e-10)"),
    })
}

/// Runs every check. Numerical failures inside a check surface as errors.
pub fn run_suite(opts: VerifyOptions) -> Result<Vec<Check>> {
    Ok(vec![
        check_discrete_oracle()?,
        check_feedforward_feedback(opts)?,
        check_markov_reduction(opts)?,
        check_affine_reduction(opts)?,
    ])
}
