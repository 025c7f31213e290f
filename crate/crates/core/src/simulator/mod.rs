//! Exact-propagator simulation of the ensemble under a control law.

mod montecarlo;

pub use montecarlo::{histogram_l1, monte_carlo_transport, statistical_floor, GridSampler, TransportReport};

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::controllers::{BridgeController, BridgePlan, Controller, FeedforwardState, NoiseHistory};
use crate::ensemble::{EnsembleSystem, PropagatorCache, TimeGrid};
use crate::error::{Error, Result};
use crate::marginals::{GridDensity, SchrodingerPotentials};

/// One simulated run on the time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// x_avg(t_i) for i = 0..=k.
    pub x_avg: Vec<DVector<f64>>,
    /// Per-node states, node-major, for i = 0..=k (only when requested).
    pub x_nodes: Option<Vec<Vec<f64>>>,
    /// u_i for i = 0..k−1.
    pub u: Vec<DVector<f64>>,
    /// Running cost ½Σ_{α<i}‖u_α‖²dt for i = 0..=k.
    pub cost: Vec<f64>,
    /// ‖x_avg(t_f) − x_f‖ when the run had a pin target.
    pub terminal_error: Option<f64>,
}

impl Trajectory {
    pub fn terminal_state(&self) -> &DVector<f64> {
        self.x_avg.last().expect("trajectory has k+1 states")
    }

    pub fn total_cost(&self) -> f64 {
        *self.cost.last().expect("trajectory has k+1 cost entries")
    }

    /// ½Σ‖u_i‖²dt recomputed from the stored controls.
    pub fn recomputed_cost(&self) -> f64 {
        let dt = self.grid.dt();
        self.u.iter().fold(0.0, |c, u| c + 0.5 * u.norm_squared() * dt)
    }

    /// Columns t, x1..xd, u1..um, cost. The last row has no control.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.x_avg[0].len();
        let m = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("cost".into());
        wtr.write_record(&header)?;
        for i in 0..self.x_avg.len() {
            let mut rec = vec![format!("{:.17e}", self.grid.time(i))];
            rec.extend(self.x_avg[i].iter().map(|v| format!("{v:.17e}")));
            match self.u.get(i) {
                Some(u) => rec.extend(u.iter().map(|v| format!("{v:.17e}"))),
                None => rec.extend((0..m).map(|_| String::new())),
            }
            rec.push(format!("{:.17e}", self.cost[i]));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Simulates every θ-node with its exact one-step propagator, holding the
/// control and the lumped noise constant on each cell:
/// X_{i+1} = e^{A dt}X_i + Γ (u_i + √ε ΔW_i / dt), Γ = ∫_0^dt e^{As}ds B.
pub fn simulate(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    hist: &NoiseHistory,
    keep_nodes: bool,
) -> Result<Trajectory> {
    cache.check_compatible(ens)?;
    let grid = *cache.grid();
    if hist.grid() != &grid || hist.dim() != ens.input_dim() {
        return Err(Error::Protocol("noise history does not match the cache grid".into()));
    }
    let (d, m) = (ens.state_dim(), ens.input_dim());
    if x0.len() != d {
        return Err(Error::InvalidParameter(format!("x0 must have dimension {d}")));
    }
    let steps = cache.node_steps();
    let n = steps.len();
    let k = grid.steps();
    let dt = grid.dt();
    let se = ens.epsilon().sqrt();

    // Row-major flat copies of the per-node maps.
    let mut e: Vec<f64> = Vec::with_capacity(n * d * d);
    let mut g: Vec<f64> = Vec::with_capacity(n * d * m);
    for s in steps {
        e.extend(s.e.transpose().iter());
        g.extend(s.gamma.transpose().iter());
    }
    let w: Vec<f64> = steps.iter().map(|s| s.weight).collect();

    let mut x: Vec<f64> = (0..n).flat_map(|_| x0.iter().cloned()).collect();
    let mut next = vec![0.0; n * d];
    let mut v = vec![0.0; m];
    let mut x_avg = Vec::with_capacity(k + 1);
    let mut nodes = keep_nodes.then(|| Vec::with_capacity(k + 1));
    let mut us = Vec::with_capacity(k);
    let mut cost = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    cost.push(acc);
    x_avg.push(x0.clone());
    if let Some(nd) = nodes.as_mut() {
        nd.push(x.clone());
    }

    for i in 0..k {
        let u = controller.control(i, &x_avg[i])?;
        if u.len() != m || u.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMatrix(format!("controller returned a bad control at step {i}")));
        }
        let dw = hist.increment(i);
        for r in 0..m {
            v[r] = u[r] + se * dw[r] / dt;
        }
        for j in 0..n {
            let xj = &x[j * d..(j + 1) * d];
            let ej = &e[j * d * d..(j + 1) * d * d];
            let gj = &g[j * d * m..(j + 1) * d * m];
            for r in 0..d {
                let mut s = 0.0f64;
                for c in 0..d {
                    s += ej[r * d + c] * xj[c];
                }
                for c in 0..m {
                    s += gj[r * m + c] * v[c];
                }
                next[j * d + r] = s;
            }
        }
        std::mem::swap(&mut x, &mut next);
        controller.advance(i, &u, dw)?;
        acc += 0.5 * u.norm_squared() * dt;
        cost.push(acc);
        us.push(u);

        let mut avg = DVector::zeros(d);
        for j in 0..n {
            for r in 0..d {
                avg[r] += w[j] * x[j * d + r];
            }
        }
        x_avg.push(avg);
        if let Some(nd) = nodes.as_mut() {
            nd.push(x.clone());
        }
    }
    Ok(Trajectory { grid, x_avg, x_nodes: nodes, u: us, cost, terminal_error: None })
}

/// x_avg(t_f) evaluated as M(t_f)x₀ + Σ_i Φ̄_i (u_i dt + √ε ΔW_i).
pub fn terminal_by_convolution(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    hist: &NoiseHistory,
) -> DVector<f64> {
    let dt = cache.grid().dt();
    let se = ens.epsilon().sqrt();
    let mut x = cache.terminal_map() * x0;
    for (i, u) in controls.iter().enumerate() {
        let v = u * dt + DVector::from_column_slice(hist.increment(i)) * se;
        x.gemv(1.0, cache.phi_bar(i), &v, 1.0);
    }
    x
}

/// Pinned bridge from x₀ to x_f driven by the noise of `seed`.
pub fn run_pinned_bridge(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    let hist = NoiseHistory::sample(seed, *cache.grid(), ens.input_dim());
    run_pinned_bridge_with(ens, cache, x0, xf, &hist)
}

pub fn run_pinned_bridge_with(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    hist: &NoiseHistory,
) -> Result<Trajectory> {
    let mut ff = FeedforwardState::pinned(ens, cache, x0, xf)?;
    let mut traj = simulate(ens, cache, &mut ff, x0, hist, false)?;
    traj.terminal_error = Some((traj.terminal_state() - xf).norm());
    Ok(traj)
}

/// Distribution bridge from x₀ toward the potentials' target density.
pub fn run_distribution_bridge(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    pot: &SchrodingerPotentials,
    gridf: &GridDensity,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    let plan = BridgePlan::new(ens, cache, pot, gridf)?;
    let hist = NoiseHistory::sample(seed, *cache.grid(), ens.input_dim());
    run_distribution_bridge_with(ens, &plan, x0, &hist).map(|(t, _)| t)
}

/// Runs the bridge controller with a prebuilt plan; also returns the
/// controller for inspection of its diagnostics.
pub fn run_distribution_bridge_with<'p, 'a>(
    ens: &EnsembleSystem,
    plan: &'p BridgePlan<'a>,
    x0: &DVector<f64>,
    hist: &NoiseHistory,
) -> Result<(Trajectory, BridgeController<'p, 'a>)> {
    let mut ctl = BridgeController::new(plan, x0)?;
    let traj = simulate(ens, plan.cache(), &mut ctl, x0, hist, false)?;
    Ok((traj, ctl))
}
