use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use super::run_distribution_bridge_with;
use crate::controllers::{stream_rng, BridgePlan, NoiseHistory};
use crate::ensemble::{EnsembleSystem, PropagatorCache};
use crate::error::{Error, Result};
use crate::marginals::{GridDensity, SchrodingerPotentials};

/// Inverse-CDF sampler for a grid density: a cell is chosen by its mass
/// and the point is uniform inside it (linear CDF within the cell).
#[derive(Debug, Clone)]
pub struct GridSampler {
    density: GridDensity,
    cdf: Vec<f64>,
}

impl GridSampler {
    pub fn new(density: &GridDensity) -> Result<Self> {
        let mut cdf = Vec::with_capacity(density.len());
        let mut acc = 0.0;
        for v in density.values() {
            acc += v;
            cdf.push(acc);
        }
        if !(acc > 0.0 && acc.is_finite()) {
            return Err(Error::InvalidParameter("cannot sample a density with zero mass".into()));
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self { density: density.clone(), cdf })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        let mut p = self.density.point(idx);
        for (r, a) in self.density.axes().iter().enumerate() {
            p[r] += (rng.random::<f64>() - 0.5) * a.spacing();
        }
        p
    }
}

/// L1 distance between the histogram of `samples` on `reference`'s grid
/// and `reference`. Samples outside the grid count fully toward the
/// distance. Returns (distance, histogram, outside count).
pub fn histogram_l1(samples: &[DVector<f64>], reference: &GridDensity) -> Result<(f64, GridDensity, usize)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    let vol = reference.cell_volume();
    let mut counts = vec![0usize; reference.len()];
    let mut outside = 0;
    for s in samples {
        match reference.cell_of(s) {
            Some(j) => counts[j] += 1,
            None => outside += 1,
        }
    }
    let hist: Vec<f64> = counts.iter().map(|&c| c as f64 / (n as f64 * vol)).collect();
    let l1 = hist.iter().zip(reference.values()).map(|(h, r)| (h - r).abs()).sum::<f64>() * vol
        + outside as f64 / n as f64;
    Ok((l1, GridDensity::new(reference.axes().to_vec(), hist)?, outside))
}

/// Sampling error of a histogram: L1 distance for `n` exact draws from
/// `rhof` itself, binned on its own grid.
pub fn statistical_floor(rhof: &GridDensity, n: usize, seed: u64) -> Result<f64> {
    let sampler = GridSampler::new(rhof)?;
    let mut rng = stream_rng(seed, u64::MAX);
    let samples: Vec<_> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
    Ok(histogram_l1(&samples, rhof)?.0)
}

/// Outcome of a Monte Carlo transport run.
#[derive(Debug, Clone)]
pub struct TransportReport {
    pub n_samples: usize,
    pub seed: u64,
    /// Frequency density of x_avg(t_f) on the target grid.
    pub histogram: GridDensity,
    pub l1: f64,
    pub outside: usize,
    pub mean_cost: f64,
    pub terminal_states: Vec<DVector<f64>>,
}

/// Draws x₀ ~ ρ₀, runs the distribution bridge with independent noise per
/// sample and bins the terminal averaged states on the target grid of `rhof`.
///
/// Sample s uses generator streams 2s (initial state) and 2s+1 (noise) of
/// `seed`, so the report does not depend on the thread count.
pub fn monte_carlo_transport(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    pot: &SchrodingerPotentials,
    rho0: &GridDensity,
    rhof: &GridDensity,
    n_samples: usize,
    seed: u64,
) -> Result<TransportReport> {
    if n_samples < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 samples, got {n_samples}")));
    }
    let plan = BridgePlan::new(ens, cache, pot, rhof)?;
    let sampler = GridSampler::new(rho0)?;
    let grid = *cache.grid();
    let m = ens.input_dim();
    let runs: Vec<(DVector<f64>, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let x0 = sampler.sample(&mut stream_rng(seed, 2 * s));
            let hist = NoiseHistory::sample_stream(seed, 2 * s + 1, grid, m);
            let (traj, _) = run_distribution_bridge_with(ens, &plan, &x0, &hist)?;
            Ok((traj.terminal_state().clone(), traj.total_cost()))
        })
        .collect::<Result<_>>()?;
    let (terminal_states, costs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let (l1, histogram, outside) = histogram_l1(&terminal_states, rhof)?;
    Ok(TransportReport {
        n_samples,
        seed,
        histogram,
        l1,
        outside,
        mean_cost: costs.iter().sum::<f64>() / n_samples as f64,
        terminal_states,
    })
}
