use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ensemble::TimeGrid;
use crate::error::{Error, Result};

/// Generator for stream `stream` of `seed`. ChaCha is counter based, so
/// every (seed, stream) pair is an independent, reproducible sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Brownian increments ΔW_i ~ N(0, dt·I_m) on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHistory {
    grid: TimeGrid,
    m: usize,
    /// Row-major k × m.
    dw: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl NoiseHistory {
    /// Stream 0 of `seed`.
    pub fn sample(seed: u64, grid: TimeGrid, m: usize) -> Self {
        Self::sample_stream(seed, 0, grid, m)
    }

    pub fn sample_stream(seed: u64, stream: u64, grid: TimeGrid, m: usize) -> Self {
        let mut rng = stream_rng(seed, stream);
        Self::sample_with(&mut rng, grid, m, seed, stream)
    }

    /// Draws from a caller-owned generator (recorded seed/stream are labels).
    pub fn sample_with<R: Rng>(rng: &mut R, grid: TimeGrid, m: usize, seed: u64, stream: u64) -> Self {
        let sd = grid.dt().sqrt();
        let dw = (0..grid.steps() * m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { grid, m, dw, seed, stream }
    }

    pub fn zeros(grid: TimeGrid, m: usize) -> Self {
        Self { grid, m, dw: vec![0.0; grid.steps() * m], seed: 0, stream: 0 }
    }

    /// Wraps explicit increments (row-major k × m).
    pub fn from_increments(grid: TimeGrid, m: usize, dw: Vec<f64>) -> Result<Self> {
        if dw.len() != grid.steps() * m || m == 0 {
            return Err(Error::InvalidParameter(format!(
                "{} increments for {} steps of dimension {m}",
                dw.len(),
                grid.steps()
            )));
        }
        if dw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("noise increments must be finite".into()));
        }
        Ok(Self { grid, m, dw, seed: 0, stream: 0 })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.grid.steps()
    }

    pub fn is_empty(&self) -> bool {
        self.dw.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// ΔW_i.
    pub fn increment(&self, i: usize) -> &[f64] {
        &self.dw[i * self.m..(i + 1) * self.m]
    }

    pub fn increment_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.dw[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.dw
    }

    /// The same Brownian path on a grid `factor` times coarser: increments
    /// are summed over consecutive blocks.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let mut dw = vec![0.0; grid.steps() * self.m];
        for i in 0..self.grid.steps() {
            let c = i / factor;
            for r in 0..self.m {
                dw[c * self.m + r] += self.dw[i * self.m + r];
            }
        }
        Ok(Self { grid, m: self.m, dw, seed: self.seed, stream: self.stream })
    }

    /// W(t_i) for i = 0..=k.
    pub fn path(&self) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.m]];
        for i in 0..self.len() {
            let mut next = w[i].clone();
            next.iter_mut().zip(self.increment(i)).for_each(|(a, b)| *a += b);
            w.push(next);
        }
        w
    }
}
