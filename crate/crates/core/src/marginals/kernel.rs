use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::grid::{Axis, GridDensity};
use crate::ensemble::linalg::GaussianLogDensity;
use crate::ensemble::{EnsembleSystem, PropagatorCache};
use crate::error::{Error, Result};

/// Passive end-state transition densities between a source and a target
/// grid: K[i][j] = N(x_fʲ; M(t_f)x₀ⁱ, ε G_{t_f,0}).
///
/// Entries are kept as logarithms so that kernels whose dynamic range
/// exceeds double precision remain usable.
#[derive(Debug, Clone)]
pub struct EndKernel {
    n0: usize,
    nf: usize,
    /// Row-major n₀ × n_f table of log K.
    log_k: Vec<f64>,
    source_axes: Vec<Axis>,
    target_axes: Vec<Axis>,
    source_volume: f64,
    target_volume: f64,
}

impl EndKernel {
    pub fn source_len(&self) -> usize {
        self.n0
    }

    pub fn target_len(&self) -> usize {
        self.nf
    }

    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.log_k[i * self.nf + j]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.log_entry(i, j).exp()
    }

    /// Row `i` of log K.
    pub fn log_row(&self, i: usize) -> &[f64] {
        &self.log_k[i * self.nf..(i + 1) * self.nf]
    }

    /// The kernel in linear scale (entries may underflow to zero).
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n0, self.nf, |i, j| self.entry(i, j))
    }

    pub fn source_axes(&self) -> &[Axis] {
        &self.source_axes
    }

    pub fn target_axes(&self) -> &[Axis] {
        &self.target_axes
    }

    pub fn source_volume(&self) -> f64 {
        self.source_volume
    }

    pub fn target_volume(&self) -> f64 {
        self.target_volume
    }

    /// Smallest log entry; below about −708 the linear kernel underflows.
    pub fn min_log_entry(&self) -> f64 {
        self.log_k.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Σ_j K[i][j] · target cell volume, the discrete mass of row `i`.
    pub fn row_mass(&self, i: usize) -> f64 {
        self.log_row(i).iter().map(|l| l.exp()).sum::<f64>() * self.target_volume
    }

    pub(crate) fn check_grids(&self, g0: &GridDensity, gf: &GridDensity) -> Result<()> {
        if g0.axes() != self.source_axes.as_slice() || gf.axes() != self.target_axes.as_slice() {
            return Err(Error::InvalidParameter("densities are not on the kernel's grids".into()));
        }
        Ok(())
    }
}

/// Tabulates the end kernel between the cell centers of `g0` and `gf`.
/// Rows are built in parallel.
pub fn build_end_kernel(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    g0: &GridDensity,
    gf: &GridDensity,
) -> Result<EndKernel> {
    cache.check_compatible(ens)?;
    let eps = ens.positive_epsilon()?;
    let d = ens.state_dim();
    if g0.dim() != d || gf.dim() != d {
        return Err(Error::InvalidParameter(format!(
            "grid dimensions ({}, {}) differ from the state dimension {d}",
            g0.dim(),
            gf.dim()
        )));
    }
    let cov = cache.gramian_tail(0) * eps;
    let gauss = GaussianLogDensity::new(&cov)?;
    let m = cache.terminal_map();
    let targets = gf.points();
    let (n0, nf) = (g0.len(), gf.len());
    let rows: Vec<Vec<f64>> = (0..n0)
        .into_par_iter()
        .map(|i| {
            let mean: DVector<f64> = m * g0.point(i);
            targets.iter().map(|y| gauss.eval(&(y - &mean))).collect()
        })
        .collect();
    Ok(EndKernel {
        n0,
        nf,
        log_k: rows.concat(),
        source_axes: g0.axes().to_vec(),
        target_axes: gf.axes().to_vec(),
        source_volume: g0.cell_volume(),
        target_volume: gf.cell_volume(),
    })
}

/// Target axes: the support of ρ_f widened by `padding · √(ε · max diag G_{t_f,0})`
/// on each side, keeping the cell count. Single-cell grids are not padded.
pub fn padded_target_axes(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    rhof: &GridDensity,
    padding: f64,
) -> Result<Vec<Axis>> {
    if rhof.is_dirac() {
        return Ok(rhof.axes().to_vec());
    }
    if !(padding.is_finite() && padding >= 0.0) {
        return Err(Error::InvalidParameter(format!("padding must be >= 0, got {padding}")));
    }
    let g = cache.gramian_tail(0);
    let max_diag = (0..g.nrows()).map(|i| g[(i, i)]).fold(0.0, f64::max);
    let pad = padding * (ens.epsilon() * max_diag).sqrt();
    rhof.axes().iter().map(|a| a.padded(pad)).collect()
}
