//! End-to-end setup of a distribution bridge: marginals on their grids,
//! end-point kernel and Schrödinger potentials.

use crate::ensemble::{EnsembleSystem, PropagatorCache};
use crate::error::Result;
use crate::marginals::{
    build_end_kernel, grid::cosine_density_raw, padded_target_axes, sinkhorn, Axis, EndKernel, GridDensity,
    SchrodingerPotentials,
};

/// Default target padding, in conditional standard deviations.
pub const DEFAULT_PADDING: f64 = 4.0;

/// Everything the bridge controller needs, on consistent grids.
#[derive(Debug, Clone)]
pub struct BridgeProblem {
    pub rho0: GridDensity,
    /// Target marginal on the (padded) target grid.
    pub rhof: GridDensity,
    pub kernel: EndKernel,
    pub potentials: SchrodingerPotentials,
}

impl BridgeProblem {
    /// Builds the kernel between the two grids and solves for the potentials.
    pub fn solve(
        ens: &EnsembleSystem,
        cache: &PropagatorCache,
        rho0: GridDensity,
        rhof: GridDensity,
        tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        let kernel = build_end_kernel(ens, cache, &rho0, &rhof)?;
        let potentials = sinkhorn(&rho0, &rhof, &kernel, tol, max_iter)?;
        Ok(Self { rho0, rhof, kernel, potentials })
    }
}

/// Moves a target density onto its padded grid by interpolation.
pub fn pad_target(ens: &EnsembleSystem, cache: &PropagatorCache, rhof: &GridDensity, padding: f64) -> Result<GridDensity> {
    if rhof.is_dirac() {
        return Ok(rhof.clone());
    }
    let axes = padded_target_axes(ens, cache, rhof, padding)?;
    rhof.resample(axes)?.normalized()
}

/// Mirrored cosine target ρ₀(1 − x), evaluated exactly on `axes`.
pub fn cosine_mirror_target(axes: Vec<Axis>) -> Result<GridDensity> {
    GridDensity::from_fn(axes, |p| cosine_density_raw(1.0 - p[0]))?.normalized()
}

/// Cosine marginals for a bridge: ρ₀ on `n0` cells of [0, 1] and its
/// mirror evaluated exactly on the padded target grid of `nf` cells.
pub fn cosine_mirror_marginals(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    n0: usize,
    nf: usize,
    padding: f64,
) -> Result<(GridDensity, GridDensity)> {
    let (rho0, _) = crate::marginals::build_cosine_marginals(n0)?;
    let (_, unpadded) = crate::marginals::build_cosine_marginals(nf)?;
    let rhof = cosine_mirror_target(padded_target_axes(ens, cache, &unpadded, padding)?)?;
    Ok((rho0, rhof))
}

/// The 1D cosine problem with `n` cells on both sides.
pub fn cosine_mirror_problem(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    n: usize,
    padding: f64,
    tol: f64,
    max_iter: usize,
) -> Result<BridgeProblem> {
    let (rho0, rhof) = cosine_mirror_marginals(ens, cache, n, n, padding)?;
    BridgeProblem::solve(ens, cache, rho0, rhof, tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::TimeGrid;

    #[test]
    fn padded_cosine_target_keeps_mass_and_shape() {
        let ens = EnsembleSystem::scalar_decay(32, 0.1, 1.0).unwrap();
        let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, 50).unwrap()).unwrap();
        let p = cosine_mirror_problem(&ens, &cache, 128, DEFAULT_PADDING, 1e-9, 100_000).unwrap();
        assert!((p.rhof.mass() - 1.0).abs() < 1e-12);
        let ax = p.rhof.axes()[0];
        assert!(ax.lo < 0.0 && ax.hi > 1.0 && ax.n == 128);
        // zero outside [0, 1]
        assert_eq!(p.rhof.values()[0], 0.0);
        assert!(p.potentials.residual <= 1e-9);
        let interp = pad_target(&ens, &cache, &crate::marginals::build_cosine_marginals(128).unwrap().1, DEFAULT_PADDING)
            .unwrap();
        let l1: f64 = interp.values().iter().zip(p.rhof.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() * interp.cell_volume();
        assert!(l1 < 0.1, "{l1}");
    }
}
