use nalgebra::DMatrix;
use rayon::prelude::*;

use super::grid::GridDensity;
use super::kernel::EndKernel;
use crate::error::{Error, Result};

/// Default L1 tolerance on the reconstructed marginals.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default iteration budget.
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Log-kernel entries below this make the linear iteration unsafe.
const LOG_UNDERFLOW: f64 = -700.0;

/// Solution (φ₀, φ_f) of the Schrödinger system on the kernel's grids.
///
/// Potentials vanish outside the support of their marginal. The gauge is
/// fixed by max φ_f = 1.
#[derive(Debug, Clone)]
pub struct SchrodingerPotentials {
    pub phi0: Vec<f64>,
    pub phif: Vec<f64>,
    pub log_phi0: Vec<f64>,
    pub log_phif: Vec<f64>,
    /// L1 mismatch of the reconstructed marginals at exit.
    pub residual: f64,
    pub iterations: usize,
    /// True when the iteration ran on log potentials.
    pub log_domain: bool,
    /// Residual after every iteration.
    pub history: Vec<f64>,
}

impl SchrodingerPotentials {
    /// φ₀ ← cφ₀, φ_f ← φ_f / c: the same coupling in a different gauge.
    pub fn rescaled(&self, c: f64) -> Self {
        let lc = c.ln();
        let mut out = self.clone();
        out.phi0.iter_mut().for_each(|v| *v *= c);
        out.phif.iter_mut().for_each(|v| *v /= c);
        out.log_phi0.iter_mut().for_each(|v| *v += lc);
        out.log_phif.iter_mut().for_each(|v| *v -= lc);
        out
    }

    /// φ₀ and φ_f as grid functions on the kernel's grids.
    pub fn as_densities(&self, k: &EndKernel) -> Result<(GridDensity, GridDensity)> {
        Ok((
            GridDensity::new(k.source_axes().to_vec(), self.phi0.clone())?,
            GridDensity::new(k.target_axes().to_vec(), self.phif.clone())?,
        ))
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Alternating (Fortet/Sinkhorn) scaling for the potentials.
///
/// Runs on linear potentials while the kernel is representable and falls
/// back to log potentials on underflow.
pub fn sinkhorn(
    rho0: &GridDensity,
    rhof: &GridDensity,
    k: &EndKernel,
    tol: f64,
    max_iter: usize,
) -> Result<SchrodingerPotentials> {
    k.check_grids(rho0, rhof)?;
    if !(tol.is_finite() && tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidParameter(format!("bad solver settings tol={tol}, max_iter={max_iter}")));
    }
    for (name, r) in [("initial", rho0), ("target", rhof)] {
        if (r.mass() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("{name} marginal has mass {}, expected 1", r.mass())));
        }
    }
    let pot = if k.min_log_entry() > LOG_UNDERFLOW {
        match linear(rho0, rhof, k, tol, max_iter) {
            Err(Error::SupportMismatch(msg)) => {
                log::info!("linear Sinkhorn underflowed ({msg}); switching to log potentials");
                log_domain(rho0, rhof, k, tol, max_iter)
            }
            other => other,
        }
    } else {
        log_domain(rho0, rhof, k, tol, max_iter)
    }?;
    if pot.history.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-6) + 1e-15) {
        log::warn!("Sinkhorn residual was not monotone");
    }
    Ok(pot)
}

fn linear(rho0: &GridDensity, rhof: &GridDensity, k: &EndKernel, tol: f64, max_iter: usize) -> Result<SchrodingerPotentials> {
    let (n0, nf) = (k.source_len(), k.target_len());
    let (v0, vf) = (k.source_volume(), k.target_volume());
    let kmat: Vec<f64> = (0..n0).flat_map(|i| k.log_row(i).iter().map(|l| l.exp()).collect::<Vec<_>>()).collect();
    let r0 = rho0.values();
    let rf = rhof.values();
    let mut phi0 = vec![0.0; n0];
    let mut phif: Vec<f64> = rf.iter().map(|&r| if r > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut history = Vec::new();

    let row_apply = |phif: &[f64]| -> Vec<f64> {
        kmat.par_chunks(nf)
            .map(|row| row.iter().zip(phif).map(|(a, b)| a * b).sum::<f64>() * vf)
            .collect()
    };
    let col_apply = |phi0: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; nf];
        for (row, &p) in kmat.chunks(nf).zip(phi0) {
            if p != 0.0 {
                for (o, &kv) in out.iter_mut().zip(row) {
                    *o += kv * p;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= v0);
        out
    };

    let mut kf = row_apply(&phif);
    for it in 1..=max_iter {
        for i in 0..n0 {
            phi0[i] = if r0[i] > 0.0 {
                if !(kf[i] > 0.0 && kf[i].is_finite()) {
                    return Err(Error::SupportMismatch(format!("source cell {i} sees no target mass")));
                }
                r0[i] / kf[i]
            } else {
                0.0
            };
        }
        let k0 = col_apply(&phi0);
        for j in 0..nf {
            phif[j] = if rf[j] > 0.0 {
                if !(k0[j] > 0.0 && k0[j].is_finite()) {
                    return Err(Error::SupportMismatch(format!("target cell {j} sees no source mass")));
                }
                rf[j] / k0[j]
            } else {
                0.0
            };
        }
        kf = row_apply(&phif);
        let res_row: f64 = (0..n0).map(|i| (phi0[i] * kf[i] - r0[i]).abs()).sum::<f64>() * v0;
        let res_col: f64 = (0..nf).map(|j| (phif[j] * k0[j] - rf[j]).abs()).sum::<f64>() * vf;
        let res = res_row + res_col;
        history.push(res);
        if res <= tol {
            let c = phif.iter().cloned().fold(0.0, f64::max);
            phif.iter_mut().for_each(|v| *v /= c);
            phi0.iter_mut().for_each(|v| *v *= c);
            let ln = |v: &f64| if *v > 0.0 { v.ln() } else { f64::NEG_INFINITY };
            return Ok(SchrodingerPotentials {
                log_phi0: phi0.iter().map(ln).collect(),
                log_phif: phif.iter().map(ln).collect(),
                phi0,
                phif,
                residual: res,
                iterations: it,
                log_domain: false,
                history,
            });
        }
        if !res.is_finite() {
            return Err(Error::SupportMismatch("non-finite residual".into()));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap_or(&f64::INFINITY),
    })
}

fn log_domain(rho0: &GridDensity, rhof: &GridDensity, k: &EndKernel, tol: f64, max_iter: usize) -> Result<SchrodingerPotentials> {
    let (n0, nf) = (k.source_len(), k.target_len());
    let (v0, vf) = (k.source_volume(), k.target_volume());
    let (lv0, lvf) = (v0.ln(), vf.ln());
    let lr = |r: &f64| if *r > 0.0 { r.ln() } else { f64::NEG_INFINITY };
    let lr0: Vec<f64> = rho0.values().iter().map(lr).collect();
    let lrf: Vec<f64> = rhof.values().iter().map(lr).collect();
    let mut lphi0 = vec![f64::NEG_INFINITY; n0];
    let mut lphif: Vec<f64> = lrf.iter().map(|l| if l.is_finite() { 0.0 } else { f64::NEG_INFINITY }).collect();
    // log K transposed for contiguous column reductions
    let log_kt: Vec<f64> = (0..nf).flat_map(|j| (0..n0).map(move |i| k.log_entry(i, j))).collect();
    let mut history = Vec::new();

    let row_apply = |lphif: &[f64]| -> Vec<f64> {
        (0..n0)
            .into_par_iter()
            .map(|i| logsumexp(k.log_row(i).iter().zip(lphif).map(|(a, b)| a + b)) + lvf)
            .collect()
    };
    let col_apply = |lphi0: &[f64]| -> Vec<f64> {
        log_kt
            .par_chunks(n0)
            .map(|col| logsumexp(col.iter().zip(lphi0).map(|(a, b)| a + b)) + lv0)
            .collect()
    };

    let mut kf = row_apply(&lphif);
    for it in 1..=max_iter {
        for i in 0..n0 {
            lphi0[i] = if lr0[i].is_finite() {
                if !kf[i].is_finite() {
                    return Err(Error::SupportMismatch(format!("source cell {i} sees no target mass")));
                }
                lr0[i] - kf[i]
            } else {
                f64::NEG_INFINITY
            };
        }
        let k0 = col_apply(&lphi0);
        for j in 0..nf {
            lphif[j] = if lrf[j].is_finite() {
                if !k0[j].is_finite() {
                    return Err(Error::SupportMismatch(format!("target cell {j} sees no source mass")));
                }
                lrf[j] - k0[j]
            } else {
                f64::NEG_INFINITY
            };
        }
        kf = row_apply(&lphif);
        let mismatch = |l: f64, r: f64| -> f64 {
            let a = if l.is_finite() { l.exp() } else { 0.0 };
            let b = if r.is_finite() { r.exp() } else { 0.0 };
            (a - b).abs()
        };
        let res_row: f64 = (0..n0).map(|i| mismatch(lphi0[i] + kf[i], lr0[i])).sum::<f64>() * v0;
        let res_col: f64 = (0..nf).map(|j| mismatch(lphif[j] + k0[j], lrf[j])).sum::<f64>() * vf;
        let res = res_row + res_col;
        history.push(res);
        if res <= tol {
            let c = lphif.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lphif.iter_mut().for_each(|v| *v -= c);
            lphi0.iter_mut().for_each(|v| *v += c);
            return Ok(SchrodingerPotentials {
                phi0: lphi0.iter().map(|l| l.exp()).collect(),
                phif: lphif.iter().map(|l| l.exp()).collect(),
                log_phi0: lphi0,
                log_phif: lphif,
                residual: res,
                iterations: it,
                log_domain: true,
                history,
            });
        }
        if res.is_nan() {
            return Err(Error::SupportMismatch("non-finite residual".into()));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap_or(&f64::INFINITY),
    })
}

/// The optimal discrete coupling C[i][j] = φ₀ⁱ K[i][j] φ_fʲ · cell volumes.
pub fn joint_coupling(pot: &SchrodingerPotentials, k: &EndKernel) -> DMatrix<f64> {
    let vol = k.source_volume() * k.target_volume();
    DMatrix::from_fn(k.source_len(), k.target_len(), |i, j| {
        let (a, b) = (pot.log_phi0[i], pot.log_phif[j]);
        if a.is_finite() && b.is_finite() {
            (a + k.log_entry(i, j) + b).exp() * vol
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{EnsembleSystem, PropagatorCache, TimeGrid};
    use crate::marginals::grid::{build_cosine_marginals, Axis};
    use crate::marginals::kernel::{build_end_kernel, padded_target_axes};

    fn flat(eps: f64) -> (EnsembleSystem, PropagatorCache) {
        let ens = EnsembleSystem::constant(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), eps, 1.0).unwrap();
        let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, 20).unwrap()).unwrap();
        (ens, cache)
    }

    fn check_marginals(c: &DMatrix<f64>, rho0: &GridDensity, rhof: &GridDensity, tol: f64) {
        let (v0, vf) = (rho0.cell_volume(), rhof.cell_volume());
        let row: f64 = (0..c.nrows()).map(|i| (c.row(i).sum() / v0 - rho0.values()[i]).abs()).sum::<f64>() * v0;
        let col: f64 = (0..c.ncols()).map(|j| (c.column(j).sum() / vf - rhof.values()[j]).abs()).sum::<f64>() * vf;
        assert!(row <= tol && col <= tol, "row {row} col {col}");
        assert!((c.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dirac_marginals_solve_in_one_iteration() {
        let (ens, cache) = flat(0.5);
        let r0 = GridDensity::dirac(&[0.0], 1e-6).unwrap();
        let rf = GridDensity::dirac(&[0.7], 1e-6).unwrap();
        let k = build_end_kernel(&ens, &cache, &r0, &rf).unwrap();
        let pot = sinkhorn(&r0, &rf, &k, 1e-9, 10).unwrap();
        assert_eq!(pot.iterations, 1);
        assert_eq!(pot.phif, vec![1.0]);
        let c = joint_coupling(&pot, &k);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_marginals_are_a_fixed_point() {
        let (ens, cache) = flat(0.3);
        let ax0 = Axis::new(0.0, 1.0, 20).unwrap();
        let axf = Axis::new(-1.0, 2.0, 30).unwrap();
        let g0 = GridDensity::from_fn(vec![ax0], |_| 1.0).unwrap().normalized().unwrap();
        let gf = GridDensity::from_fn(vec![axf], |_| 1.0).unwrap();
        let k = build_end_kernel(&ens, &cache, &g0, &gf).unwrap();
        // product initialization φ₀ = φ_f = 1: the marginals it induces
        let km = k.matrix();
        let r0: Vec<f64> = (0..20).map(|i| km.row(i).sum() * gf.cell_volume()).collect();
        let rf: Vec<f64> = (0..30).map(|j| km.column(j).sum() * g0.cell_volume()).collect();
        let rho0 = GridDensity::new(vec![ax0], r0).unwrap().normalized().unwrap();
        let rhof = GridDensity::new(vec![axf], rf).unwrap().normalized().unwrap();
        let pot = sinkhorn(&rho0, &rhof, &k, 1e-9, 100).unwrap();
        assert_eq!(pot.iterations, 1);
        let p0 = pot.phi0[0];
        assert!(pot.phi0.iter().all(|v| (v / p0 - 1.0).abs() < 1e-9));
        assert!(pot.phif.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn cosine_bridge_converges_monotonically() {
        let ens = EnsembleSystem::scalar_decay(32, 0.1, 1.0).unwrap();
        let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, 100).unwrap()).unwrap();
        let (rho0, rhof) = build_cosine_marginals(128).unwrap();
        let axes = padded_target_axes(&ens, &cache, &rhof, 4.0).unwrap();
        let rhof = rhof.resample(axes).unwrap().normalized().unwrap();
        let k = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
        let pot = sinkhorn(&rho0, &rhof, &k, 1e-9, 100_000).unwrap();
        assert!(!pot.log_domain);
        assert!(pot.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
        check_marginals(&joint_coupling(&pot, &k), &rho0, &rhof, 1e-8);
        assert_eq!(pot.phif.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn small_noise_uses_log_potentials() {
        let (ens, cache) = flat(1e-4);
        let ax = Axis::new(0.0, 1.0, 64).unwrap();
        let rho0 = GridDensity::from_fn(vec![ax], |p| 1.0 + p[0]).unwrap().normalized().unwrap();
        let rhof = GridDensity::from_fn(vec![ax], |p| 2.0 - p[0]).unwrap().normalized().unwrap();
        let k = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
        assert!(k.min_log_entry() < -700.0);
        let pot = sinkhorn(&rho0, &rhof, &k, 1e-9, 100_000).unwrap();
        assert!(pot.log_domain);
        check_marginals(&joint_coupling(&pot, &k), &rho0, &rhof, 1e-8);
    }

    #[test]
    fn gauge_rescaling_leaves_coupling_unchanged() {
        let (ens, cache) = flat(0.2);
        let (rho0, rhof) = build_cosine_marginals(64).unwrap();
        let k = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
        let pot = sinkhorn(&rho0, &rhof, &k, 1e-9, 100_000).unwrap();
        let c1 = joint_coupling(&pot, &k);
        let c2 = joint_coupling(&pot.rescaled(1e3), &k);
        assert!((c1 - c2).amax() < 1e-12);
    }

    #[test]
    fn symmetric_self_bridge_has_proportional_potentials() {
        let (ens, cache) = flat(0.2);
        let ax = Axis::new(-1.0, 1.0, 40).unwrap();
        let rho = GridDensity::from_fn(vec![ax], |p| 1.2 - p[0] * p[0]).unwrap().normalized().unwrap();
        let k = build_end_kernel(&ens, &cache, &rho, &rho).unwrap();
        let pot = sinkhorn(&rho, &rho, &k, 1e-12, 100_000).unwrap();
        let ratio = pot.phi0[0] / pot.phif[0];
        for (a, b) in pot.phi0.iter().zip(&pot.phif) {
            assert!((a / b / ratio - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn unreachable_target_reports_budget() {
        let (ens, cache) = flat(0.1);
        let (rho0, rhof) = build_cosine_marginals(32).unwrap();
        let k = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
        let r = sinkhorn(&rho0, &rhof, &k, 1e-14, 3);
        assert!(matches!(r, Err(Error::NoConvergence { iterations: 3, .. })));
    }
}
