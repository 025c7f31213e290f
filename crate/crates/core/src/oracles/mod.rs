//! Independent cross-checks: the discrete-time free-endpoint LQ problem in
//! closed form and by brute-force least squares, and the Markov bridge of
//! a θ-independent system simulated in closed loop.

use nalgebra::{DMatrix, DVector};

use crate::controllers::{MarkovPinnedFeedback, NoiseHistory};
use crate::ensemble::{EnsembleSystem, PropagatorCache, TimeGrid};
use crate::error::{Error, Result};
use crate::simulator::{simulate, Trajectory};

/// A causal discrete feedforward law u_i = Σ_{j≤i} F_{i,j} ΔW_j + G_i x_f.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFeedforwardLaw {
    pub k: usize,
    pub a: f64,
    /// f[i][j] for j ≤ i, each m×m.
    pub f: Vec<Vec<DMatrix<f64>>>,
    /// g[i], each m×d.
    pub g: Vec<DMatrix<f64>>,
}

impl DiscreteFeedforwardLaw {
    pub fn zeros(k: usize, a: f64, d: usize, m: usize) -> Self {
        Self {
            k,
            a,
            f: (0..k).map(|i| vec![DMatrix::zeros(m, m); i + 1]).collect(),
            g: vec![DMatrix::zeros(m, d); k],
        }
    }

    /// Number of free coefficients: m²k(k+1)/2 + m·d·k.
    pub fn coefficient_count(k: usize, d: usize, m: usize) -> usize {
        m * m * k * (k + 1) / 2 + m * d * k
    }

    /// Largest entrywise difference over all blocks.
    pub fn max_block_deviation(&self, other: &Self) -> f64 {
        let mut dev: f64 = 0.0;
        for (fa, fb) in self.f.iter().zip(&other.f) {
            for (x, y) in fa.iter().zip(fb) {
                dev = dev.max((x - y).amax());
            }
        }
        for (x, y) in self.g.iter().zip(&other.g) {
            dev = dev.max((x - y).amax());
        }
        dev
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().flatten().chain(&self.g).all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Pointwise input maps Φ(t_f, t_i), i = 0..k−1, defining the discrete
/// problem x_k = M x₀ + Σ_i Φ_i (u_i Δt + √ε ΔW_i).
pub fn discrete_input_maps(cache: &PropagatorCache) -> Vec<DMatrix<f64>> {
    (0..cache.grid().steps()).map(|i| cache.phi(i).clone()).collect()
}

fn check_a(a: f64) -> Result<()> {
    if a.is_finite() && a >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("terminal weight must be >= 0, got {a}")))
    }
}

/// F_{i,j} = −√ε Φ_iᵀ H_j⁻¹ Φ_j and G_i = Φ_iᵀ H_0⁻¹ with
/// H_j = Σ_{α≥j} Φ_α Φ_αᵀ Δt + I/(2a).
pub fn discrete_closed_form(ens: &EnsembleSystem, cache: &PropagatorCache, a: f64) -> Result<DiscreteFeedforwardLaw> {
    cache.check_compatible(ens)?;
    check_a(a)?;
    let (d, m) = (ens.state_dim(), ens.input_dim());
    let k = cache.grid().steps();
    if a == 0.0 {
        return Ok(DiscreteFeedforwardLaw::zeros(k, a, d, m));
    }
    let dt = cache.grid().dt();
    let phi = discrete_input_maps(cache);
    let se = ens.epsilon().sqrt();
    // H_j⁻¹ Φ_j for every j, and H_0⁻¹
    let mut h = DMatrix::identity(d, d) / (2.0 * a);
    let mut hinv_phi = vec![DMatrix::zeros(d, m); k];
    let mut h0 = None;
    for j in (0..k).rev() {
        h.gemm(dt, &phi[j], &phi[j].transpose(), 1.0);
        let chol = crate::ensemble::linalg::cholesky(&h, "regularized Gramian sum")?;
        hinv_phi[j] = chol.solve(&phi[j]);
        if j == 0 {
            h0 = Some(chol.inverse());
        }
    }
    let h0 = h0.expect("k >= 2");
    let f = (0..k)
        .map(|i| (0..=i).map(|j| phi[i].tr_mul(&hinv_phi[j]) * (-se)).collect())
        .collect();
    let g = (0..k).map(|i| phi[i].tr_mul(&h0)).collect();
    Ok(DiscreteFeedforwardLaw { k, a, f, g })
}

/// Column offsets of the causal blocks in the coefficient vector.
struct Layout {
    k: usize,
    d: usize,
    m: usize,
}

impl Layout {
    /// F_{i,j}(r, c), stored block by block, column-major inside a block.
    fn f(&self, i: usize, j: usize, r: usize, c: usize) -> usize {
        let block = i * (i + 1) / 2 + j;
        block * self.m * self.m + c * self.m + r
    }

    fn g(&self, i: usize, r: usize, c: usize) -> usize {
        let base = self.m * self.m * self.k * (self.k + 1) / 2;
        base + i * self.m * self.d + c * self.m + r
    }

    fn len(&self) -> usize {
        DiscreteFeedforwardLaw::coefficient_count(self.k, self.d, self.m)
    }
}

/// Assembles the least-squares system whose squared residual is the
/// expected cost E[a‖x_k − x_f‖² + ½Σ‖u_i‖²Δt], averaging over noise with
/// E[ΔW ΔWᵀ] = Δt·I and over targets with E[x_f x_fᵀ] = I, x₀ = 0.
/// Returns (design matrix, right-hand side).
fn least_squares_system(phi: &[DMatrix<f64>], eps: f64, a: f64, dt: f64, d: usize, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let k = phi.len();
    let lay = Layout { k, d, m };
    let n = lay.len();
    let rows = k * d * m + d * d + n;
    let mut design = DMatrix::zeros(rows, n);
    let mut rhs = DVector::zeros(rows);
    let se = eps.sqrt();
    let mut row = 0;
    // noise channel j: √(aΔt)(Δt Σ_{i≥j} Φ_i F_{i,j} + √ε Φ_j)
    let wn = (a * dt).sqrt();
    for j in 0..k {
        for c in 0..m {
            for p in 0..d {
                for i in j..k {
                    for r in 0..m {
                        design[(row, lay.f(i, j, r, c))] += wn * dt * phi[i][(p, r)];
                    }
                }
                rhs[row] = -wn * se * phi[j][(p, c)];
                row += 1;
            }
        }
    }
    // target channel: √a(Δt Σ_i Φ_i G_i − I)
    let wt = a.sqrt();
    for c in 0..d {
        for p in 0..d {
            for i in 0..k {
                for r in 0..m {
                    design[(row, lay.g(i, r, c))] += wt * dt * phi[i][(p, r)];
                }
            }
            rhs[row] = if p == c { wt } else { 0.0 };
            row += 1;
        }
    }
    // control energy: ½Δt(Δt‖F_{i,j}‖² + ‖G_i‖²)
    for i in 0..k {
        for j in 0..=i {
            for c in 0..m {
                for r in 0..m {
                    design[(row, lay.f(i, j, r, c))] = (0.5f64).sqrt() * dt;
                    row += 1;
                }
            }
        }
        for c in 0..d {
            for r in 0..m {
                design[(row, lay.g(i, r, c))] = (0.5 * dt).sqrt();
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, rows);
    (design, rhs)
}

/// Minimizes the expected discrete cost directly over all causal blocks
/// by solving the normal equations of the least-squares form.
pub fn discrete_brute_force(ens: &EnsembleSystem, cache: &PropagatorCache, a: f64) -> Result<DiscreteFeedforwardLaw> {
    cache.check_compatible(ens)?;
    check_a(a)?;
    let (d, m) = (ens.state_dim(), ens.input_dim());
    let k = cache.grid().steps();
    if k * m > 64 {
        return Err(Error::InvalidParameter(format!("brute force is limited to k·m <= 64, got {}", k * m)));
    }
    let phi = discrete_input_maps(cache);
    let dt = cache.grid().dt();
    let (design, rhs) = least_squares_system(&phi, ens.epsilon(), a, dt, d, m);
    let normal = design.tr_mul(&design);
    let cond = crate::ensemble::linalg::max_eigenvalue(&normal) / crate::ensemble::linalg::min_eigenvalue(&normal);
    if !(cond < 1e12) {
        log::warn!("brute-force normal matrix is ill-conditioned (condition number {cond:e})");
    }
    let theta = crate::ensemble::linalg::cholesky(&normal, "normal matrix")?.solve(&design.tr_mul(&rhs));
    let lay = Layout { k, d, m };
    let mut law = DiscreteFeedforwardLaw::zeros(k, a, d, m);
    for i in 0..k {
        for j in 0..=i {
            law.f[i][j] = DMatrix::from_fn(m, m, |r, c| theta[lay.f(i, j, r, c)]);
        }
        law.g[i] = DMatrix::from_fn(m, d, |r, c| theta[lay.g(i, r, c)]);
    }
    Ok(law)
}

fn law_vector(law: &DiscreteFeedforwardLaw, d: usize, m: usize) -> DVector<f64> {
    let lay = Layout { k: law.k, d, m };
    let mut v = DVector::zeros(lay.len());
    for i in 0..law.k {
        for j in 0..=i {
            for c in 0..m {
                for r in 0..m {
                    v[lay.f(i, j, r, c)] = law.f[i][j][(r, c)];
                }
            }
        }
        for c in 0..d {
            for r in 0..m {
                v[lay.g(i, r, c)] = law.g[i][(r, c)];
            }
        }
    }
    v
}

/// Expected cost E[a‖x_k − x_f‖² + ½Σ‖u_i‖²Δt] of a law.
pub fn discrete_objective(ens: &EnsembleSystem, cache: &PropagatorCache, law: &DiscreteFeedforwardLaw) -> f64 {
    let (d, m) = (ens.state_dim(), ens.input_dim());
    let phi = discrete_input_maps(cache);
    let (design, rhs) = least_squares_system(&phi, ens.epsilon(), law.a, cache.grid().dt(), d, m);
    (design * law_vector(law, d, m) - rhs).norm_squared()
}

/// Expected terminal residual E‖x_k − x_f‖² of a law.
pub fn discrete_terminal_residual(ens: &EnsembleSystem, cache: &PropagatorCache, law: &DiscreteFeedforwardLaw) -> f64 {
    let (d, m) = (ens.state_dim(), ens.input_dim());
    let k = law.k;
    let phi = discrete_input_maps(cache);
    // weight a = 1 and keep only the terminal rows
    let (design, rhs) = least_squares_system(&phi, ens.epsilon(), 1.0, cache.grid().dt(), d, m);
    let terminal_rows = k * d * m + d * d;
    let r = design * law_vector(law, d, m) - rhs;
    r.rows(0, terminal_rows).norm_squared()
}

/// Closed-loop simulation of the Markov pinned bridge of a θ-independent
/// pair (A, B) with the exact-propagator integrator.
pub fn markov_bridge_oracle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    epsilon: f64,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    seed: u64,
    grid: TimeGrid,
) -> Result<Trajectory> {
    let ens = EnsembleSystem::constant(a.clone(), b.clone(), epsilon, grid.t_final())?;
    let cache = PropagatorCache::build(&ens, grid)?;
    let hist = NoiseHistory::sample(seed, grid, ens.input_dim());
    markov_bridge_oracle_with(&ens, &cache, x0, xf, &hist)
}

/// As [`markov_bridge_oracle`] with a prebuilt cache and a given history.
pub fn markov_bridge_oracle_with(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    hist: &NoiseHistory,
) -> Result<Trajectory> {
    let mut fb = MarkovPinnedFeedback::new(ens, cache, xf)?;
    let mut traj = simulate(ens, cache, &mut fb, x0, hist, false)?;
    traj.terminal_error = Some((traj.terminal_state() - xf).norm());
    Ok(traj)
}

/// Test families for the discrete sweep, one per (d, m) in {1,2}×{1,2}.
pub fn sweep_ensemble(d: usize, m: usize, epsilon: f64, k: usize) -> Result<(EnsembleSystem, PropagatorCache)> {
    let ens = EnsembleSystem::from_family(format!("sweep-{d}x{m}"), 16, epsilon, 1.0, |t| {
        let a = match d {
            1 => DMatrix::from_element(1, 1, -t),
            _ => DMatrix::from_row_slice(2, 2, &[-0.2 * t, -t, t, -0.1]),
        };
        let b = match (d, m) {
            (1, 1) => DMatrix::from_element(1, 1, 1.0),
            (1, _) => DMatrix::from_row_slice(1, 2, &[1.0, 0.5 + t]),
            (_, 1) => DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            _ => DMatrix::from_row_slice(2, 2, &[1.0, 0.2 * t, 0.0, 1.0]),
        };
        (a, b)
    })?;
    let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, k)?)?;
    Ok((ens, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn hand_evaluated_two_step_case() {
        let ens = EnsembleSystem::constant(dmatrix![0.0], dmatrix![1.0], 1.0, 1.0).unwrap();
        let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, 2).unwrap()).unwrap();
        let law = discrete_closed_form(&ens, &cache, 1.0).unwrap();
        let t = 2.0 / 3.0;
        assert!((law.f[0][0][(0, 0)] + t).abs() < 1e-15);
        assert!((law.f[1][0][(0, 0)] + t).abs() < 1e-15);
        assert!((law.f[1][1][(0, 0)] + 1.0).abs() < 1e-15);
        assert!((law.g[0][(0, 0)] - t).abs() < 1e-15);
        assert!((law.g[1][(0, 0)] - t).abs() < 1e-15);
        let bf = discrete_brute_force(&ens, &cache, 1.0).unwrap();
        assert!(law.max_block_deviation(&bf) < 1e-12);
    }

    #[test]
    fn coefficient_count_matches_layout() {
        for (k, d, m) in [(2, 1, 1), (4, 2, 1), (4, 1, 2), (3, 2, 2)] {
            let lay = Layout { k, d, m };
            assert_eq!(lay.len(), m * m * k * (k + 1) / 2 + m * d * k);
            assert_eq!(lay.g(k - 1, m - 1, d - 1), lay.len() - 1);
            assert_eq!(lay.f(k - 1, k - 1, m - 1, m - 1) + 1, lay.g(0, 0, 0));
        }
    }

    #[test]
    fn zero_weight_gives_zero_law() {
        let (ens, cache) = sweep_ensemble(2, 1, 0.5, 4).unwrap();
        let cf = discrete_closed_form(&ens, &cache, 0.0).unwrap();
        let bf = discrete_brute_force(&ens, &cache, 0.0).unwrap();
        assert!(cf.max_block_deviation(&DiscreteFeedforwardLaw::zeros(4, 0.0, 2, 1)) == 0.0);
        assert!(bf.max_block_deviation(&cf) < 1e-14);
    }

    #[test]
    fn large_weight_approaches_gramian_law() {
        let (ens, cache) = sweep_ensemble(1, 1, 0.5, 4).unwrap();
        let law = discrete_closed_form(&ens, &cache, 1e9).unwrap();
        let phi = discrete_input_maps(&cache);
        let s: f64 = phi.iter().map(|p| p[(0, 0)].powi(2)).sum::<f64>() * cache.grid().dt();
        for i in 0..4 {
            assert!((law.g[i][(0, 0)] - phi[i][(0, 0)] / s).abs() < 1e-6);
        }
    }

    #[test]
    fn markov_oracle_lands_without_noise() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let a = dmatrix![0.0, 1.0; -1.0, -0.3];
        let b = dmatrix![0.0; 1.0];
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let xf = DVector::from_vec(vec![-0.5, 0.2]);
        let traj = markov_bridge_oracle(&a, &b, 0.0, &x0, &xf, 1, grid).unwrap();
        // feedback on the continuous Gramian misses by O(dt) only
        assert!(traj.terminal_error.unwrap() < 5e-2, "{:?}", traj.terminal_error);
    }
}
