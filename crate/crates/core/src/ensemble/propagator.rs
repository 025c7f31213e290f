//! θ-averaged propagators: M(t), Φ(t, τ), the averaged Gramian, and their
//! tabulation on a time grid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::linalg::{self, mat_exp, symmetrize, zoh_maps};
use super::quadrature::{gauss_legendre_unit, Rule};
use super::{EnsembleSystem, TimeGrid};
use crate::error::{Error, Result};

/// Gauss–Legendre points per time cell used for Gramian integrals.
pub const GRAMIAN_POINTS_PER_CELL: usize = 8;

/// Relative eigenvalue threshold below which a Gramian counts as singular.
pub const EIG_TOL_REL: f64 = 1e-10;

fn check_time(what: &'static str, t: f64, lo: f64, hi: f64) -> Result<()> {
    if t.is_finite() && t >= lo && t <= hi {
        Ok(())
    } else {
        Err(Error::OutOfRange { what, value: t, lo, hi })
    }
}

/// M(t) = Σ_j w_j e^{A(θ_j) t}.
pub fn averaged_state_map(ens: &EnsembleSystem, t: f64) -> Result<DMatrix<f64>> {
    check_time("t", t, 0.0, ens.t_final())?;
    let d = ens.state_dim();
    if t == 0.0 {
        return Ok(DMatrix::identity(d, d));
    }
    let mut acc = DMatrix::zeros(d, d);
    for j in 0..ens.node_count() {
        acc += mat_exp(ens.a(j), t)? * ens.weights()[j];
    }
    Ok(acc)
}

/// Φ(t, τ) = Σ_j w_j e^{A(θ_j)(t − τ)} B(θ_j).
pub fn averaged_input_map(ens: &EnsembleSystem, t: f64, tau: f64) -> Result<DMatrix<f64>> {
    check_time("t", t, 0.0, ens.t_final())?;
    check_time("tau", tau, 0.0, t)?;
    input_map_unchecked(ens, t - tau)
}

fn input_map_unchecked(ens: &EnsembleSystem, lag: f64) -> Result<DMatrix<f64>> {
    let mut acc = DMatrix::zeros(ens.state_dim(), ens.input_dim());
    for j in 0..ens.node_count() {
        let e = mat_exp(ens.a(j), lag)?;
        acc.gemm(ens.weights()[j], &e, ens.b(j), 1.0);
    }
    Ok(acc)
}

fn eig_tol(g: &DMatrix<f64>) -> f64 {
    EIG_TOL_REL * g.trace().abs() / g.nrows() as f64
}

fn check_controllable(g: &DMatrix<f64>, s: f64, t: f64) -> Result<f64> {
    let min_eig = linalg::min_eigenvalue(g);
    let tol = eig_tol(g);
    if min_eig <= tol || !min_eig.is_finite() {
        return Err(Error::NotControllable { s, t, min_eig, tol });
    }
    Ok(min_eig)
}

/// G_{t,s} = ∫_s^t Φ(t,τ)Φ(t,τ)ᵀ dτ by composite Gauss–Legendre with
/// `panels` equal panels of eight points each.
pub fn gramian(ens: &EnsembleSystem, t: f64, s: f64, panels: usize) -> Result<DMatrix<f64>> {
    check_time("t", t, 0.0, ens.t_final())?;
    if !(s.is_finite() && s >= 0.0 && s < t) {
        return Err(Error::OutOfRange { what: "s", value: s, lo: 0.0, hi: t });
    }
    if panels == 0 {
        return Err(Error::InvalidParameter("gramian needs at least one panel".into()));
    }
    let g = gramian_raw(ens, t, s, panels, &gauss_legendre_unit(GRAMIAN_POINTS_PER_CELL))?;
    debug_assert!(linalg::min_eigenvalue(&g) >= -1e-12 * g.norm());
    check_controllable(&g, s, t)?;
    Ok(g)
}

fn gramian_raw(ens: &EnsembleSystem, t: f64, s: f64, panels: usize, rule: &Rule) -> Result<DMatrix<f64>> {
    let d = ens.state_dim();
    let h = (t - s) / panels as f64;
    let mut g = DMatrix::zeros(d, d);
    for p in 0..panels {
        for (&c, &w) in rule.nodes.iter().zip(&rule.weights) {
            let tau = s + (p as f64 + c) * h;
            let phi = input_map_unchecked(ens, t - tau)?;
            g.gemm(w * h, &phi, &phi.transpose(), 1.0);
        }
    }
    symmetrize(&mut g);
    Ok(g)
}

/// Per-node exact one-step maps: X ↦ E X + Γ v for a held input v.
#[derive(Debug, Clone)]
pub struct NodeStep {
    pub weight: f64,
    /// e^{A dt}
    pub e: DMatrix<f64>,
    /// ∫_0^dt e^{A s} ds · B
    pub gamma: DMatrix<f64>,
}

/// Propagators tabulated on a time grid, built once and shared read-only.
///
/// Besides the pointwise quantities M(t_i), Φ(t_f, t_i) and the Gramian
/// tail G_{t_f,t_i}, the cache holds their sampled-data counterparts for a
/// control and noise held constant on each cell:
///
/// * Φ̄_i = (1/dt) ∫_{t_i}^{t_{i+1}} Φ(t_f, τ) dτ, the cell-averaged input map;
/// * Ĝ_i = Σ_{α ≥ i} Φ̄_α Φ̄_αᵀ dt, the discrete Gramian tail;
/// * K_i = Ĝ_i⁻¹ Φ̄_i, the per-step feedforward gain.
///
/// With these, x(t_f) = M(t_f)x₀ + Σ_i Φ̄_i (u_i dt + √ε ΔW_i) holds exactly
/// for the zero-order-hold simulator, so the controllers see the simulated
/// average without quadrature error (a noiseless pinned run lands exactly).
/// Ĝ_i and G_{t_f,t_i} differ by O(dt²).
#[derive(Debug, Clone)]
pub struct PropagatorCache {
    grid: TimeGrid,
    d: usize,
    m: usize,
    state_map: Vec<DMatrix<f64>>,
    phi_point: Vec<DMatrix<f64>>,
    phi_bar: Vec<DMatrix<f64>>,
    tail: Vec<DMatrix<f64>>,
    tail_chol: Vec<Option<Cholesky<f64, Dyn>>>,
    tail_discrete: Vec<DMatrix<f64>>,
    tail_discrete_chol: Vec<Option<Cholesky<f64, Dyn>>>,
    gain: Vec<DMatrix<f64>>,
    min_eig: f64,
    nodes: Vec<NodeStep>,
}

impl PropagatorCache {
    /// Tabulates all propagators on `grid`.
    ///
    /// Powers of the per-node one-step exponential are accumulated, so the
    /// cost is O(nodes · k) small matrix products. Fails with
    /// [`Error::NotControllable`] when G_{t_f,0} is numerically singular.
    pub fn build(ens: &EnsembleSystem, grid: TimeGrid) -> Result<Self> {
        if (grid.t_final() - ens.t_final()).abs() > 1e-12 * ens.t_final() {
            return Err(Error::InvalidParameter(format!(
                "grid horizon {} differs from ensemble horizon {}",
                grid.t_final(),
                ens.t_final()
            )));
        }
        let (d, m) = (ens.state_dim(), ens.input_dim());
        let k = grid.steps();
        let dt = grid.dt();
        let rule = gauss_legendre_unit(GRAMIAN_POINTS_PER_CELL);
        let nq = rule.len();

        let mut state_map = vec![DMatrix::zeros(d, d); k + 1];
        let mut phi_point = vec![DMatrix::zeros(d, m); k + 1];
        let mut phi_bar = vec![DMatrix::zeros(d, m); k];
        let mut phi_gl = vec![DMatrix::zeros(d, m); k * nq];
        let mut nodes = Vec::with_capacity(ens.node_count());

        let mut pow = DMatrix::zeros(d, d);
        let mut next = DMatrix::zeros(d, d);
        for j in 0..ens.node_count() {
            let w = ens.weights()[j];
            let (a, b) = (ens.a(j), ens.b(j));
            let (e, gamma) = zoh_maps(a, b, dt)?;
            // Maps from a Gauss point t_i + c·dt to the end of its cell.
            let sub: Vec<DMatrix<f64>> = rule
                .nodes
                .iter()
                .map(|&c| mat_exp(a, (1.0 - c) * dt).map(|x| x * b))
                .collect::<Result<_>>()?;
            pow.fill_with_identity();
            for n in 0..=k {
                state_map[n] += &pow * w;
                phi_point[k - n].gemm(w, &pow, b, 1.0);
                if n < k {
                    let i = k - 1 - n;
                    phi_bar[i].gemm(w / dt, &pow, &gamma, 1.0);
                    for (l, q) in sub.iter().enumerate() {
                        phi_gl[i * nq + l].gemm(w, &pow, q, 1.0);
                    }
                    next.gemm(1.0, &pow, &e, 0.0);
                    std::mem::swap(&mut pow, &mut next);
                }
            }
            nodes.push(NodeStep { weight: w, e, gamma });
        }
        // Exact identity rather than Σ w_j I, whose weights sum to 1 ± ulp.
        state_map[0].fill_with_identity();

        let mut tail = vec![DMatrix::zeros(d, d); k + 1];
        let mut tail_discrete = vec![DMatrix::zeros(d, d); k + 1];
        for i in (0..k).rev() {
            let mut g = tail[i + 1].clone();
            for l in 0..nq {
                let p = &phi_gl[i * nq + l];
                g.gemm(rule.weights[l] * dt, p, &p.transpose(), 1.0);
            }
            symmetrize(&mut g);
            tail[i] = g;
            let mut gd = tail_discrete[i + 1].clone();
            gd.gemm(dt, &phi_bar[i], &phi_bar[i].transpose(), 1.0);
            symmetrize(&mut gd);
            tail_discrete[i] = gd;
        }
        let min_eig = check_controllable(&tail[0], 0.0, grid.t_final())?;

        let factor = |g: &DMatrix<f64>| -> Option<Cholesky<f64, Dyn>> {
            if linalg::min_eigenvalue(g) > eig_tol(g) {
                Cholesky::new(g.clone())
            } else {
                None
            }
        };
        let tail_chol: Vec<_> = tail[..k].iter().map(factor).collect();
        let tail_discrete_chol: Vec<_> = tail_discrete[..k].iter().map(factor).collect();
        if tail_discrete_chol[0].is_none() {
            let g = &tail_discrete[0];
            return Err(Error::NotControllable {
                s: 0.0,
                t: grid.t_final(),
                min_eig: linalg::min_eigenvalue(g),
                tol: eig_tol(g),
            });
        }
        let gain = (0..k)
            .map(|i| match &tail_discrete_chol[i] {
                Some(c) => c.solve(&phi_bar[i]),
                None => {
                    // Fewer inputs than states: the last few tails are rank
                    // deficient; the minimum-norm gain keeps the law defined.
                    let g = &tail_discrete[i];
                    let pinv = g.clone().pseudo_inverse(eig_tol(&tail_discrete[0])).expect("tolerance is non-negative");
                    pinv * &phi_bar[i]
                }
            })
            .collect();

        Ok(Self {
            grid,
            d,
            m,
            state_map,
            phi_point,
            phi_bar,
            tail,
            tail_chol,
            tail_discrete,
            tail_discrete_chol,
            gain,
            min_eig,
            nodes,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    /// M(t_i).
    pub fn state_map(&self, i: usize) -> &DMatrix<f64> {
        &self.state_map[i]
    }

    /// M(t_f).
    pub fn terminal_map(&self) -> &DMatrix<f64> {
        &self.state_map[self.grid.steps()]
    }

    /// Φ(t_f, t_i), for 0 ≤ i ≤ k.
    pub fn phi(&self, i: usize) -> &DMatrix<f64> {
        &self.phi_point[i]
    }

    /// Cell-averaged Φ over [t_i, t_{i+1}], for 0 ≤ i < k.
    pub fn phi_bar(&self, i: usize) -> &DMatrix<f64> {
        &self.phi_bar[i]
    }

    /// G_{t_f,t_i}, for 0 ≤ i ≤ k (zero at i = k).
    pub fn gramian_tail(&self, i: usize) -> &DMatrix<f64> {
        &self.tail[i]
    }

    /// Cholesky factor of G_{t_f,t_i}; `None` at the horizon or when singular.
    pub fn gramian_tail_chol(&self, i: usize) -> Option<&Cholesky<f64, Dyn>> {
        self.tail_chol.get(i).and_then(|c| c.as_ref())
    }

    /// Sampled-data tail Σ_{α≥i} Φ̄_α Φ̄_αᵀ dt.
    pub fn discrete_tail(&self, i: usize) -> &DMatrix<f64> {
        &self.tail_discrete[i]
    }

    pub fn discrete_tail_chol(&self, i: usize) -> Option<&Cholesky<f64, Dyn>> {
        self.tail_discrete_chol.get(i).and_then(|c| c.as_ref())
    }

    /// Per-step gain Ĝ_i⁻¹ Φ̄_i (d×m).
    pub fn gain(&self, i: usize) -> &DMatrix<f64> {
        &self.gain[i]
    }

    /// Smallest eigenvalue of G_{t_f,0}.
    pub fn min_eig(&self) -> f64 {
        self.min_eig
    }

    /// Condition number of G_{t_f,0}.
    pub fn condition_number(&self) -> f64 {
        linalg::max_eigenvalue(&self.tail[0]) / self.min_eig
    }

    /// G_{t_f,0}⁻¹ v with the continuous Gramian.
    pub fn solve_gramian(&self, v: &DVector<f64>) -> DVector<f64> {
        self.tail_chol[0].as_ref().expect("checked at build").solve(v)
    }

    /// Ĝ_0⁻¹ v.
    pub fn solve_discrete_gramian(&self, v: &DVector<f64>) -> DVector<f64> {
        self.tail_discrete_chol[0].as_ref().expect("checked at build").solve(v)
    }

    pub fn node_steps(&self) -> &[NodeStep] {
        &self.nodes
    }

    /// Rejects ensembles whose shape or horizon does not match the cache.
    pub fn check_compatible(&self, ens: &EnsembleSystem) -> Result<()> {
        if ens.state_dim() != self.d
            || ens.input_dim() != self.m
            || ens.node_count() != self.nodes.len()
            || (ens.t_final() - self.grid.t_final()).abs() > 1e-12 * ens.t_final()
        {
            return Err(Error::Protocol("propagator cache built for a different ensemble".into()));
        }
        Ok(())
    }
}
