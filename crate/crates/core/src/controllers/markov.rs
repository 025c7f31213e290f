//! State-feedback laws for a θ-independent system, used to cross-check the
//! feedforward laws.

use nalgebra::{DMatrix, DVector};

use super::feedforward::Controller;
use crate::ensemble::linalg::{self, mat_exp};
use crate::ensemble::{EnsembleSystem, PropagatorCache};
use crate::error::{Error, Result};
use crate::marginals::{GridDensity, SchrodingerPotentials};

fn require_constant(ens: &EnsembleSystem) -> Result<()> {
    if ens.is_constant() {
        Ok(())
    } else {
        Err(Error::InvalidParameter("feedback oracle needs a θ-independent system".into()))
    }
}

/// Controllability Gramian ∫_0^τ e^{As}BBᵀe^{Aᵀs} ds via the Van Loan
/// block exponential.
pub fn controllability_gramian(a: &DMatrix<f64>, b: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if tau == 0.0 {
        return Ok(DMatrix::zeros(d, d));
    }
    let mut blk = DMatrix::zeros(2 * d, 2 * d);
    blk.view_mut((0, 0), (d, d)).copy_from(&(-a));
    blk.view_mut((0, d), (d, d)).copy_from(&(b * b.transpose()));
    blk.view_mut((d, d), (d, d)).copy_from(&a.transpose());
    let e = mat_exp(&blk, tau)?;
    let f12 = e.view((0, d), (d, d)).into_owned();
    let f22 = e.view((d, d), (d, d)).into_owned();
    let mut g = f22.transpose() * f12;
    linalg::symmetrize(&mut g);
    Ok(g)
}

/// P(t) = e^{A(t−t_f)} G_{t_f,t} e^{Aᵀ(t−t_f)}, the solution of
/// dP/dt = AP + PAᵀ − BBᵀ with P(t_f) = 0.
pub fn lyapunov_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64, t_final: f64) -> Result<DMatrix<f64>> {
    if !(t <= t_final) {
        return Err(Error::OutOfRange { what: "t", value: t, lo: f64::NEG_INFINITY, hi: t_final });
    }
    let tau = t_final - t;
    let g = controllability_gramian(a, b, tau)?;
    let e = mat_exp(a, -tau)?;
    let mut p = &e * g * e.transpose();
    linalg::symmetrize(&mut p);
    Ok(p)
}

/// u = εBᵀ∇ log φ(t_i, x) with φ(t, x) = ∫ q(t, x, t_f, y) φ_f(y) dy on the
/// target grid, for a θ-independent system.
///
/// Written out, u = Bᵀe^{Aᵀ(t_f−t)} G_{t_f,t}⁻¹ (ȳ − e^{A(t_f−t)}x), where ȳ
/// is the mean of q(t, x, t_f, ·)φ_f over the grid.
pub fn markov_feedback_control(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    pot: &SchrodingerPotentials,
    gridf: &GridDensity,
    step: usize,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    require_constant(ens)?;
    cache.check_compatible(ens)?;
    let k = cache.grid().steps();
    if step >= k {
        return Err(Error::SingularTail { step, steps: k });
    }
    let tau = cache.grid().t_final() - cache.grid().time(step);
    let e = mat_exp(ens.a(0), tau)?;
    let center = &e * x;
    let post = super::feedforward::posterior_weights(ens, cache, &center, step, pot, gridf)?;
    let chol = cache.gramian_tail_chol(step).ok_or(Error::SingularTail { step, steps: k })?;
    let v = chol.solve(&(post.posterior_mean - center));
    Ok(ens.b(0).tr_mul(&(e.transpose() * v)))
}

/// Markov feedback pinned to one terminal point:
/// u_i = Bᵀe^{Aᵀ(t_f−t_i)} G_{t_f,t_i}⁻¹ (x_f − e^{A(t_f−t_i)} x_i).
///
/// Only valid for a θ-independent system, where x_i is a Markov state.
#[derive(Debug, Clone)]
pub struct MarkovPinnedFeedback {
    xf: DVector<f64>,
    /// per step: e^{A(t_f−t_i)}
    e: Vec<DMatrix<f64>>,
    /// per step: Bᵀ e^{Aᵀ(t_f−t_i)} G_{t_f,t_i}⁻¹
    f: Vec<DMatrix<f64>>,
}

impl MarkovPinnedFeedback {
    pub fn new(ens: &EnsembleSystem, cache: &PropagatorCache, xf: &DVector<f64>) -> Result<Self> {
        require_constant(ens)?;
        cache.check_compatible(ens)?;
        let k = cache.grid().steps();
        let mut e = Vec::with_capacity(k);
        let mut f = Vec::with_capacity(k);
        for i in 0..k {
            let tau = cache.grid().t_final() - cache.grid().time(i);
            let ei = mat_exp(ens.a(0), tau)?;
            let chol = cache.gramian_tail_chol(i).ok_or(Error::SingularTail { step: i, steps: k })?;
            // (G⁻¹ E B)ᵀ = Bᵀ Eᵀ G⁻¹
            let gi_eb = chol.solve(&(&ei * ens.b(0)));
            f.push(gi_eb.transpose());
            e.push(ei);
        }
        Ok(Self { xf: xf.clone(), e, f })
    }
}

impl Controller for MarkovPinnedFeedback {
    fn control(&mut self, step: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.e.len();
        if step >= k {
            return Err(Error::SingularTail { step, steps: k });
        }
        Ok(&self.f[step] * (&self.xf - &self.e[step] * x))
    }

    fn advance(&mut self, _step: usize, _u: &DVector<f64>, _dw: &[f64]) -> Result<()> {
        Ok(())
    }
}
