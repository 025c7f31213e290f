//! Dense linear-algebra helpers shared by every module.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix(format!("{what} has non-finite entries")))
    }
}

/// Matrix exponential e^{A t}.
///
/// Scaling and squaring with Padé approximants (degree up to 13), via
/// nalgebra's implementation of Higham's algorithm.
pub fn mat_exp(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidMatrix(format!(
            "exponent must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite(a, "exponent")?;
    if !t.is_finite() {
        return Err(Error::InvalidMatrix(format!("time {t} is not finite")));
    }
    if t == 0.0 {
        return Ok(DMatrix::identity(a.nrows(), a.ncols()));
    }
    Ok((a * t).exp())
}

/// Zero-order-hold maps over one step of length `dt`:
/// `(e^{A dt}, ∫_0^dt e^{A s} ds · B)`.
///
/// Computed from the exponential of the block matrix [[A, B], [0, 0]],
/// which has no removable singularity at A = 0.
pub fn zoh_maps(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = a.nrows();
    let m = b.ncols();
    if b.nrows() != d {
        return Err(Error::InvalidMatrix(format!(
            "input matrix has {} rows, state dimension is {d}",
            b.nrows()
        )));
    }
    let mut aug = DMatrix::zeros(d + m, d + m);
    aug.view_mut((0, 0), (d, d)).copy_from(a);
    aug.view_mut((0, d), (d, m)).copy_from(b);
    let e = mat_exp(&aug, dt)?;
    Ok((
        e.view((0, 0), (d, d)).into_owned(),
        e.view((0, d), (d, m)).into_owned(),
    ))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotSpd(what.to_string()))
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sym.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sym.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Relative Frobenius distance ‖a − b‖ / max(‖b‖, tiny).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// log N(x; mean, cov).
pub fn gaussian_logpdf(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    Ok(GaussianLogDensity::new(cov)?.eval(&(x - mean)))
}

/// A Gaussian log density with a fixed covariance, factored once.
#[derive(Debug, Clone)]
pub struct GaussianLogDensity {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianLogDensity {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::InvalidMatrix("covariance must be square".into()));
        }
        ensure_finite(cov, "covariance")?;
        let chol = cholesky(cov, "Gaussian covariance")?;
        let d = cov.nrows() as f64;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            chol,
            log_norm: -0.5 * d * (2.0 * PI).ln() - 0.5 * log_det,
        })
    }

    /// Log density at displacement `r = x − mean`.
    pub fn eval(&self, r: &DVector<f64>) -> f64 {
        let z = self.chol.l_dirty().solve_lower_triangular(r).expect("triangular factor is nonsingular");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    pub fn precision_mul(&self, r: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(r)
    }
}
