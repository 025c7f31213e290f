//! Parameter families (A(θ), B(θ)) discretized on a θ-quadrature, and the
//! θ-averaged matrix functions built from them.

pub mod linalg;
pub mod propagator;
pub mod quadrature;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use propagator::{averaged_input_map, averaged_state_map, gramian, PropagatorCache};

/// Default number of θ quadrature nodes.
pub const DEFAULT_THETA_NODES: usize = 64;

/// Uniform time grid t_i = i·dt on [0, t_f].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    k: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, k: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {t_final}")));
        }
        if k < 2 {
            return Err(Error::InvalidParameter(format!("time grid needs at least 2 steps, got {k}")));
        }
        Ok(Self { t_final, k })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// Number of steps.
    pub fn steps(&self) -> usize {
        self.k
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.k as f64
    }

    /// t_i; `time(k) == t_final` exactly.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.k {
            self.t_final
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.k).map(|i| self.time(i)).collect()
    }

    /// Grid with `factor` times fewer steps (requires divisibility).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.k % factor != 0 {
            return Err(Error::InvalidParameter(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.k
            )));
        }
        Self::new(self.t_final, self.k / factor)
    }
}

/// A family of linear systems dX = A(θ)X dt + B(θ)(u dt + √ε dW), with
/// θ ∈ [0, 1] represented by weighted quadrature nodes.
#[derive(Debug, Clone)]
pub struct EnsembleSystem {
    name: String,
    d: usize,
    m: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    epsilon: f64,
    t_final: f64,
}

impl EnsembleSystem {
    /// Builds a system from per-node matrix tables.
    ///
    /// `epsilon = 0` is accepted and gives deterministic dynamics; anything
    /// that needs a density (kernels, posteriors) rejects it later.
    pub fn from_tables(
        name: impl Into<String>,
        nodes: Vec<f64>,
        weights: Vec<f64>,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        epsilon: f64,
        t_final: f64,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 || weights.len() != n || a.len() != n || b.len() != n {
            return Err(Error::InvalidParameter(format!(
                "node tables disagree: {} nodes, {} weights, {} A, {} B",
                n,
                weights.len(),
                a.len(),
                b.len()
            )));
        }
        if nodes.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidParameter("θ nodes must lie in [0, 1]".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("θ weights must be positive".into()));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("θ weights sum to {wsum}, expected 1")));
        }
        let d = a[0].nrows();
        let m = b[0].ncols();
        if d == 0 || m == 0 {
            return Err(Error::InvalidMatrix("state and input dimensions must be positive".into()));
        }
        for (j, (aj, bj)) in a.iter().zip(&b).enumerate() {
            if aj.shape() != (d, d) || bj.shape() != (d, m) {
                return Err(Error::InvalidMatrix(format!(
                    "node {j}: A is {:?}, B is {:?}, expected ({d},{d}) and ({d},{m})",
                    aj.shape(),
                    bj.shape()
                )));
            }
            linalg::ensure_finite(aj, "A(θ)")?;
            linalg::ensure_finite(bj, "B(θ)")?;
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise intensity must be >= 0, got {epsilon}")));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {t_final}")));
        }
        Ok(Self {
            name: name.into(),
            d,
            m,
            nodes,
            weights,
            a,
            b,
            epsilon,
            t_final,
        })
    }

    /// Samples `family(θ)` on an `n`-point Gauss–Legendre rule over [0, 1].
    pub fn from_family<F>(name: impl Into<String>, n: usize, epsilon: f64, t_final: f64, family: F) -> Result<Self>
    where
        F: Fn(f64) -> (DMatrix<f64>, DMatrix<f64>),
    {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one θ node".into()));
        }
        let rule = quadrature::gauss_legendre_unit(n);
        let (a, b): (Vec<_>, Vec<_>) = rule.nodes.iter().map(|&t| family(t)).unzip();
        // Renormalize so the weights sum to one to machine precision.
        let s: f64 = rule.weights.iter().sum();
        let weights = rule.weights.iter().map(|w| w / s).collect();
        Self::from_tables(name, rule.nodes, weights, a, b, epsilon, t_final)
    }

    /// A(θ) = −θ, B(θ) = 1.
    pub fn scalar_decay(n: usize, epsilon: f64, t_final: f64) -> Result<Self> {
        Self::from_family("scalar-decay", n, epsilon, t_final, |t| {
            (DMatrix::from_element(1, 1, -t), DMatrix::identity(1, 1))
        })
    }

    /// A(θ) = θ·[[0, −1], [1, 0]], B(θ) = I₂.
    pub fn planar_rotation(n: usize, epsilon: f64, t_final: f64) -> Result<Self> {
        Self::from_family("planar-rotation", n, epsilon, t_final, |t| {
            (
                DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]),
                DMatrix::identity(2, 2),
            )
        })
    }

    /// θ-independent system (a single node of unit weight).
    pub fn constant(a: DMatrix<f64>, b: DMatrix<f64>, epsilon: f64, t_final: f64) -> Result<Self> {
        Self::from_tables("constant", vec![0.5], vec![1.0], vec![a], vec![b], epsilon, t_final)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn a(&self, j: usize) -> &DMatrix<f64> {
        &self.a[j]
    }

    pub fn b(&self, j: usize) -> &DMatrix<f64> {
        &self.b[j]
    }

    /// True when every node carries the same (A, B).
    pub fn is_constant(&self) -> bool {
        self.a.iter().all(|x| x == &self.a[0]) && self.b.iter().all(|x| x == &self.b[0])
    }

    /// Copy with a different noise intensity.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::from_tables(
            self.name.clone(),
            self.nodes.clone(),
            self.weights.clone(),
            self.a.clone(),
            self.b.clone(),
            epsilon,
            self.t_final,
        )
    }

    /// The noise intensity, rejecting ε = 0 where a density is required.
    pub(crate) fn positive_epsilon(&self) -> Result<f64> {
        if self.epsilon > 0.0 {
            Ok(self.epsilon)
        } else {
            Err(Error::InvalidParameter(
                "this operation needs a positive noise intensity".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert_eq!(g.coarsen(2).unwrap().steps(), 2);
        assert!(g.coarsen(3).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let r = EnsembleSystem::from_tables(
            "x",
            vec![0.2, 0.8],
            vec![0.5, 0.4],
            vec![DMatrix::zeros(1, 1); 2],
            vec![DMatrix::identity(1, 1); 2],
            1.0,
            1.0,
        );
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn non_finite_family_rejected() {
        let r = EnsembleSystem::constant(DMatrix::from_element(1, 1, f64::INFINITY), DMatrix::identity(1, 1), 1.0, 1.0);
        assert!(matches!(r, Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn builtins_have_expected_shapes() {
        let s = EnsembleSystem::scalar_decay(16, 0.1, 1.0).unwrap();
        assert_eq!((s.state_dim(), s.input_dim(), s.node_count()), (1, 1, 16));
        let r = EnsembleSystem::planar_rotation(8, 0.05, 1.0).unwrap();
        assert_eq!((r.state_dim(), r.input_dim()), (2, 2));
        assert!(!r.is_constant());
        let w: f64 = r.weights().iter().sum();
        assert!((w - 1.0).abs() < 1e-15);
    }
}
