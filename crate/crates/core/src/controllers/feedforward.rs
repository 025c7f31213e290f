//! Noise-history feedforward laws: the pinned control toward a fixed
//! terminal point and the path-integral bridge control toward a density.

use nalgebra::{DMatrix, DVector};

use super::noise::NoiseHistory;
use crate::ensemble::{EnsembleSystem, PropagatorCache};
use crate::error::{Error, Result};
use crate::marginals::{GridDensity, SchrodingerPotentials};

/// A causal control law on the simulation grid.
///
/// The simulator calls `control(i, x_i)` and then `advance(i, u_i, ΔW_i)`
/// for i = 0, 1, …, k−1, in order. Feedforward laws ignore `x_i`.
pub trait Controller {
    fn control(&mut self, step: usize, x_avg: &DVector<f64>) -> Result<DVector<f64>>;
    fn advance(&mut self, step: usize, u: &DVector<f64>, dw: &[f64]) -> Result<()>;
}

/// The zero control.
#[derive(Debug, Clone)]
pub struct ZeroControl {
    pub m: usize,
}

impl Controller for ZeroControl {
    fn control(&mut self, _step: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.m))
    }

    fn advance(&mut self, _step: usize, _u: &DVector<f64>, _dw: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// A prescribed open-loop control sequence.
#[derive(Debug, Clone)]
pub struct OpenLoop {
    pub controls: Vec<DVector<f64>>,
}

impl Controller for OpenLoop {
    fn control(&mut self, step: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        self.controls
            .get(step)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("no open-loop control for step {step}")))
    }

    fn advance(&mut self, _step: usize, _u: &DVector<f64>, _dw: &[f64]) -> Result<()> {
        Ok(())
    }
}

fn check_step(expected: usize, step: usize, k: usize) -> Result<()> {
    if step >= k {
        return Err(Error::SingularTail { step, steps: k });
    }
    if step != expected {
        return Err(Error::Protocol(format!("expected step {expected}, got {step}")));
    }
    Ok(())
}

/// Running state of the pinned feedforward law
/// u_i = Φ̄_iᵀ[−√ε S_i + Ĝ_0⁻¹(x_f − M(t_f)x₀)], S_{i+1} = S_i + Ĝ_i⁻¹Φ̄_i ΔW_i.
#[derive(Debug, Clone)]
pub struct FeedforwardState<'a> {
    cache: &'a PropagatorCache,
    sqrt_eps: f64,
    /// Σ_{α<i} Ĝ_α⁻¹ Φ̄_α ΔW_α
    pub s: DVector<f64>,
    pub step_index: usize,
    pub x0: DVector<f64>,
    pub target_term: DVector<f64>,
    stochastic_sign: f64,
}

impl<'a> FeedforwardState<'a> {
    pub fn pinned(
        ens: &EnsembleSystem,
        cache: &'a PropagatorCache,
        x0: &DVector<f64>,
        xf: &DVector<f64>,
    ) -> Result<Self> {
        cache.check_compatible(ens)?;
        let d = cache.state_dim();
        if x0.len() != d || xf.len() != d {
            return Err(Error::InvalidParameter(format!("x0 and xf must have dimension {d}")));
        }
        let target_term = cache.solve_discrete_gramian(&(xf - cache.terminal_map() * x0));
        Ok(Self {
            cache,
            sqrt_eps: ens.epsilon().sqrt(),
            s: DVector::zeros(d),
            step_index: 0,
            x0: x0.clone(),
            target_term,
            stochastic_sign: 1.0,
        })
    }

    /// Flips the sign of the stochastic term. Only for mutation tests of
    /// the verification suite; the law is no longer optimal.
    pub fn with_flipped_noise_term(mut self) -> Self {
        self.stochastic_sign = -self.stochastic_sign;
        self
    }

    /// The pinned control at the current step.
    pub fn pinned_control(&self, step: usize) -> Result<DVector<f64>> {
        check_step(self.step_index, step, self.cache.grid().steps())?;
        let v = &self.target_term - &self.s * (self.stochastic_sign * self.sqrt_eps);
        Ok(self.cache.phi_bar(step).tr_mul(&v))
    }
}

impl Controller for FeedforwardState<'_> {
    fn control(&mut self, step: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        self.pinned_control(step)
    }

    fn advance(&mut self, step: usize, _u: &DVector<f64>, dw: &[f64]) -> Result<()> {
        check_step(self.step_index, step, self.cache.grid().steps())?;
        self.s.gemv(1.0, self.cache.gain(step), &DVector::from_column_slice(dw), 1.0);
        self.step_index += 1;
        Ok(())
    }
}

/// Posterior over terminal states on the target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    /// One weight per target cell; zero where φ_f vanishes.
    pub weights: Vec<f64>,
    pub posterior_mean: DVector<f64>,
}

/// Target cells where φ_f > 0, with per-step whitening of their locations.
///
/// Built once per (cache, potentials, target grid) and shared across runs.
/// Step i whitens with the Cholesky factor L_i of G_{t_f,t_i}, so the
/// conditional log density of target y is −‖L_i⁻¹y − L_i⁻¹c‖² / (2ε) + const.
#[derive(Debug, Clone)]
pub struct BridgePlan<'a> {
    cache: &'a PropagatorCache,
    eps: f64,
    d: usize,
    nf: usize,
    /// indices into the full target grid
    active: Vec<usize>,
    /// active × d, row-major
    targets: Vec<f64>,
    log_phif: Vec<f64>,
    /// per step: L_i⁻¹ (d×d)
    linv: Vec<DMatrix<f64>>,
    /// per step: active × d, row-major L_i⁻¹ y_j
    whitened: Vec<Vec<f64>>,
}

impl<'a> BridgePlan<'a> {
    pub fn new(
        ens: &EnsembleSystem,
        cache: &'a PropagatorCache,
        pot: &SchrodingerPotentials,
        gridf: &GridDensity,
    ) -> Result<Self> {
        cache.check_compatible(ens)?;
        let eps = ens.positive_epsilon()?;
        let d = cache.state_dim();
        if gridf.dim() != d || pot.log_phif.len() != gridf.len() {
            return Err(Error::InvalidParameter("potentials do not live on the target grid".into()));
        }
        let active: Vec<usize> = (0..gridf.len()).filter(|&j| pot.log_phif[j].is_finite()).collect();
        if active.is_empty() {
            return Err(Error::PosteriorSupport { step: 0 });
        }
        let mut targets = Vec::with_capacity(active.len() * d);
        for &j in &active {
            targets.extend(gridf.point(j).iter());
        }
        let log_phif = active.iter().map(|&j| pot.log_phif[j]).collect();
        let k = cache.grid().steps();
        let mut linv = Vec::with_capacity(k);
        let mut whitened = Vec::with_capacity(k);
        let ymat = DMatrix::from_column_slice(d, active.len(), &targets);
        for i in 0..k {
            let chol = cache
                .gramian_tail_chol(i)
                .ok_or(Error::SingularTail { step: i, steps: k })?;
            let l = chol.l();
            let li = l
                .solve_lower_triangular(&DMatrix::identity(d, d))
                .ok_or(Error::SingularTail { step: i, steps: k })?;
            let w = &li * &ymat;
            whitened.push(w.as_slice().to_vec());
            linv.push(li);
        }
        Ok(Self {
            cache,
            eps,
            d,
            nf: gridf.len(),
            active,
            targets,
            log_phif,
            linv,
            whitened,
        })
    }

    pub fn cache(&self) -> &'a PropagatorCache {
        self.cache
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    /// Normalized weights on the active targets for a conditional Gaussian
    /// centered at `center` with covariance ε G_{t_f,t_i}.
    fn active_weights(&self, step: usize, center: &DVector<f64>) -> Result<Vec<f64>> {
        let d = self.d;
        let c = &self.linv[step] * center;
        let y = &self.whitened[step];
        let scale = -0.5 / self.eps;
        let mut lw: Vec<f64> = self
            .log_phif
            .iter()
            .enumerate()
            .map(|(j, lp)| {
                let mut q = 0.0;
                for r in 0..d {
                    let z = y[j * d + r] - c[r];
                    q += z * z;
                }
                scale * q + lp
            })
            .collect();
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::PosteriorSupport { step });
        }
        let mut sum = 0.0;
        for v in &mut lw {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in &mut lw {
            *v /= sum;
        }
        Ok(lw)
    }

    /// Posterior weights over the full target grid.
    pub fn posterior(&self, step: usize, center: &DVector<f64>) -> Result<PosteriorWeights> {
        let w = self.active_weights(step, center)?;
        let mut weights = vec![0.0; self.nf];
        let mut mean = DVector::zeros(self.d);
        for (a, (&j, &wj)) in self.active.iter().zip(&w).enumerate() {
            weights[j] = wj;
            for r in 0..self.d {
                mean[r] += wj * self.targets[a * self.d + r];
            }
        }
        Ok(PosteriorWeights { weights, posterior_mean: mean })
    }
}

/// The path-integral bridge control u_i = Σ_j w_j u_pinned(t_i | x_fʲ).
///
/// The pinned control toward y given the realized history is K_iᵀ(y − ẑ_i),
/// where ẑ_i is the predicted terminal state: ẑ_0 = M(t_f)x₀ and
/// ẑ_{i+1} = ẑ_i + Φ̄_i u_i dt + √ε Ĝ_{i+1}Ĝ_i⁻¹Φ̄_i ΔW_i.
/// The posterior is centered at ẑ_i with covariance ε G_{t_f,t_i}. For a
/// single target cell this reproduces the pinned law exactly.
#[derive(Debug, Clone)]
pub struct BridgeController<'p, 'a> {
    plan: &'p BridgePlan<'a>,
    sqrt_eps: f64,
    pub zhat: DVector<f64>,
    pub step_index: usize,
    pub x0: DVector<f64>,
    last: Option<PosteriorWeights>,
    /// Largest |quadrature form − affine form| seen so far.
    pub max_affine_deviation: f64,
    /// Largest |Σ w − 1| seen so far.
    pub max_normalization_error: f64,
}

impl<'p, 'a> BridgeController<'p, 'a> {
    pub fn new(plan: &'p BridgePlan<'a>, x0: &DVector<f64>) -> Result<Self> {
        let cache = plan.cache;
        if x0.len() != cache.state_dim() {
            return Err(Error::InvalidParameter(format!("x0 must have dimension {}", cache.state_dim())));
        }
        Ok(Self {
            plan,
            sqrt_eps: plan.eps.sqrt(),
            zhat: cache.terminal_map() * x0,
            step_index: 0,
            x0: x0.clone(),
            last: None,
            max_affine_deviation: 0.0,
            max_normalization_error: 0.0,
        })
    }

    pub fn last_posterior(&self) -> Option<&PosteriorWeights> {
        self.last.as_ref()
    }

    /// Both evaluations of the bridge control at the current step:
    /// (Σ_j w_j K_iᵀ(y_j − ẑ), K_iᵀ(ȳ − ẑ)).
    pub fn control_forms(&mut self, step: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let plan = self.plan;
        let cache = plan.cache;
        check_step(self.step_index, step, cache.grid().steps())?;
        let post = plan.posterior(step, &self.zhat)?;
        let gain = cache.gain(step);
        let (d, m) = (cache.state_dim(), cache.input_dim());
        let mut quad = DVector::zeros(m);
        let mut r = DVector::zeros(d);
        let mut wsum = 0.0;
        for (a, &j) in plan.active.iter().enumerate() {
            let wj = post.weights[j];
            if wj == 0.0 {
                continue;
            }
            wsum += wj;
            for c in 0..d {
                r[c] = plan.targets[a * d + c] - self.zhat[c];
            }
            quad.gemv_tr(wj, gain, &r, 1.0);
        }
        let affine = gain.tr_mul(&(&post.posterior_mean - &self.zhat));
        let dev = (&quad - &affine).amax();
        self.max_affine_deviation = self.max_affine_deviation.max(dev);
        self.max_normalization_error = self.max_normalization_error.max((wsum - 1.0).abs());
        self.last = Some(post);
        Ok((quad, affine))
    }
}

impl Controller for BridgeController<'_, '_> {
    fn control(&mut self, step: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        let (quad, affine) = self.control_forms(step)?;
        debug_assert!(
            (&quad - &affine).amax() <= 1e-8 * (1.0 + affine.amax()),
            "bridge control forms disagree at step {step}"
        );
        Ok(quad)
    }

    fn advance(&mut self, step: usize, u: &DVector<f64>, dw: &[f64]) -> Result<()> {
        let cache = self.plan.cache;
        check_step(self.step_index, step, cache.grid().steps())?;
        let dt = cache.grid().dt();
        let phib = cache.phi_bar(step);
        let dw = DVector::from_column_slice(dw);
        // Ĝ_{i+1}Ĝ_i⁻¹Φ̄_i ΔW = Φ̄_i(ΔW − dt Φ̄_iᵀ K_i ΔW)
        let kdw = cache.gain(step) * &dw;
        let comp = &dw - phib.tr_mul(&kdw) * dt;
        self.zhat.gemv(dt, phib, u, 1.0);
        self.zhat.gemv(self.sqrt_eps, phib, &comp, 1.0);
        self.step_index += 1;
        Ok(())
    }
}

/// Passive conditional terminal mean M(t_f)x₀ + √ε Σ_{α<i} Φ̄_α ΔW_α.
pub fn conditional_mean(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    x0: &DVector<f64>,
    hist: &NoiseHistory,
    step: usize,
) -> Result<DVector<f64>> {
    cache.check_compatible(ens)?;
    if step > hist.len() {
        return Err(Error::Protocol(format!("history has {} steps, asked for {step}", hist.len())));
    }
    let mut mean = cache.terminal_map() * x0;
    let se = ens.epsilon().sqrt();
    for a in 0..step {
        mean.gemv(se, cache.phi_bar(a), &DVector::from_column_slice(hist.increment(a)), 1.0);
    }
    Ok(mean)
}

/// Conditional transition density of the uncontrolled averaged terminal
/// state at `y`, given x₀ and the noise up to t_i: Gaussian with the
/// [`conditional_mean`] and covariance ε G_{t_f,t_i}.
pub fn conditional_kernel(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    x0: &DVector<f64>,
    hist: &NoiseHistory,
    step: usize,
    y: &DVector<f64>,
) -> Result<f64> {
    let eps = ens.positive_epsilon()?;
    let k = cache.grid().steps();
    if step >= k {
        return Err(Error::SingularTail { step, steps: k });
    }
    let mean = conditional_mean(ens, cache, x0, hist, step)?;
    let cov = cache.gramian_tail(step) * eps;
    Ok(crate::ensemble::linalg::gaussian_logpdf(&mean, &cov, y)?.exp())
}

/// Posterior over the target grid, w_j ∝ N(x_fʲ; center, ε G_{t_f,t_i}) φ_f(x_fʲ).
pub fn posterior_weights(
    ens: &EnsembleSystem,
    cache: &PropagatorCache,
    center: &DVector<f64>,
    step: usize,
    pot: &SchrodingerPotentials,
    gridf: &GridDensity,
) -> Result<PosteriorWeights> {
    let k = cache.grid().steps();
    if step >= k {
        return Err(Error::SingularTail { step, steps: k });
    }
    let eps = ens.positive_epsilon()?;
    let cov = cache.gramian_tail(step) * eps;
    let g = crate::ensemble::linalg::GaussianLogDensity::new(&cov)?;
    let lw: Vec<f64> = (0..gridf.len())
        .map(|j| {
            let l = pot.log_phif[j];
            if l.is_finite() {
                g.eval(&(gridf.point(j) - center)) + l
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::PosteriorSupport { step });
    }
    let mut weights: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let mut mean = DVector::zeros(gridf.dim());
    for (j, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            mean += gridf.point(j) * *w;
        }
    }
    Ok(PosteriorWeights { weights, posterior_mean: mean })
}
