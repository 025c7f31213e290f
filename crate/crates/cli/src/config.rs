//! Run configuration, read from a JSON file.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ensemble_bridge::marginals::{GridDensity, DIRAC_WIDTH};
use ensemble_bridge::pipeline::{cosine_mirror_marginals, pad_target, DEFAULT_PADDING};
use ensemble_bridge::{EnsembleSystem, PropagatorCache, TimeGrid};

use crate::error::{CliError, CliResult};

/// θ-family of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleConfig {
    /// A(θ) = −θ, B = 1.
    ScalarDecay,
    /// A(θ) = [[0, −θ], [θ, 0]], B = I₂.
    PlanarRotation,
    /// θ-independent A and B, given row by row.
    Constant { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// Explicit per-node tables; weights must sum to one.
    Tables {
        nodes: Vec<f64>,
        weights: Vec<f64>,
        a: Vec<Vec<Vec<f64>>>,
        b: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MarginalsConfig {
    /// Piecewise-cosine ρ₀ on [0, 1] and its mirror image.
    CosineMirror,
    /// Point masses at x0 and xf.
    Dirac { x0: Vec<f64>, xf: Vec<f64> },
    /// Grid densities from CSV files, relative to the config file.
    Files { rho0: PathBuf, rhof: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { tol: ensemble_bridge::marginals::DEFAULT_TOL, max_iter: ensemble_bridge::marginals::DEFAULT_MAX_ITER }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridsConfig {
    pub n0: usize,
    pub nf: usize,
    pub padding: f64,
}

impl Default for GridsConfig {
    fn default() -> Self {
        Self { n0: 256, nf: 256, padding: DEFAULT_PADDING }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { n_samples: 5000, seed: 0 }
    }
}

fn default_theta_nodes() -> usize {
    ensemble_bridge::ensemble::DEFAULT_THETA_NODES
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub ensemble: EnsembleConfig,
    pub epsilon: f64,
    pub t_f: f64,
    pub time_steps: usize,
    #[serde(default = "default_theta_nodes")]
    pub theta_nodes: usize,
    pub marginals: MarginalsConfig,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
    #[serde(default)]
    pub grids: GridsConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// A validated configuration with its origin and identity.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory that relative input paths are resolved against.
    pub base_dir: PathBuf,
    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub hash: String,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> CliResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().cloned()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.t_f.is_finite() && self.t_f > 0.0) {
            return bad(format!("t_f must be positive, got {}", self.t_f));
        }
        if self.time_steps < 2 {
            return bad(format!("time_steps must be at least 2, got {}", self.time_steps));
        }
        if self.theta_nodes == 0 {
            return bad("theta_nodes must be positive".into());
        }
        if !(self.sinkhorn.tol.is_finite() && self.sinkhorn.tol > 0.0) || self.sinkhorn.max_iter == 0 {
            return bad("sinkhorn tol and max_iter must be positive".into());
        }
        if self.grids.n0 == 0 || self.grids.nf == 0 || !(self.grids.padding.is_finite() && self.grids.padding >= 0.0) {
            return bad("grid sizes must be positive and padding non-negative".into());
        }
        if self.montecarlo.n_samples == 0 {
            return bad("montecarlo.n_samples must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&canonical))
    }

    pub fn ensemble(&self) -> CliResult<EnsembleSystem> {
        let (eps, tf, n) = (self.epsilon, self.t_f, self.theta_nodes);
        let ens = match &self.ensemble {
            EnsembleConfig::ScalarDecay => EnsembleSystem::scalar_decay(n, eps, tf)?,
            EnsembleConfig::PlanarRotation => EnsembleSystem::planar_rotation(n, eps, tf)?,
            EnsembleConfig::Constant { a, b } => {
                EnsembleSystem::constant(rows_to_matrix(a, "a")?, rows_to_matrix(b, "b")?, eps, tf)?
            }
            EnsembleConfig::Tables { nodes, weights, a, b } => {
                let a = a.iter().map(|m| rows_to_matrix(m, "a")).collect::<CliResult<Vec<_>>>()?;
                let b = b.iter().map(|m| rows_to_matrix(m, "b")).collect::<CliResult<Vec<_>>>()?;
                EnsembleSystem::from_tables("tables", nodes.clone(), weights.clone(), a, b, eps, tf)?
            }
        };
        if ens.state_dim() > 2 && !matches!(self.marginals, MarginalsConfig::Dirac { .. }) {
            log::warn!("grid marginals are limited to 1D and 2D states");
        }
        Ok(ens)
    }

    pub fn grid(&self) -> CliResult<TimeGrid> {
        Ok(TimeGrid::new(self.t_f, self.time_steps)?)
    }

    /// Point masses of a Dirac marginal configuration, if any.
    pub fn dirac_points(&self) -> Option<(&[f64], &[f64])> {
        match &self.marginals {
            MarginalsConfig::Dirac { x0, xf } => Some((x0, xf)),
            _ => None,
        }
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = RunConfig::from_json(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(config, base_dir)
    }

    pub fn from_config(config: RunConfig, base_dir: PathBuf) -> CliResult<Self> {
        config.validate()?;
        let hash = config.hash();
        let loaded = Self { config, base_dir, hash };
        if let MarginalsConfig::Files { rho0, rhof } = &loaded.config.marginals {
            for p in [rho0, rhof] {
                if !loaded.resolve(p).is_file() {
                    return Err(CliError::Config(format!("marginal file {} does not exist", p.display())));
                }
            }
        }
        Ok(loaded)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Source marginal and target marginal on its (padded) target grid.
    pub fn marginals(&self, ens: &EnsembleSystem, cache: &PropagatorCache) -> CliResult<(GridDensity, GridDensity)> {
        let c = &self.config;
        let d = ens.state_dim();
        let (rho0, rhof) = match &c.marginals {
            MarginalsConfig::CosineMirror => {
                if d != 1 {
                    return Err(CliError::Config("cosine-mirror marginals need a 1D ensemble".into()));
                }
                cosine_mirror_marginals(ens, cache, c.grids.n0, c.grids.nf, c.grids.padding)?
            }
            MarginalsConfig::Dirac { x0, xf } => {
                if x0.len() != d || xf.len() != d {
                    return Err(CliError::Config(format!("dirac points must have dimension {d}")));
                }
                (GridDensity::dirac(x0, DIRAC_WIDTH)?, GridDensity::dirac(xf, DIRAC_WIDTH)?)
            }
            MarginalsConfig::Files { rho0, rhof } => {
                let load = |p: &Path| {
                    GridDensity::load_csv(&self.resolve(p))
                        .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
                };
                let (r0, rf) = (load(rho0)?, load(rhof)?);
                if r0.dim() != d || rf.dim() != d {
                    return Err(CliError::Config(format!("marginal files must be {d}-dimensional")));
                }
                (r0, pad_target(ens, cache, &rf, c.grids.padding)?)
            }
        };
        Ok((rho0, rhof))
    }
}
