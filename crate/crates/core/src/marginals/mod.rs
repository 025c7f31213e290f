//! Grid densities, the passive end-state kernel, and the Schrödinger
//! potentials that tilt it into the optimal coupling.

pub mod grid;
pub mod kernel;
pub mod sinkhorn;

pub use grid::{build_cosine_marginals, Axis, GridDensity, DIRAC_WIDTH};
pub use kernel::{build_end_kernel, padded_target_axes, EndKernel};
pub use sinkhorn::{joint_coupling, sinkhorn, SchrodingerPotentials, DEFAULT_MAX_ITER, DEFAULT_TOL};
