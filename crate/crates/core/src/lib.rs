//! Schrödinger bridges for ensembles of linear stochastic systems.
//!
//! An ensemble dX(t,θ) = A(θ)X dt + B(θ)(u dt + √ε dW), θ ∈ [0, 1], is driven
//! by one shared control and one shared noise. This crate computes the
//! stochastic feedforward control that steers the θ-averaged state from an
//! initial density to a target density and checks the transport by
//! simulation.

pub mod controllers;
pub mod ensemble;
pub mod error;
pub mod marginals;
pub mod oracles;
pub mod pipeline;
pub mod simulator;
pub mod verify;

pub use ensemble::linalg::{gaussian_logpdf, mat_exp};
pub use ensemble::{averaged_input_map, averaged_state_map, gramian, EnsembleSystem, PropagatorCache, TimeGrid};
pub use error::{Error, Result};
