//! Control laws: the pinned and path-integral feedforward controls, the
//! posterior over terminal states, and (for verification) Markov feedback.

pub mod feedforward;
pub mod markov;
pub mod noise;

pub use feedforward::{
    conditional_kernel, conditional_mean, posterior_weights, BridgeController, BridgePlan, Controller,
    FeedforwardState, OpenLoop, PosteriorWeights, ZeroControl,
};
pub use markov::{controllability_gramian, lyapunov_matrix, markov_feedback_control, MarkovPinnedFeedback};
pub use noise::{stream_rng, NoiseHistory};
