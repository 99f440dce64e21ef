//! Trajectory-diffusion planning at desk scale.
//!
//! The pipeline: synthetic driving scenarios with ground-truth paths and
//! BEV occupancy grids stand in for a perception stack; a seeded mock
//! proposer (or recorded structured responses) supplies noisy path
//! proposals; Kolmogorov-Smirnov verification checks the proposal noise
//! is normal and fits the Gaussian noise model driving the forward
//! diffusion; a conditioned transformer denoiser, trained by exact
//! backpropagation, denoises proposals along a deterministic
//! exponential-schedule reverse process; and an open-loop harness scores
//! sampled paths by L2 error and collision rate.

pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub(crate) mod geom;
pub mod pipeline;
pub mod proposer;
pub mod rng;
pub mod scene;
pub mod stats;
pub mod svg;
