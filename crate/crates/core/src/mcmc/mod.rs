//! Metropolis-within-Gibbs inference for the HEVP, SB and MM models.

mod config;
mod likelihood;
mod sampler;
mod samples;
mod state;

pub use config::{BlockMask, ChainConfig, InitValues, InitialSteps};
pub use likelihood::{conditional_params, loglik, loglik_reference, Caches, LikParams};
pub use sampler::{initial_state, run_chain, Checkpoint, Counters, Sampler, StepSizes};
pub use samples::{posterior_prob_delta, Draw, PosteriorSamples};
pub use state::{stick_weights, FitData, ModelState};
