//! Completion generation: beam search over the language model with cached
//! per-user weights, and the most-popular-completion (MPC) baseline.

mod beam;
mod cache;
mod mpc;

pub use beam::{
    beam_search, beam_search_with, next_symbol_logprobs, prime_state, BeamConfig, Completion,
    Hypothesis,
};
pub use cache::{precompute_user_weights, WeightCache};
pub use mpc::{build_mpc_index, mpc_complete, MpcIndex, DEFAULT_MIN_COUNT};
