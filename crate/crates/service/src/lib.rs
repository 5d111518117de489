//! HTTP completion service.
//!
//! [`Engine`] owns a loaded model and the per-user online state; [`router`]
//! exposes it as a JSON API:
//!
//! - `POST /users` creates a user, `201 {"user_id"}`
//! - `GET /complete?user_id=&prefix=&top_n=` returns `{"completions": [{text, logprob, rank}]}`
//! - `POST /select` with `{"user_id", "query"}` adapts the user, `204`
//! - `GET /nll?user_id=&query=` returns `{"nll"}`
//! - `GET /health`
//!
//! Errors are returned as `{"error", "detail"}`.

mod engine;
mod http;

pub use engine::{
    Engine, EngineConfig, RankedCompletion, Result, SelectOutcome, ServiceError, MAX_TOP_N,
};
pub use http::{router, serve, ApiError, AppState, CompleteResponse, CreatedUser, NllResponse};
