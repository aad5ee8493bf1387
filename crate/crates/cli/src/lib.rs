//! Command-line entry points and the HTTP session service for `dxgraph`.

pub mod inputs;
pub mod service;

pub use inputs::CliError;
pub use service::{router, ApiError, AnswerRequest, CreateRequest, Service, SessionHandle};
