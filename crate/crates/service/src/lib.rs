//! HTTP service that lets a person play one student of a simulated cohort:
//! submit a report, answer comparison queries, inspect the model's favourite
//! schedules and run a mechanism with the live answers in place.
//!
//! Every session is an append-only JSON-lines log under the data directory;
//! the service replays all logs on start.

pub mod api;
pub mod error;
pub mod session;
pub mod store;

pub use api::{router, serve, AppState, ServiceConfig};
pub use error::ServiceError;
