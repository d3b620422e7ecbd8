//! A desk-scale laboratory for course allocation with machine-learning-powered
//! preference elicitation.
//!
//! The crate is organized bottom-up:
//!
//! - [`catalog`]: courses, schedules (bit sets) and permissibility.
//! - [`prefgen`]: synthetic true utilities on a latent course grid.
//! - [`reporting`]: the base-value/adjustment reporting language and its
//!   mistake model.
//! - [`valuemodel`]: monotone value networks trained on cardinal and ordinal data.
//! - [`elicitation`]: comparison-query generation (online binary insertion sort
//!   and two baselines).
//! - [`market`]: budgets, clearing error and the three Course Match stages.
//! - [`mechanism`]: end-to-end mechanisms (CM, CM*, MLCM, MLCM-Projected, RSD).
//! - [`harness`]: batch experiments, fairness audits and CSV output.

pub mod catalog;
pub mod elicitation;
pub mod error;
pub mod harness;
pub mod market;
pub mod mechanism;
pub mod prefgen;
pub mod reporting;
pub mod seed;
pub mod valuemodel;

pub use catalog::{Catalog, Course, Permissibility, Schedule, ScheduleSpace};
pub use error::{LabError, Result};
