//! Temporal-gated RBF (TGRBF) network with event-triggered online
//! optimisation, driving an adaptive nonlinear tracking controller.
//!
//! - [`net`]: the network, its analytic Jacobians and checkpoint format
//! - [`plant`]: the benchmark plant, disturbances and references
//! - [`offline`]: dataset generation and teacher-forced identification
//! - [`online`]: trigger rule, experience buffer and explicit-step updates
//! - [`control`]: adaptive nonlinear law, gain adaptation, PID baseline
//! - [`harness`]: closed-loop scenarios, metrics, comparison and CSV export
//! - [`gradcheck`]: finite-difference audit of the analytic Jacobians

pub mod control;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod net;
pub mod offline;
pub mod online;
pub mod plant;

pub use error::{Error, Result};
