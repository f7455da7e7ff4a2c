//! Positive boundary control of transport flows on metric graphs.
//!
//! The crate simulates linear transport on the edges of a network with
//! vertex scattering and boundary control, and checks the positivity and
//! well-posedness properties of the resulting boundary control system.
//! Finite-dimensional positive systems serve as a reference model.

// `!(x > 0.0)` guards are written to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod graph;
pub mod lattice;
pub mod oracle;
pub mod scenario;
pub mod transport;
pub mod wellposedness;

pub use error::{Error, Result};
