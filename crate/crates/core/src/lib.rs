//! Inverse problem for N-player linear-quadratic output-feedback games.
//!
//! Given target output-feedback gains, find cost weights under which those
//! gains form a Nash equilibrium. Three pipelines share one set of kernels:
//! model-based ([`inverse_mb`]), trajectory-data driven ([`inverse_mf`]) and a
//! per-agent distributed protocol ([`distributed`]).

pub mod cli;
pub mod error;
pub mod inverse_mb;
pub mod distributed;
pub mod inverse_mf;
pub mod model;
pub mod numerics;
pub mod trajectory;
pub mod stabilize;

pub use error::{Error, Result};
