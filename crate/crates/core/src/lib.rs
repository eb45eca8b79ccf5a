//! Complex-envelope synthesis and scoring for direct-modulation transmitters
//! and superconducting-qubit drive chains.
//!
//! Waveforms are built once as sampled complex envelopes, pushed through a
//! [`architectures::TxChain`] of impairment stages, and scored either as a
//! communication link ([`metrics`]) or as a qubit gate ([`qubit`]).

// `!(x > 0.0)` is the house idiom for rejecting NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod architectures;
pub mod calibration;
pub mod error;
pub mod export;
pub mod impairments;
pub mod metrics;
pub mod modulation;
pub mod par;
pub mod qubit;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
pub use num_complex::Complex64;
