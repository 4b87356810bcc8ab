//! Core of the multi-target emotional voice conversion toolkit.
//!
//! Everything in this crate is a pure computation over in-memory buffers:
//! the DSP front end ([`dsp`]), a tape-based reverse-mode differentiation
//! engine ([`autodiff`]), the DBLSTM conversion model ([`conversion`]), the
//! two neural vocoders ([`wavenet`], [`flow`]) and the objective metrics
//! ([`eval`]). File formats, manifests and the command line live in the
//! `mtevc` companion crate.
//!
//! The crate builds without `std` (it only needs `alloc`). The default `std`
//! feature enables runtime CPU dispatch in the GEMM kernels and the platform
//! math library.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod checks;
pub mod conversion;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod flow;
pub mod real;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod wavenet;

pub use error::{Error, Result};
pub use real::Real;

/// Audio sample rate every model in this crate is built around.
pub const SAMPLE_RATE: u32 = 16_000;
