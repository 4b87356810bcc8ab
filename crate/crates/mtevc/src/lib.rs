//! File formats, dataset plumbing and the command line around
//! [`mtevc_core`].

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod manifest;
pub mod models;
pub mod report;
pub mod synthesis;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
