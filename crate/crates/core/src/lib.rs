//! Diagonal multi-input multi-output state-space sequence layers.
//!
//! The crate is organised bottom-up:
//! - [`hippo`]: HiPPO-LegS normal matrix and parameter initialization.
//! - [`ssm`]: continuous/discrete systems, ZOH and GBT discretization,
//!   recurrent scans and diagonalization.
//! - [`conv`]: system kernels and FFT convolution for state inference.
//! - [`layer`]: the stabilized, block-diagonal multi-head layer.
//! - [`train`]: loss, analytic gradients and a system-identification loop.

pub mod conv;
pub mod error;
pub mod fft;
pub mod hippo;
pub mod layer;
pub mod linalg;
pub mod ssm;
pub mod train;

pub use error::{EssmError, Result};
