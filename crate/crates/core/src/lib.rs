//! Self-attention represented through an asymmetric kernel SVD.
//!
//! The crate is `no_std` with `alloc`. It contains the dense linear algebra
//! substrate, the query/key feature maps, the primal attention forward pass
//! (and the canonical softmax baseline), the KSVD regularization objective,
//! a dual-side SVD oracle that certifies stationarity, and a small
//! tape-based training harness for toy sequence tasks.
//!
//! IO, file formats and the command line live in the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod dual;
mod error;
pub mod features;
pub mod linalg;
pub(crate) mod math;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod spectrum;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
