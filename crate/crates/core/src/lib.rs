//! Channel max pooling (CMP) and the small CNN stack around it.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f64` NCHW tensors, the seeded [`Rng`], CMPT blobs.
//! - [`cmp`]: the channel max pooling layer.
//! - [`ops`]: convolution, pooling, dense, batch norm, ELU, dropout, loss.
//! - [`model`]: sequential specs, build, forward/backward, parameter
//!   accounting and model files.
//! - [`data`]: the synthetic vehicle dataset.
//! - [`gradcheck`]: finite-difference suites for every operator.
//! - [`train`]: SGD, cosine schedule, augmentation and the epoch loop.

pub mod cmp;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use cmp::{cmp_backward, cmp_forward, make_cmp_config, suggest_stride, CmpCache, CmpConfig};
pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
