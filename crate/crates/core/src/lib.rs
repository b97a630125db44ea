//! Capsule network with dynamic routing on 1x1 convolutions.
//!
//! Routing iterations of the routed 1x1 layer only need the Gram matrix of
//! the input feature maps, so the per-iteration cost does not depend on the
//! spatial size. See [`routing`] for the routing algorithms, [`model`] for
//! the network, and [`training`] / [`evaluation`] for the experiment loop.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod bench;
pub mod capsule;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod matrix;
pub mod model;
pub mod routing;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
