//! Implicit keypoint transporter: a small reverse-mode autodiff engine, the
//! keypoint/transport/occupancy model built on it, its losses and training
//! loop, synthetic articulated scenes, and a keypoint-flow manipulation
//! policy. `no_std` with `alloc`.

#![no_std]

extern crate alloc;

pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod losses;
pub mod manip;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
