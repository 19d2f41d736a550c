//! Weakly-supervised temporal action localization with action-aware
//! segment modeling.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tape`]) on dense `f64` tensors. On top of it sit:
//!
//! * [`model`] — the MIL base model: temporal-conv embedding, CAS /
//!   attention / uncertainty heads, top-k aggregation and the three
//!   video-level losses.
//! * [`segment`] — the segment-centric modules: dynamic segment sampling
//!   via inverse transform sampling, masked intra-segment attention and
//!   pooled inter-segment attention.
//! * [`proposals`] — segment extraction, proposal generation, pseudo
//!   instance-level labels and the uncertainty-weighted instance loss.
//! * [`train`] — the multi-step proposal refinement driver.
//! * [`eval`] — temporal IoU, class-wise NMS, average precision and the
//!   mAP@IoU / duration-bucket evaluation stack.
//! * [`data`] — synthetic untrimmed-video generation and label encoding.
//!
//! The crate is `no_std` + `alloc`; all file IO, configuration loading and
//! the CLI live in the companion `asmloc` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod optim;
pub mod proposals;
pub mod segment;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
