//! Few-shot restoration of weather-degraded images by matching degradation
//! patterns between a query image and a small labeled support set.
//!
//! The crate is `no_std` + `alloc`; file formats, datasets on disk and the
//! command-line tooling live in the `wxmatch` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod degrade;
pub mod diff;
pub mod episodes;
mod error;
pub mod imaging;
pub mod model;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use imaging::Image;
pub use real::Real;
