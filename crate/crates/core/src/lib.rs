//! Fixed-point CNN accelerator model.
//!
//! * [`fxp`]: Q`I`.`F` words, quantization and exact accumulation.
//! * [`model`]: layer descriptions, auto-scaling and weight preprocessing.
//! * [`accel`]: the streaming accelerator as a process network.
//! * [`oracle`]: direct reference implementations.
//! * [`scheduler`]: splitting layers into passes and stitching results.
//! * [`qtrain`]: quantization-aware SGD on a toy problem.
//! * [`dse`]: design-space exploration over accelerator parameters.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod accel;
pub mod dse;
pub mod fxp;
pub mod model;
pub mod oracle;
pub mod qtrain;
pub mod scheduler;
pub mod synth;
pub mod tensor;

pub use fxp::{FixedPointFormat, FixedWord, Rounding};
