//! Core library: a CPU implementation of a hierarchical (U-Net-shaped)
//! flow-matching transformer trained with representation alignment against a
//! frozen vision encoder.
//!
//! Layering, bottom to top:
//! - [`numerics`]: scalar abstraction, seeded RNG, finite-difference oracle
//! - [`autodiff`]: tape-based reverse-mode differentiation over `ndarray`
//! - [`geometry`]: token grids, patch/pixel rearrangements, rotary tables
//! - [`blocks`]: transformer blocks, skip merges, stage resamplers
//! - [`model`]: the full velocity network with a mid-network feature tap
//! - [`alignment`]: projector and alignment losses on tapped features
//! - [`flow`]: interpolant construction, velocity loss, ODE sampling
//! - [`teacher`]: frozen feature provider (stub encoder or feature files)
//! - [`data`]: deterministic synthetic dataset
//! - [`trainer`]: optimizer, EMA, checkpointing, metrics
//! - [`verify`]: registry of gradient-check cases over the whole op set

pub mod alignment;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod params;
pub mod reference;
pub mod teacher;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
