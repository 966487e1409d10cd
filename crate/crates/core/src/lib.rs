//! Alignment of asynchronous multi-modal BEV features.
//!
//! Sensors running at different rates deliver bird's-eye-view feature maps
//! captured at different times. This crate simulates such scenes, produces
//! ground-truth object flow from tracked boxes, estimates the flow the ego
//! motion compensation misses, and warps the late map onto the reference
//! grid before fusion.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flowest;
pub mod format;
pub mod geometry;
pub mod gtflow;
pub mod scenesim;
pub mod warp;

pub use error::{Error, Result};
