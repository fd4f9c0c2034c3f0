//! Document-warp geometry and rectification evaluation.
//!
//! Warp fields and their inversion, local warp angles, grid-mesh curvature,
//! a procedural folded-document generator, training losses with analytic
//! gradients, and an OCR-polygon evaluation protocol.

pub mod angle;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mesh;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod warpfield;

pub use error::{Error, Result, Shape};
pub use raster::{BinaryMask, FloatMap2D, Image};
pub use warpfield::{AngleMap, BackwardMap, ForwardMap, WarpField};

/// Toolkit version recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
