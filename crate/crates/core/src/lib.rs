//! Linear face model with static and dynamic displacement detail.
//!
//! Coarse geometry comes from identity and expression bases posed by linear
//! blend skinning. Fine geometry is a UV displacement map made of a static,
//! person-specific part and a dynamic part blended by per-vertex tension.

pub mod basis;
pub mod bundle;
pub mod detail;
pub mod error;
pub mod fit;
pub mod linear;
pub mod losses;
pub mod mesh;
pub mod morphable;
pub mod nn;
pub mod raster;
pub mod render;
pub mod rotation;

pub use error::{Error, Result};
