//! Learning aligned UV spaces for collections of textured shapes.
//!
//! A shared UV mapper sends surface points of every shape into one 2D
//! domain where a small set of learned basis images, mixed by per-shape
//! coefficients, reconstructs color, normal and position. Once trained, the
//! aligned textures can be baked, inpainted, swapped between shapes and
//! exported.

pub mod baker;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod networks;
pub mod raster;
pub mod synthdata;
pub mod trainer;

pub use error::{AuvError, Result};
