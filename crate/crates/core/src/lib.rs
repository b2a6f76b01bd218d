//! Patch-atlas surface fitting.
//!
//! A target point cloud is represented as the union of K learned parametric
//! patches. Patches are fitted with Chamfer distance, distortion, skew and
//! overlap regularizers, a surface-consistency term that compares normals
//! estimated within a patch against normals estimated across patches, and a
//! stitching term that pulls patch margins onto neighbouring patches.

pub mod diffcore;
pub mod error;
pub mod fit;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod patchmodel;
pub mod spatial;

pub use error::{Error, Result};
