//! Voxel radiance field reconstruction from posed images.
//!
//! The volume stores a density and a Lambertian color per cell and is fitted
//! directly by minimizing photometric residuals. Two additions separate
//! view-dependent radiance from the Lambertian volume:
//!
//! * a per-camera difference plane that blends the rendered color toward the
//!   reference pixel ([`diffplane`]);
//! * a transient 8×4 environment map per voxel whose fit error weights a
//!   Cauchy density penalty ([`envprior`]).
//!
//! [`pipeline::run`] drives the coarse-to-fine reconstruction; [`export`]
//! writes decomposition renders, marching-cubes meshes and metrics.

pub mod diffplane;
pub mod envprior;
pub mod error;
pub mod export;
pub mod geometry;
pub mod optimizer;
pub mod pipeline;
pub mod raster;
pub mod renderer;
pub mod scene_io;
pub mod snapshot;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Aabb, Ray, Vec3};
