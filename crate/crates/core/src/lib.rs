//! Radiometric decomposition of multi-view HDR captures.
//!
//! Decomposes a set of HDR images of a scene with rough initial geometry into
//! spatially-varying reflectance, a non-parametric environment illumination
//! map, a material segmentation, a diffuse texture, and refined geometry by
//! MAP estimation over a differentiable Monte Carlo path-tracing likelihood.

pub mod brdf;
pub mod error;
pub mod harness;
pub mod illumination;
pub mod io;
pub mod mesh;
pub mod optimizer;
pub mod posterior;
pub mod renderer;
pub mod scene;
pub mod segmentation;
pub mod texture;

pub use error::{Error, Result};

/// 3-vector of f64, used for positions, directions, and normals.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Linear RGB triple.
pub type Rgb = [f64; 3];

pub(crate) fn rgb_add(a: Rgb, b: Rgb) -> Rgb {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn rgb_scale(a: Rgb, s: f64) -> Rgb {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn rgb_mul(a: Rgb, b: Rgb) -> Rgb {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}
