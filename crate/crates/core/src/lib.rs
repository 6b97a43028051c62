//! Differentiable 3D Gaussian splatting and an online pipeline for
//! reconstructing dynamic scenes frame by frame from multi-view video.

// negated comparisons reject NaN; index loops mirror the math
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod cli;
pub mod config;
pub mod error;
pub mod gaussian;
pub mod imagebuf;
pub mod loss;
pub mod math;
pub mod motion;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod storage;
pub mod train;

pub use camera::Camera;
pub use error::{Error, FormatError, Result};
pub use gaussian::{compute_bounds, Gaussian, GaussianCloud, SceneBounds};
pub use imagebuf::ImageBuffer;
