//! Part-aware optimization of 3D Gaussian scenes.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod extend;
pub mod guidance;
pub mod image;
pub mod optim;
pub mod pipeline;
pub mod planner;
pub mod ply;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod segmentation;
pub mod wire;
