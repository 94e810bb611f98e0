//! Category-level shape, pose and texture fitting against a deformable
//! sphere template, built on a small reverse-mode autodiff core.

pub mod autodiff;
pub mod camera;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub(crate) mod math;
pub mod optim;
pub mod pipeline;
pub mod renderer;
pub mod shape;
pub mod surface_map;
pub mod texture;
pub mod error;

pub use autodiff::{grad_check, CustomOp, Gradients, OpKind, Tape, Tensor};
pub use error::{Error, Result};
