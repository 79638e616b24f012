//! Pose-aware texture generation for person images: a parametric body, a
//! linear texture-to-image renderer, a U-Net texture generator trained
//! against a frozen re-identification network, and the data and
//! evaluation plumbing around them.

pub mod autodiff;
pub mod bodymodel;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod generator;
pub mod grid;
pub mod idnet;
mod io_util;
pub mod losses;
pub mod metrics;
mod nn;
pub mod optim;
pub mod rendering;
mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{ImageTensor, Mask, RgbGrid, Texture};
