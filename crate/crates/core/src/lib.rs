//! Reference-guided colorization of line-art frame sequences.
//!
//! A previously colored frame is warped onto the next sketch by
//! correlation-matching feature transfer ([`cmft`]) at several decoder
//! resolutions of an encoder/decoder [`generator`]. The crate also carries
//! the training objective ([`losses`]), dataset construction from frame
//! directories ([`datasmith`]), the optimization loop ([`trainer`]), and the
//! stride-based evaluation harness ([`evaluator`]).

pub mod checkpoint;
pub mod cmft;
pub mod datasmith;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod golden;
pub mod losses;
pub mod nn;
pub mod providers;
pub mod raster;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use raster::{ColorImage, SketchImage};
