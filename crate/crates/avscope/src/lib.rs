//! On-screen sound separation toolkit.
//!
//! Separates the audio a video's visible sources produce from everything
//! off-screen. Audio and video features meet in a factorized attention
//! encoder, a mask-based separator is trained on mixtures of mixtures
//! without source labels, and an on-screen classifier weights the separated
//! sources into the final on-screen estimate.
//!
//! Everything runs on the CPU in f64 with deterministic seeding. See the
//! `examples/` directory for runnable walkthroughs of each stage and the
//! `avscope` binary for the end-to-end pipeline.

pub mod attention;
pub mod axis;
pub mod calibration;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fdiff;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod params;
pub mod separation;
pub mod tape;
pub mod tensor;
pub mod wav;

pub use axis::AxisRole;
pub use error::{Error, Result};
pub use tensor::AxisTaggedTensor;
