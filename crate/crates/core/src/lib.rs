//! Copy detection for 3D point clouds.
//!
//! A suspect cloud is rigidly registered onto a reference with coherent point
//! drift. The posterior correspondence matrix of the converged mixture is then
//! summarized by three distances (LR, KURT, CORR) that separate copies from
//! unrelated models. Around that core sit downsampling and segmentation for
//! large inputs, attack generation for benchmarks, threshold calibration and
//! Top-K retrieval evaluation.

pub mod acceleration;
pub mod attacks;
pub mod bench;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod measures;
pub mod pipeline;
pub mod registration;
pub mod registry;
pub mod rpca;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, Face, Point, PointCloud};
