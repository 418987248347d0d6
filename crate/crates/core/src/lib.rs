//! Fluorescence molecular tomography with optimized illumination.
//!
//! A diffusion-model FEM forward solver on voxel tetrahedral meshes, sparse
//! reconstruction of the fluorescence distribution from normalized Born
//! ratios, and a reweighted-ℓ1 design of the next laser pattern, tied
//! together in an alternating loop.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod design;
pub mod error;
pub mod fem;
pub mod forward;
pub mod illum;
pub mod io;
pub mod jacobian;
pub mod linalg;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod recon;

pub use config::RunConfig;
pub use error::{FmtError, Result};
pub use illum::IlluminationPattern;
pub use mesh::{build_grid, MeshGrid};
pub use metrics::{evaluate, MetricsReport};
pub use pipeline::{Experiment, LoopOutcome, LoopSettings, PhantomSpec, RoundRecord};
