//! Hybrid signed distance fields that combine multi-resolution voxel feature
//! grids with a shallow MLP decoder, plus everything needed to use them:
//! tape-based automatic differentiation, shape-prior training over a corpus,
//! ray/surface intersection, differentiable surface rendering, few-view
//! reconstruction, iso-surface meshing, and synthetic scene generation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tape`] / [`optim`]: reverse-mode autodiff over batched `f64` tensors
//!   and an Adam optimizer with parameter-group freezing.
//! - [`grid`], [`encoding`], [`mlp`], [`field`]: the SDF representation
//!   (feature grids, sinusoidal encodings, decoder) and its value / spatial
//!   gradient evaluation paths.
//! - [`analytic`]: closed-form SDFs used as oracles and synthetic content.
//! - [`prior`], [`samples`]: corpus training of the shared decoder + grids.
//! - [`camera`], [`intersect`], [`render`]: ray generation, two root-finding
//!   intersectors, and the differentiable render/loss stack.
//! - [`recon`]: few-view reconstruction driver on top of a trained prior.
//! - [`mesh`], [`chamfer`], [`synth`]: marching cubes + OBJ I/O, point-set
//!   distance metrics, and synthetic scene bundles (images/masks/normals).
//! - [`checkpoint`], [`config`], [`logs`], [`cli`]: persistence, run
//!   configuration, structured logging, and the command-line drivers.

pub mod analytic;
pub mod camera;
pub mod chamfer;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoding;
pub mod field;
pub mod gradcheck;
pub mod grid;
pub mod intersect;
pub mod logs;
pub mod mesh;
pub mod mlp;
pub mod optim;
pub mod prior;
pub mod recon;
pub mod render;
pub mod rng;
pub mod samples;
pub mod synth;
pub mod tape;

use thiserror::Error;

/// Unified error type for fallible operations across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected before any work started.
    #[error("config: {0}")]
    Config(String),
    /// Filesystem or serialization failure.
    #[error("io: {0}")]
    Io(String),
    /// A numeric invariant was violated (non-finite loss, divergence, ...).
    #[error("numeric: {0}")]
    Numeric(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code for the CLI: config errors, I/O errors and numeric
    /// failures are distinguishable by scripts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// 3-vector used for positions, directions and normals.
pub type V3 = nalgebra::Vector3<f64>;
