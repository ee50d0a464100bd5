//! Rigidity regularization for parametric mesh generators.
//!
//! The crate is organized bottom-up:
//!
//! - [`mesh`]: triangle meshes, OBJ I/O, edge weights and the graph Laplacian.
//! - [`arap`]: ARAP energy with fitted rotations and the sparse ARAP Hessian.
//! - [`spectral`]: reduced Hessian `Jᵀ H J`, its spectrum, the L2 / robust
//!   regularizers and their gradients.
//! - [`genmodel`]: linear and tanh-MLP generators with hand-written VJPs.
//! - [`trainer`]: loss assembly, Adam, auto-decoder training, latent refinement.
//! - [`toolkit`]: synthetic data, evaluation, interpolation, extrapolation,
//!   gradient checks and Hessian diagnostics behind the `arapreg` CLI.

pub mod arap;
pub mod error;
pub mod genmodel;
pub mod linalg;
pub mod mesh;
pub mod sparse;
pub mod spectral;
pub mod toolkit;
pub mod trainer;

pub use error::{Error, Result};
pub use mesh::{Mesh, VertexField};
