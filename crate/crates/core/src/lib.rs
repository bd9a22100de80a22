//! Manifold-valued convolution networks for images and sequences whose
//! samples live on Riemannian manifolds (SPD matrices, spheres).
//!
//! The crate is organized bottom-up:
//!
//! * [`kernels`] — symmetric eigendecomposition, matrix exp/log/sqrt, and
//!   their directional derivatives (one backend for forward and backward).
//! * [`manifold`] — Exp/Log maps, geodesic distance, Fréchet means, and
//!   isometry actions for SPD(n) and the unit sphere.
//! * [`autodiff`] — a reverse-mode tape over matrix entries and weights,
//!   with Adam.
//! * [`layers`] — manifold-valued convolution, tangent ReLU, the distance
//!   transform, covariance descriptors, and the network builder.
//! * [`synth`] — deterministic synthetic dataset generators and the
//!   dataset file format.
//! * [`train`] — k-fold training/evaluation loops with reproducible
//!   metrics streams.
//! * [`verify`] — executable property suites (equivariance, collapse,
//!   gradient checks) shared by tests and the CLI.
//! * [`presets`] — named dataset/network/training configurations.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod manifold;
pub mod presets;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
