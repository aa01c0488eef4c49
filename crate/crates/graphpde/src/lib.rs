//! Symbolic PDEs as computational graphs, encoded by a graph transformer and
//! decoded into mesh-free solution fields.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`dsl`] — parse a textual PDE definition into a validated symbolic AST.
//! 2. [`dag`] — compile the AST into a heterogeneous computational DAG and
//!    derive the structural features (degrees, shortest paths, connectivity)
//!    the encoder consumes.
//! 3. [`encoders`] — turn scalar and scattered-point function payloads into
//!    per-node input feature vectors.
//! 4. [`graphormer`] — fuse graph structure and numeric features into one
//!    latent code per unknown field variable.
//! 5. [`inr`] — decode a latent code into a mesh-free solution `u(t, x)`.
//! 6. [`data`] — sample PDE instances from the training distributions, solve
//!    them with in-repo reference solvers, and persist datasets.
//! 7. [`train`] — the nRMSE training loop, checkpoints, and scaling studies.
//! 8. [`inverse`] — coefficient and field recovery on top of any forward model.
//!
//! All differentiable pieces run on the small tape-based reverse-mode engine
//! in [`ad`], generic over `f32` (training) and `f64` (gradient checks).
//!
//! See the book under `book/` for a guided tour; its code snippets are
//! compiled and run as doc-tests via the hidden `guide` module.

pub mod ad;
pub mod dag;
pub mod data;
pub mod dsl;
pub mod encoders;
pub mod error;
pub mod graphormer;
pub mod inr;
pub mod inverse;
pub mod model;
pub mod nn;
pub mod train;

mod guide;

pub use error::{Error, Result};
