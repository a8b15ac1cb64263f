//! Structure-preserving solver for ionic electrodiffusion (Nernst-Planck)
//! coupled to an incompressible flow, on axis-aligned box grids.
//!
//! The crate computes Boltzmann equilibria through a Poisson-Boltzmann
//! solve, evolves perturbed states with positivity- and mass-preserving
//! Scharfetter-Gummel fluxes and a Chorin projection flow step, and
//! certifies the dissipative structure numerically: monotone decay of
//! kinetic energy plus relative entropy, the per-step dissipation budget,
//! Csiszar-Kullback bounds, and explicit smallness thresholds for the
//! near-equilibrium regime.
//!
//! Start with the runnable examples (`cargo run -p npns --example ...`);
//! each one exercises one capability end to end. The thin `npns` binary
//! drives batch runs (`run`, `steady`, `verify`, `convergence`).

pub mod cli;
pub mod elliptic;
pub mod energetics;
pub mod error;
pub mod flow;
pub mod grid;
pub mod scenario;
pub mod snapshot;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{BoundaryField, FaceField, FaceTag, Grid, ScalarField, Side, VectorField};
