//! Error type shared by all solver modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// An exponent z_i * phi left the representable range during a nonlinear solve.
    #[error("overflow: |z*phi| = {exponent:.3e} exceeds {limit} during {what}")]
    Overflow {
        what: &'static str,
        exponent: f64,
        limit: f64,
    },

    /// Selective boundary data violate the uniform-selectivity constraint:
    /// log(gamma_i) + z_i W must be constant on each selective portion.
    #[error("not uniform: species {species} has log(gamma) + z W varying by {spread:.3e} on its selective boundary (tolerance {tol:.1e})")]
    NotUniform {
        species: usize,
        spread: f64,
        tol: f64,
    },

    /// Requested time step exceeds the stability bound.
    #[error("CFL violation: dt = {dt:.6e} exceeds stable bound {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },

    /// A concentration went negative after a transport step (the step is rejected).
    #[error("negative concentration: species {species}, cell {cell}, value {value:.6e}")]
    NegativeConcentration {
        species: usize,
        cell: usize,
        value: f64,
    },

    /// Equal-mass Csiszar-Kullback bound was requested for fields with different masses.
    #[error("mass mismatch: |{mass_a:.12e} - {mass_b:.12e}| exceeds relative tolerance {tol:.1e}; use the generalized bound")]
    MassMismatch { mass_a: f64, mass_b: f64, tol: f64 },

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
