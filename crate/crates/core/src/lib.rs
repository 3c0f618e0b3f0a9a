//! Nonlocal semilinear wave equations with time-dependent coefficients:
//! spectral Galerkin spaces, fundamental solutions, linear and nonlocal solvers.

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod expr;
pub mod forms;
pub mod nonlocal;
pub mod propagator;
pub mod quad;
pub mod scenarios;
pub mod spectral;
pub mod voc;

pub use error::{CertificationFailure, Error, Result};

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
