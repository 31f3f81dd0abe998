//! Sparse hierarchical non-stationary Gaussian process regression.
//!
//! The latent field is a Gauss-Markov random field whose precision comes from
//! a finite-difference discretisation of a Matérn-type operator with a
//! spatially varying length-scale. The log length-scale carries its own
//! Gaussian hyperprior (sparse AR(1) or dense squared-exponential), and three
//! adaptive MCMC schemes sample the joint posterior in one dimension. Two-
//! dimensional problems use an additive model with a Kronecker-structured
//! interaction term and a blocked marginal sampler.
//!
//! Modules:
//! * [`banded`] — band-stored matrices and O(n) factorisations;
//! * [`spde`] — the discretised field operator, covariance oracles and the
//!   marginal likelihood of the data;
//! * [`hyperprior`] — AR(1) and squared-exponential hyperpriors with
//!   whitening maps;
//! * [`sampler`] — adaptive Metropolis-within-Gibbs, whitened elliptical
//!   slice sampling and the marginal elliptical slice sampler;
//! * [`additive`] — the two-dimensional additive model and its blocked
//!   marginal sampler;
//! * [`experiments`] — synthetic data generators, grids and observation
//!   operators;
//! * [`diagnostics`] — effective sample size, efficiency scores, error and
//!   coverage metrics, fit reports.

pub mod additive;
pub mod banded;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod hyperprior;
pub mod sampler;
pub mod spde;

pub use error::{Error, Result};
