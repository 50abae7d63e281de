//! Kronecker-structured Gaussian process models on Cartesian-product inputs:
//! exact structured GP regression, a variational structured GP latent variable
//! model, forward/inverse surrogate pipelines for a stochastic elliptic PDE,
//! and the data generation (warped-GP sampler + FEM solver) that feeds them.

pub mod check;
pub mod data;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod opt;
pub mod pipeline;
pub mod predictive;
pub mod sgpr;

pub use error::{Error, Result};
