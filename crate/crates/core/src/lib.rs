//! Tensor B-spline Ritz-Galerkin solver for second-order elliptic PDEs on
//! uniform grids.
//!
//! The pipeline: input fields are prefiltered into B-spline coefficients
//! ([`bspline`]), exact translation-invariant kernels are integrated once
//! ([`kernels`]), the system operator is realized as a sparse matrix, a
//! precomputed block tensor, or on the fly ([`operator`]), and the system is
//! solved by preconditioned conjugate gradients ([`solver`]). [`pde`] wires it
//! together; [`verify`] and [`bench`](mod@bench) hold the measurement harnesses and
//! [`io`] the file formats.

pub mod bench;
pub mod bspline;
pub mod domain;
pub mod error;
pub mod io;
pub mod kernels;
pub mod operator;
pub mod pde;
pub mod real;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use error::{Result, TbsError};
pub use real::{Precision, Real};
pub use tensor::CoeffTensor;
