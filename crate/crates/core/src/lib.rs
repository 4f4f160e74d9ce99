//! Explicit Putinar-type positivity certificates for polynomials on
//! cylinders `S x R^r`, generated by perturbation, Pólya saturation and
//! sums of squares, and checked by exact rational expansion.

pub mod base;
pub mod bound;
pub mod certificate;
pub mod certified;
pub mod cli;
pub mod linalg;
pub mod perturbation;
pub mod pipeline;
pub mod poly;
pub mod polya;
pub mod problem;
pub mod sos;
