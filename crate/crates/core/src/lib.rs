//! Grassmann stochastic quantisation at desk scale.

pub mod algebra;
pub mod error;
pub mod fbsde;
pub mod flow;
pub mod fock;
pub mod gaussian;
pub mod lattice;
pub mod numerics;
pub mod scale;

pub use algebra::{Algebra, Element, ExactElement, Grassmann, Parity};
pub use error::{Error, Result};
