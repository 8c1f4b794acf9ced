//! Exact enumeration and TAP diagnostics for the Sherrington–Kirkpatrick model
//! at high temperature.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod quadrature;
pub mod spectral;
pub mod tap;

pub use error::{Error, Result};
pub use gibbs::{GibbsTables, ReducedSpec, Request};
pub use model::{CouplingMatrix, CouplingPath, ModelParams};
pub use quadrature::QuadratureRule;
