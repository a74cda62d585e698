//! Numerical gluing of constant Q-curvature metrics along Delaunay necks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod angular;
pub mod cli;
pub mod corrector;
pub mod delaunay;
pub mod error;
pub mod fd;
pub mod gauges;
pub mod gluing;
pub mod jacobi;
pub mod ode;

pub use error::{Error, Result};
