//! Detection of order-jump inclusions in a fractional-in-time diffusion model
//! by enclosure-type indicator functionals.

// `!(x > 0.0)` is used on purpose so that NaN is rejected; quadrature tables
// keep their published digits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod error;
pub mod experiment;
pub mod elliptic;
pub mod enclosure;
pub mod field;
pub mod geometry;
pub mod indicator;
pub mod quadrature;
pub mod scaled;
pub mod special;
pub mod timedomain;

pub use error::{Error, Result};
pub use field::ScalarField3D;
pub use scaled::ScaledValue;
