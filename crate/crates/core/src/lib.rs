//! Class-incremental learning with distillation, classification and
//! Bayesian mutual-distillation losses.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// triangular solves read better with explicit indices
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod ids;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod replay;

pub use error::{Error, Result};
pub use ids::{ClassId, DomainId};
