//! Non-autonomous attracting basins in two complex variables: jets, trains,
//! normal-form conjugations and the limit map onto the plane.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]
#![allow(clippy::type_complexity, clippy::should_implement_trait, clippy::suspicious_arithmetic_impl)]

pub mod autonomous;
pub mod basin;
pub mod conj_diagonal;
pub mod direct;
pub mod error;
pub mod jet;
pub mod ledger;
pub mod limit;
pub mod linalg;
pub mod logmag;
pub mod pipeline;
pub mod quad_general;
pub mod report;
pub mod sequence;
pub mod train_diagonal;
pub mod train_general;

pub use error::{Error, Result};
pub use jet::PolyMap2;
pub use linalg::{Mat2, Vec2, C64};
pub use logmag::LogMag;
