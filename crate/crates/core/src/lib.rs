// `!(x > 0.0)` is deliberate throughout: NaN has to fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dense;
pub mod linop;
pub mod loss;
pub mod problem;
pub mod solver;
pub mod table;
pub mod uq;
