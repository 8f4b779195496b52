//! Numerical decoupling fields for coupled forward-backward SDEs.
//!
//! The field `u(t, x)` is built backward from the terminal condition on a
//! spatial grid, one contraction-sized step at a time, and is then used to
//! simulate the forward system pathwise.

// `!(x > 0.0)` rejects NaN; indexed loops mirror the component formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod contraction;
pub mod expr;
pub mod field;
pub mod global;
pub mod localstep;
pub mod par;
pub mod problem;
pub mod simulate;
