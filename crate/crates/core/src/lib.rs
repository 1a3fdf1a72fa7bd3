// Negated float comparisons are the NaN-rejecting input guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod law;
pub mod rng;
pub mod semigroup;
pub mod simulate;
pub mod spectral;
pub mod stats;
pub mod tilt;
