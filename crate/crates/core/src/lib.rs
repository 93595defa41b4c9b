// `!(x > 0.0)` style checks reject NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bundle;
pub mod cli;
pub mod config;
pub mod cutplane;
pub mod data;
pub mod diffmodel;
pub mod error;
pub mod evalbench;
pub mod group;
pub mod linalg;
pub mod losses;
pub mod perturb;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod sla;
