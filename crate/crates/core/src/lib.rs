// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod control;
pub mod demo;
pub mod dynamics;
pub mod error;
pub mod funnel;
pub mod learn;
pub mod lp;
pub mod problem;
pub mod reference;
pub mod region;
pub mod sampling;
pub mod scenario;
pub mod sim;
pub mod verify;
