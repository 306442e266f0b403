#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod flow_cbf;
pub mod poly_cbf;
pub mod roots;
pub mod safety_filter;
pub mod scenarios;
