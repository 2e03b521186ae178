// Validation deliberately uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod compiler;
pub mod container;
pub mod graph;
pub mod models;
pub mod quant;
pub mod refexec;
pub mod sim;
pub mod tensor;
