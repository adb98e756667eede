// `!(x > 0.0)` guards deliberately reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
