//! Building blocks for small-scale language-model experiments: a reverse-mode
//! autodiff tape over `f64` tensors, a BPE tokenizer, count-based n-gram
//! models, a mini encoder-only transformer, multi-teacher knowledge
//! distillation, gloss-classification word sense disambiguation and a
//! machine-paraphrase detection harness.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod mlm;
pub mod ngram;
pub mod optim;
pub mod paraphrase;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;
pub mod wsd;

pub use autodiff::{Tape, Target, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
