//! Retrieval-augmented language modelling at desk scale.
//!
//! The crate provides the pieces of a retrieval-augmented LM pipeline:
//!
//! * [`corpus`]: word-bounded chunking and the chunk store file format.
//! * [`retriever`]: mean-pooled dual encoder, exact dot-product search and
//!   the top-k retrieval distribution.
//! * [`lm`]: a small causal transformer with hand-written gradients,
//!   tokenizer, scoring functions and greedy decoding.
//! * [`fusion`]: parallel in-context augmentation and mixture ensembling.
//! * [`lm_finetune`]: retrieval-augmented instruction tuning.
//! * [`retriever_finetune`]: LM-supervised retriever tuning with a KL loss.
//! * [`harness`]: evaluation templates, metrics, the synthetic knowledge
//!   base and experiment orchestration.

pub(crate) mod binio;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod lm;
pub mod lm_finetune;
pub mod retriever;
pub mod retriever_finetune;
pub mod text;

pub use error::{Error, Result};
