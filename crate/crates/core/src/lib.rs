//! Euphemism detection as text classification: a KimCNN head over
//! single- or multichannel word vectors, where each word vector may be the
//! concatenation of every hidden state of a transformer encoder.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tensor`]), AdamW with linear and cosine-with-restarts schedules and
//! zero-patience early stopping ([`optim`]), frozen-feature probes and
//! positive-class F1 evaluation ([`train_eval`]), and a JSON-driven CLI
//! ([`cli`]).
//!
//! Data-parallel kernels use rayon when the default `parallel` feature is
//! on; every kernel also has a sequential path with bitwise-identical
//! results (see [`par`]).

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod kimcnn;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train_eval;

mod binio;

mod init;

pub use error::{Error, Result};
