//! Natural-language moment retrieval at desk scale.
//!
//! The crate encodes a query with a single-layer LSTM into word-level dynamic
//! filters, aligns clip features with the query, builds a multi-scale pyramid
//! of candidate moments, refines moment relations with an iterative graph
//! adjustment stack, and trains the whole pipeline end-to-end on an
//! in-crate reverse-mode autodiff tape. A deterministic synthetic data
//! generator and retrieval metrics close the loop.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod igan;
pub mod io;
pub mod lang;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tape::{Activation, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
