//! Token-level filtering and latent fusion of retrieved evidence.
//!
//! Retrieved chunks are encoded token by token, scored by a query-conditioned
//! sigmoid gate times a learned position mask, summed, normalised and added
//! to a frozen decoder's hidden state at the last token of the fusion
//! layer(s). The crate also carries everything needed to train and measure
//! that mechanism at desk scale: a tape-based autodiff, a BM25 retriever, a
//! toy decoder backbone, a synthetic planted-fact corpus and the robustness
//! and latency experiment harness.

pub mod backbone;
pub mod context_encoder;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gated_filter;
mod layers;
pub mod numerics;
pub mod par;
pub mod retriever;
pub mod training;

pub use error::{Error, Result};
