//! BM25 retrieval over fixed-length chunks and recall measurement.

mod index;
mod recall;

pub use index::{Hit, InvertedIndex, RetrievalResult, DEFAULT_B, DEFAULT_K1};
pub use recall::{recall_at_k, recall_vs_k_sweep, RecallRow};
