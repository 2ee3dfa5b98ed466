//! Documents, vocabulary, chunking, QA data, noise injection and the
//! synthetic planted-fact task.

pub mod chunk;
pub mod io;
pub mod noise;
pub mod prompt;
pub mod synth;
pub mod vocab;

pub use chunk::{chunk_document, Chunk, Corpus};
pub use io::{load_corpus, load_dataset, read_jsonl, write_jsonl, Document, QAExample, Split};
pub use noise::{inject_noise, noise_count};
pub use vocab::{normalize_text, tokenize, TokenId, Vocabulary, BOS, EOS, PAD, UNK};
