use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::io::Document;
use super::vocab::{tokenize, TokenId, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::par;

/// Fixed-length retrieval unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    /// Exactly `chunk_len` ids; the tail is [`PAD`] for short chunks.
    pub token_ids: Vec<TokenId>,
    pub is_noise: bool,
}

impl Chunk {
    /// Number of non-pad tokens.
    pub fn content_len(&self) -> usize {
        self.token_ids.iter().filter(|&&t| t != PAD).count()
    }

    pub fn content_ids(&self) -> &[TokenId] {
        &self.token_ids[..self.content_len()]
    }

    /// All-pad filler used when retrieval returns fewer than `k` hits.
    pub fn padding(ordinal: usize, chunk_len: usize) -> Chunk {
        Chunk {
            chunk_id: format!("<pad>#{ordinal}"),
            doc_id: "<pad>".into(),
            text: String::new(),
            token_ids: vec![PAD; chunk_len],
            is_noise: false,
        }
    }
}

/// Splits a document into consecutive non-overlapping windows of `chunk_len`
/// tokens, padding the last one.
pub fn chunk_document(
    doc_id: &str,
    text: &str,
    chunk_len: usize,
    vocab: &Vocabulary,
) -> Result<Vec<Chunk>> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk length must be at least 1".into()));
    }
    let words = tokenize(text);
    Ok(words
        .chunks(chunk_len)
        .enumerate()
        .map(|(i, window)| {
            let mut ids: Vec<TokenId> = window.iter().map(|w| vocab.id(w)).collect();
            ids.resize(chunk_len, PAD);
            Chunk {
                chunk_id: format!("{doc_id}#{i}"),
                doc_id: doc_id.to_string(),
                text: window.join(" "),
                token_ids: ids,
                is_noise: false,
            }
        })
        .collect())
}

/// All chunks of a document collection, addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub chunk_len: usize,
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Chunks every document (in parallel) and merges in `doc_id` order.
    pub fn from_documents(
        docs: &[Document],
        chunk_len: usize,
        vocab: &Vocabulary,
        is_noise: bool,
    ) -> Result<Self> {
        let mut order: Vec<&Document> = docs.iter().collect();
        order.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let pieces = par::map(&order, |d| chunk_document(&d.doc_id, &d.text, chunk_len, vocab));
        let mut chunks = Vec::new();
        for p in pieces {
            chunks.extend(p?);
        }
        for c in &mut chunks {
            c.is_noise = is_noise;
        }
        Self::from_chunks(chunks, chunk_len)
    }

    pub fn from_chunks(chunks: Vec<Chunk>, chunk_len: usize) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(chunks.len());
        for (i, c) in chunks.iter().enumerate() {
            if c.token_ids.len() != chunk_len {
                return Err(Error::Dimension(format!(
                    "chunk {} has {} tokens, expected {chunk_len}",
                    c.chunk_id,
                    c.token_ids.len()
                )));
            }
            if by_id.insert(c.chunk_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate chunk_id {}", c.chunk_id)));
            }
        }
        Ok(Corpus { chunk_len, chunks, by_id })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn ordinal(&self, chunk_id: &str) -> Option<usize> {
        self.by_id.get(chunk_id).copied()
    }
}
