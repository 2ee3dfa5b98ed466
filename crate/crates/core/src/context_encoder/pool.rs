use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, Corpus, TokenId, PAD};
use crate::error::{Error, Result};
use crate::retriever::RetrievalResult;

/// Where one slot of a flattened token pool came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOrigin {
    pub slot: usize,
    /// 0-based retrieval rank of the source chunk.
    pub rank: usize,
    pub offset: usize,
    pub chunk_id: String,
    pub token: TokenId,
    pub is_pad: bool,
    pub is_noise: bool,
}

/// The `k` retrieved chunks of one query, in rank order. Flattening puts
/// token `offset` of the chunk at rank `i` in slot `i * s + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub s: usize,
    pub chunks: Vec<Chunk>,
}

impl Pool {
    pub fn new(chunks: Vec<Chunk>, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config("chunk length must be at least 1".into()));
        }
        if let Some(c) = chunks.iter().find(|c| c.token_ids.len() != s) {
            return Err(Error::Dimension(format!(
                "chunk {} has {} tokens, pool expects {s}",
                c.chunk_id,
                c.token_ids.len()
            )));
        }
        Ok(Pool { s, chunks })
    }

    /// Resolves a retrieval result against the corpus, filling any missing
    /// ranks up to `k` with all-pad chunks.
    pub fn from_result(result: &RetrievalResult, corpus: &Corpus, k: usize) -> Result<Self> {
        let s = corpus.chunk_len;
        let mut chunks = Vec::with_capacity(k);
        for h in result.hits.iter().take(k) {
            let c = corpus
                .get(&h.chunk_id)
                .ok_or_else(|| Error::Data(format!("retrieved unknown chunk {}", h.chunk_id)))?;
            chunks.push(c.clone());
        }
        while chunks.len() < k {
            chunks.push(Chunk::padding(chunks.len(), s));
        }
        Pool::new(chunks, s)
    }

    pub fn k(&self) -> usize {
        self.chunks.len()
    }

    /// Pool size `N = k * s`.
    pub fn n(&self) -> usize {
        self.chunks.len() * self.s
    }

    /// `(rank, offset)` of slot `j`.
    pub fn origin(&self, j: usize) -> (usize, usize) {
        (j / self.s, j % self.s)
    }

    /// Slot of token `offset` in the chunk at `rank`.
    pub fn slot(&self, rank: usize, offset: usize) -> usize {
        rank * self.s + offset
    }

    pub fn origins(&self) -> Vec<TokenOrigin> {
        (0..self.n())
            .map(|j| {
                let (rank, offset) = self.origin(j);
                let c = &self.chunks[rank];
                let token = c.token_ids[offset];
                TokenOrigin {
                    slot: j,
                    rank,
                    offset,
                    chunk_id: c.chunk_id.clone(),
                    token,
                    is_pad: token == PAD,
                    is_noise: c.is_noise,
                }
            })
            .collect()
    }

    pub fn token_rows(&self) -> Vec<&[TokenId]> {
        self.chunks.iter().map(|c| c.token_ids.as_slice()).collect()
    }

    /// Same chunks in a new rank order: `order[i]` is the old rank placed at
    /// new rank `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.k()];
        for &o in order {
            if o >= self.k() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Index(format!("{order:?} is not a permutation of 0..{}", self.k())));
            }
        }
        if order.len() != self.k() {
            return Err(Error::Index(format!("{order:?} is not a permutation of 0..{}", self.k())));
        }
        Ok(Pool { s: self.s, chunks: order.iter().map(|&i| self.chunks[i].clone()).collect() })
    }
}
