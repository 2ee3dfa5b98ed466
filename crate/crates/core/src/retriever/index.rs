use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Chunk};
use crate::error::{Error, Result};
use crate::numerics::serial::{read_file, write_file, ByteReader, ByteWriter};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

const MAGIC: &[u8; 8] = b"RFBM25IX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
    /// Filler appended because fewer than `k` chunks matched.
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn chunk_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.chunk_id.as_str())
    }
}

/// Okapi BM25 inverted index.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub k1: f64,
    pub b: f64,
    chunk_ids: Vec<String>,
    lengths: Vec<u32>,
    avg_len: f64,
    /// term → (chunk ordinal, term frequency), sorted by ordinal.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn build<'a, I>(chunks: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Chunk>,
    {
        Self::with_params(chunks, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params<'a, I>(chunks: I, k1: f64, b: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Chunk>,
    {
        let mut seen = HashSet::new();
        let mut chunk_ids = Vec::new();
        let mut lengths = Vec::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (ord, c) in chunks.into_iter().enumerate() {
            if !seen.insert(c.chunk_id.clone()) {
                return Err(Error::Data(format!("duplicate chunk_id {}", c.chunk_id)));
            }
            let toks = tokenize(&c.text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((ord as u32, n));
            }
            chunk_ids.push(c.chunk_id.clone());
            lengths.push(toks.len() as u32);
        }
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64
        };
        Ok(InvertedIndex { k1, b, chunk_ids, lengths, avg_len, postings })
    }

    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term: &str) -> Option<&[(u32, u32)]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.chunk_ids.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of every chunk for the distinct terms of `query`.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.chunk_ids.len()];
        let terms: BTreeMap<String, ()> = tokenize(query).into_iter().map(|t| (t, ())).collect();
        for term in terms.keys() {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for &(ord, tf) in list {
                let tf = tf as f64;
                let len = self.lengths[ord as usize] as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_len);
                scores[ord as usize] += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Top-`k` chunks by score, ties broken by ascending chunk id. If some
    /// but fewer than `k` chunks match, the list is topped up with the
    /// smallest remaining chunk ids (flagged `padded`).
    pub fn search(&self, query_id: &str, query: &str, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let scores = self.scores(query);
        let mut matched: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
        let mut hits = Vec::new();
        if !matched.is_empty() {
            matched.sort_by(|&a, &b| {
                scores[b].total_cmp(&scores[a]).then_with(|| self.chunk_ids[a].cmp(&self.chunk_ids[b]))
            });
            hits.extend(matched.iter().take(k).map(|&i| Hit {
                chunk_id: self.chunk_ids[i].clone(),
                score: scores[i],
                padded: false,
            }));
            if hits.len() < k {
                let taken: HashSet<usize> = matched.iter().copied().collect();
                let mut rest: Vec<&String> = (0..self.chunk_ids.len())
                    .filter(|i| !taken.contains(i))
                    .map(|i| &self.chunk_ids[i])
                    .collect();
                rest.sort();
                let need = k - hits.len();
                hits.extend(rest.into_iter().take(need).map(|id| Hit {
                    chunk_id: id.clone(),
                    score: 0.0,
                    padded: true,
                }));
            }
        }
        Ok(RetrievalResult { query_id: query_id.to_string(), hits, k })
    }

    // ── persistence ──────────────────────────────────────────────────

    /// Layout (little endian): magic, version, chunk count, term count, k1,
    /// b, average length; chunk table (id length, id bytes, token length);
    /// term dictionary (term length, term bytes, posting count, posting
    /// offset); posting lists as (ordinal, tf) pairs of u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.chunk_ids.len() as u64);
        w.u64(self.postings.len() as u64);
        w.f64(self.k1);
        w.f64(self.b);
        w.f64(self.avg_len);
        for (id, &len) in self.chunk_ids.iter().zip(&self.lengths) {
            w.str(id);
            w.u32(len);
        }
        let mut offset = 0u64;
        for (term, list) in &self.postings {
            w.str(term);
            w.u64(list.len() as u64);
            w.u64(offset);
            offset += list.len() as u64;
        }
        for list in self.postings.values() {
            for &(ord, tf) in list {
                w.u32(ord);
                w.u32(tf);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "index file");
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a BM25 index file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!("index version {version}, expected {VERSION}")));
        }
        let n = r.u64()? as usize;
        let n_terms = r.u64()? as usize;
        let (k1, b, avg_len) = (r.f64()?, r.f64()?, r.f64()?);
        let mut chunk_ids = Vec::new();
        let mut lengths = Vec::new();
        for _ in 0..n {
            chunk_ids.push(r.str()?);
            lengths.push(r.u32()?);
        }
        let mut dict = Vec::new();
        for _ in 0..n_terms {
            let term = r.str()?;
            let count = r.u64()? as usize;
            let offset = r.u64()? as usize;
            dict.push((term, count, offset));
        }
        let base = r.pos;
        let mut postings = BTreeMap::new();
        for (term, count, offset) in dict {
            r.pos = base + offset * 8;
            let mut list = Vec::with_capacity(count.min(r.remaining() / 8));
            for _ in 0..count {
                let ord = r.u32()?;
                if ord as usize >= n {
                    return Err(Error::Data(format!("posting for {term} points past chunk table")));
                }
                list.push((ord, r.u32()?));
            }
            postings.insert(term, list);
        }
        Ok(InvertedIndex { k1, b, chunk_ids, lengths, avg_len, postings })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Chunk id → ordinal lookup table.
    pub fn ordinals(&self) -> HashMap<&str, usize> {
        self.chunk_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chunk_document, Vocabulary};

    fn chunks(texts: &[&str]) -> Vec<Chunk> {
        let v = Vocabulary::build(texts.iter().copied(), 512).unwrap();
        texts
            .iter()
            .enumerate()
            .flat_map(|(i, t)| chunk_document(&format!("d{i}"), t, 32, &v).unwrap())
            .collect()
    }

    #[test]
    fn empty_index() {
        let idx = InvertedIndex::build(&[]).unwrap();
        assert_eq!(idx.avg_len(), 0.0);
        assert!(idx.search("q", "anything", 3).unwrap().hits.is_empty());
    }

    #[test]
    fn single_chunk_postings_have_length_one() {
        let c = chunks(&["a b a c"]);
        let idx = InvertedIndex::build(&c).unwrap();
        for t in ["a", "b", "c"] {
            assert_eq!(idx.postings(t).unwrap().len(), 1);
        }
        assert_eq!(idx.postings("a").unwrap()[0], (0, 2));
    }

    #[test]
    fn rare_term_ranks_its_chunk_first() {
        let c = chunks(&["river stone", "old road", "mesopotamia river"]);
        let idx = InvertedIndex::build(&c).unwrap();
        let r = idx.search("q", "mesopotamia", 1).unwrap();
        assert_eq!(r.hits[0].chunk_id, "d2#0");
    }

    #[test]
    fn k_beyond_corpus_returns_everything() {
        let c = chunks(&["a b", "b c", "d e"]);
        let idx = InvertedIndex::build(&c).unwrap();
        let r = idx.search("q", "b", 10).unwrap();
        assert_eq!(r.hits.len(), 3);
        assert!(!r.hits[0].padded && !r.hits[1].padded && r.hits[2].padded);
        assert_eq!(r.hits[2].chunk_id, "d2#0");
    }

    #[test]
    fn ties_break_by_chunk_id() {
        let c = chunks(&["x y", "x y", "x y"]);
        let idx = InvertedIndex::build(&c).unwrap();
        let ids: Vec<String> = idx.search("q", "x", 3).unwrap().hits.into_iter().map(|h| h.chunk_id).collect();
        assert_eq!(ids, ["d0#0", "d1#0", "d2#0"]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut c = chunks(&["a"]);
        c.push(c[0].clone());
        assert!(matches!(InvertedIndex::build(&c), Err(Error::Data(_))));
    }

    #[test]
    fn bytes_round_trip_and_are_deterministic() {
        let texts = ["the cat sat", "on the mat", "cat and dog"];
        let a = InvertedIndex::build(&chunks(&texts)).unwrap();
        let b = InvertedIndex::build(&chunks(&texts)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = InvertedIndex::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        let mut bad = a.to_bytes();
        bad.truncate(bad.len() - 3);
        assert!(InvertedIndex::from_bytes(&bad).is_err());
    }
}
