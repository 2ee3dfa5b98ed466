use std::collections::HashMap;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numerics::serial::{read_file, write_file, ByteReader, ByteWriter};

const MAGIC: &[u8; 8] = b"RFFEATS1";

/// Pre-projection chunk features keyed by chunk id, valid for one encoder
/// stamp. Reads take `&self` and writes `&mut self`, so concurrent lookups
/// are safe while insertion is exclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub stamp: u64,
    pub d_e: usize,
    pub s: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl FeatureCache {
    pub fn new(stamp: u64, d_e: usize, s: usize) -> Self {
        FeatureCache { stamp, d_e, s, entries: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `None` on a miss or when `stamp` differs from the cache's.
    pub fn get(&self, chunk_id: &str, stamp: u64) -> Option<&[f64]> {
        if stamp != self.stamp {
            return None;
        }
        self.entries.get(chunk_id).map(Vec::as_slice)
    }

    /// Stores a feature computed under `stamp`. A new stamp invalidates
    /// every previous entry.
    pub fn put(&mut self, chunk_id: &str, stamp: u64, feature: Vec<f64>) -> Result<()> {
        if feature.len() != self.s * self.d_e {
            return Err(Error::Cache(format!(
                "feature of {} values, expected {}x{}",
                feature.len(),
                self.s,
                self.d_e
            )));
        }
        if stamp != self.stamp {
            self.entries.clear();
            self.stamp = stamp;
        }
        self.entries.insert(chunk_id.to_string(), feature);
        Ok(())
    }

    /// Layout: magic, stamp, d_e, s, record count, then per record the chunk
    /// ordinal in `corpus` and `s * d_e` little-endian f64 values.
    pub fn save(&self, path: &Path, corpus: &Corpus) -> Result<()> {
        let mut records: Vec<(usize, &Vec<f64>)> = self
            .entries
            .iter()
            .map(|(id, f)| {
                corpus
                    .ordinal(id)
                    .map(|o| (o, f))
                    .ok_or_else(|| Error::Cache(format!("cached chunk {id} is not in the corpus")))
            })
            .collect::<Result<_>>()?;
        records.sort_by_key(|r| r.0);
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u64(self.stamp);
        w.u32(self.d_e as u32);
        w.u32(self.s as u32);
        w.u64(records.len() as u64);
        for (ord, f) in records {
            w.u64(ord as u64);
            w.f64s(f);
        }
        write_file(path, &w.buf)
    }

    pub fn load(path: &Path, corpus: &Corpus) -> Result<Self> {
        let bytes = read_file(path)?;
        let corrupt = |e: Error| Error::Cache(format!("{}: {e}", path.display()));
        let mut r = ByteReader::new(&bytes, "feature cache");
        if r.take(8).map_err(corrupt)? != MAGIC {
            return Err(Error::Cache(format!("{}: not a feature cache", path.display())));
        }
        let stamp = r.u64().map_err(corrupt)?;
        let d_e = r.u32().map_err(corrupt)? as usize;
        let s = r.u32().map_err(corrupt)? as usize;
        let n = r.u64().map_err(corrupt)? as usize;
        let mut cache = FeatureCache::new(stamp, d_e, s);
        for _ in 0..n {
            let ord = r.u64().map_err(corrupt)? as usize;
            let f = r.f64s(s * d_e).map_err(corrupt)?;
            let chunk = corpus.chunks().get(ord).ok_or_else(|| {
                Error::Cache(format!("{}: record for chunk ordinal {ord} past corpus end", path.display()))
            })?;
            cache.entries.insert(chunk.chunk_id.clone(), f);
        }
        if r.remaining() != 0 {
            return Err(Error::Cache(format!("{}: trailing bytes", path.display())));
        }
        Ok(cache)
    }

    /// Loads `path` if it is readable and matches `stamp`; otherwise starts
    /// empty (the caller then encodes afresh).
    pub fn load_or_new(path: &Path, corpus: &Corpus, stamp: u64, d_e: usize, s: usize) -> Self {
        match Self::load(path, corpus) {
            Ok(c) if c.stamp == stamp && c.d_e == d_e && c.s == s => c,
            Ok(_) => {
                log::info!("feature cache {} is stale; rebuilding", path.display());
                Self::new(stamp, d_e, s)
            }
            Err(e) => {
                if path.exists() {
                    log::warn!("{e}; encoding afresh");
                }
                Self::new(stamp, d_e, s)
            }
        }
    }
}
