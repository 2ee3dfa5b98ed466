use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::write_jsonl;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Plain backbone on the question alone.
    ClosedBook,
    /// Retrieved text concatenated into the prompt.
    SRag,
    ReFilter,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ClosedBook => "closed-book",
            Method::SRag => "s-rag",
            Method::ReFilter => "refilter",
        })
    }
}

/// Everything that determines an evaluation run besides the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub method: Method,
    pub k: usize,
    pub noise_fraction: f64,
    pub shuffled: bool,
    pub seed: u64,
}

impl Condition {
    pub fn clean(method: Method, k: usize, seed: u64) -> Self {
        Condition { method, k, noise_fraction: 0.0, shuffled: false, seed }
    }

    /// File-name fragment encoding every field.
    pub fn tag(&self) -> String {
        format!(
            "{}-k{}-noise{:.2}-{}-seed{}",
            self.method,
            self.k,
            self.noise_fraction,
            if self.shuffled { "shuffled" } else { "ordered" },
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub question: String,
    pub prediction: String,
    pub golds: Vec<String>,
    pub em: f64,
    pub f1: f64,
    pub gold_retrieved: bool,
    /// S-RAG only: some chunks did not fit the context window.
    pub truncated: bool,
    pub prompt_tokens: usize,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub records: Vec<EvalRecord>,
    pub mean_em: f64,
    pub mean_f1: f64,
    /// Share of queries whose gold chunk is among the evaluated chunks.
    pub recall: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn new(condition: Condition, records: Vec<EvalRecord>) -> Self {
        let mean_em = mean(records.iter().map(|r| r.em));
        let mean_f1 = mean(records.iter().map(|r| r.f1));
        let recall = mean(records.iter().map(|r| f64::from(u8::from(r.gold_retrieved))));
        EvalReport { condition, records, mean_em, mean_f1, recall }
    }

    /// Writes `{experiment}-{condition}.jsonl` with one record per example.
    pub fn write(&self, dir: &Path, experiment: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{experiment}-{}.jsonl", self.condition.tag()));
        write_jsonl(&path, &self.records)?;
        Ok(path)
    }
}

/// Writes serialisable rows as a CSV file with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
