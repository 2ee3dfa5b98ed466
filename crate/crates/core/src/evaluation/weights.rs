//! Token-weight dumps for inspection and plotting.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lab::{Lab, Retrieved, Trained};
use super::metrics::normalize_answer;
use super::report::{Condition, Method};
use crate::corpus::{read_jsonl, write_jsonl, QAExample, PAD};
use crate::error::Result;
use crate::fusion::Diagnostics;

/// One pool token of one query at one fusion layer, as seen at the first
/// decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub query: usize,
    pub question: String,
    pub layer: usize,
    pub slot: usize,
    pub rank: usize,
    pub offset: usize,
    pub chunk_id: String,
    pub token: String,
    pub gamma: f64,
    pub mu: f64,
    pub w_t: f64,
    pub is_pad: bool,
    pub is_noise: bool,
    pub is_gold_chunk: bool,
    /// The token equals the (normalised) gold answer.
    pub is_answer: bool,
    pub correct: bool,
}

/// Flattens the first-step diagnostics of every query into rows. Each pool
/// slot appears exactly once per (query, fusion layer).
pub fn weight_rows(
    lab: &Lab,
    qa: &[QAExample],
    retrieved: &[Retrieved],
    diag: &Diagnostics,
    correct: &[bool],
    k: usize,
    s: usize,
) -> Result<Vec<WeightRow>> {
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for w in &diag.weights {
        if !seen.insert((w.seq, w.layer)) {
            continue;
        }
        let q = &qa[w.seq];
        let Some(pool) = lab.pool(&retrieved[w.seq], k, s)? else { continue };
        let answers: Vec<String> = q.answers.iter().map(|a| normalize_answer(a)).collect();
        for o in pool.origins() {
            let token = if o.is_pad { String::new() } else { lab.vocab.token(o.token).to_string() };
            rows.push(WeightRow {
                query: w.seq,
                question: q.question.clone(),
                layer: w.layer,
                slot: o.slot,
                rank: o.rank,
                offset: o.offset,
                is_gold_chunk: q.gold_chunk_ids.contains(&o.chunk_id),
                chunk_id: o.chunk_id,
                is_answer: o.token != PAD && answers.contains(&normalize_answer(&token)),
                token,
                gamma: w.gamma[o.slot],
                mu: w.mu[o.slot],
                w_t: w.w_t[o.slot],
                is_pad: o.is_pad,
                is_noise: o.is_noise,
                correct: correct[w.seq],
            });
        }
    }
    Ok(rows)
}

/// Evaluates `qa` at the model's `k` under `noise_fraction` and returns the
/// weight rows of every query.
pub fn export_weights(lab: &Lab, t: &Trained, qa: &[QAExample], noise_fraction: f64, seed: u64) -> Result<Vec<WeightRow>> {
    let f = &t.model.cfg.fusion;
    let cond = Condition { method: Method::ReFilter, k: f.k, noise_fraction, shuffled: false, seed };
    let retrieved = lab.retrieve(qa, &cond)?;
    let (report, diag) = lab.eval_refilter(t, qa, &retrieved, &cond, true)?;
    let correct: Vec<bool> = report.records.iter().map(|r| r.em == 1.0).collect();
    weight_rows(lab, qa, &retrieved, &diag, &correct, f.k, f.s)
}

pub fn write_weights(path: &Path, rows: &[WeightRow]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightRow>> {
    read_jsonl(path)
}

/// Mean gate over noise tokens and over gold-chunk tokens (pads excluded).
pub fn gate_means(rows: &[WeightRow]) -> (Option<f64>, Option<f64>) {
    let mean = |f: &dyn Fn(&WeightRow) -> bool| {
        let v: Vec<f64> = rows.iter().filter(|r| !r.is_pad && f(r)).map(|r| r.gamma).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(&|r| r.is_noise), mean(&|r| r.is_gold_chunk))
}

/// Share of correctly answered queries (with an answer token in the pool)
/// whose mean `W_t` over answer tokens exceeds their pool-wide mean, per
/// fusion layer taken together. `None` when no query qualifies.
pub fn answer_weight_share(rows: &[WeightRow]) -> Option<f64> {
    let mut keys: Vec<(usize, usize)> = rows.iter().filter(|r| r.correct).map(|r| (r.query, r.layer)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut qualified = 0;
    let mut above = 0;
    for (q, l) in keys {
        let pool: Vec<&WeightRow> = rows.iter().filter(|r| r.query == q && r.layer == l).collect();
        let ans: Vec<f64> = pool.iter().filter(|r| r.is_answer).map(|r| r.w_t).collect();
        if ans.is_empty() {
            continue;
        }
        qualified += 1;
        let all = pool.iter().map(|r| r.w_t).sum::<f64>() / pool.len() as f64;
        if ans.iter().sum::<f64>() / ans.len() as f64 > all {
            above += 1;
        }
    }
    (qualified > 0).then(|| above as f64 / qualified as f64)
}
