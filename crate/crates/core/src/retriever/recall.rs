use serde::{Deserialize, Serialize};

use super::index::{InvertedIndex, RetrievalResult};
use crate::corpus::QAExample;
use crate::error::{Error, Result};
use crate::par;

/// 1.0 if any gold chunk is among the first `k` hits; `None` without gold.
pub fn recall_at_k(result: &RetrievalResult, gold: &[String], k: usize) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let hit = result.hits.iter().take(k).any(|h| gold.contains(&h.chunk_id));
    Some(if hit { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub recall: f64,
    /// Queries with gold evidence that entered the average.
    pub queries: usize,
    /// Filled in by the evaluation harness.
    pub downstream: Option<f64>,
}

/// Recall@k for every `k` in ascending `k_values`, from one search per query
/// at the largest `k`.
pub fn recall_vs_k_sweep(
    index: &InvertedIndex,
    dataset: &[QAExample],
    k_values: &[usize],
) -> Result<Vec<RecallRow>> {
    if k_values.is_empty() || k_values.windows(2).any(|w| w[0] >= w[1]) || k_values[0] == 0 {
        return Err(Error::Config(format!("k values must be positive and ascending: {k_values:?}")));
    }
    let kmax = *k_values.last().unwrap();
    let results = par::map(dataset, |ex| index.search("", &ex.question, kmax));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(k_values
        .iter()
        .map(|&k| {
            let vals: Vec<f64> = results
                .iter()
                .zip(dataset)
                .filter_map(|(r, ex)| recall_at_k(r, &ex.gold_chunk_ids, k))
                .collect();
            let recall = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            RecallRow { k, recall, queries: vals.len(), downstream: None }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::Hit;

    fn result(ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            query_id: "q".into(),
            hits: ids.iter().map(|i| Hit { chunk_id: i.to_string(), score: 1.0, padded: false }).collect(),
            k: ids.len(),
        }
    }

    #[test]
    fn membership() {
        let r = result(&["a", "g", "b"]);
        let gold = vec!["g".to_string()];
        assert_eq!(recall_at_k(&r, &gold, 1), Some(0.0));
        assert_eq!(recall_at_k(&r, &gold, 3), Some(1.0));
        assert_eq!(recall_at_k(&r, &[], 3), None);
    }

    #[test]
    fn k_values_must_ascend() {
        let idx = InvertedIndex::build(&[]).unwrap();
        assert!(recall_vs_k_sweep(&idx, &[], &[3, 1]).is_err());
        assert_eq!(recall_vs_k_sweep(&idx, &[], &[1, 3, 5]).unwrap().len(), 3);
    }
}
