//! Robustness and ablation experiments over one [`Lab`].

use serde::{Deserialize, Serialize};

use super::lab::{Lab, Trained};
use super::report::{Condition, EvalReport, Method};
use super::weights::{gate_means, weight_rows};
use crate::error::{Error, Result};
use crate::fusion::{last_layers, FusionConfig};
use crate::retriever::recall_vs_k_sweep;
use crate::training::TrainConfig;

/// One k of the recall-versus-quality sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingRow {
    pub seed: u64,
    pub k: usize,
    pub recall: f64,
    pub srag_em: f64,
    pub refilter_em: f64,
}

/// Recall@k from the index and the exact match of S-RAG and of a ReFilter
/// trained at each k, on the test questions.
pub fn run_decoupling(
    lab: &Lab,
    k_values: &[usize],
    fusion: &FusionConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<DecouplingRow>> {
    let recall = recall_vs_k_sweep(&lab.index, &lab.test_qa, k_values)?;
    let mut rows = Vec::new();
    for r in recall {
        let srag = lab.evaluate(None, &lab.test_qa, &Condition::clean(Method::SRag, r.k, seed))?;
        let t = lab.train_refilter(FusionConfig { k: r.k, ..fusion.clone() }, train, None)?;
        let rf = lab.evaluate(Some(&t), &lab.test_qa, &Condition::clean(Method::ReFilter, r.k, seed))?;
        log::info!("k={}: recall {:.3}, s-rag {:.3}, refilter {:.3}", r.k, r.recall, srag.mean_em, rf.mean_em);
        rows.push(DecouplingRow { seed, k: r.k, recall: r.recall, srag_em: srag.mean_em, refilter_em: rf.mean_em });
    }
    Ok(rows)
}

/// Peak metric minus the metric at the largest k.
pub fn peak_to_last_drop(values: &[f64]) -> f64 {
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    peak - values.last().copied().unwrap_or(peak)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub seed: u64,
    pub method: Method,
    pub fraction: f64,
    pub em: f64,
    pub f1: f64,
    /// ReFilter only: mean gate on noise tokens and on gold-chunk tokens.
    pub gate_noise: Option<f64>,
    pub gate_gold: Option<f64>,
}

/// Both methods at each noise fraction, plus ReFilter's gate statistics.
pub fn run_noise(lab: &Lab, t: &Trained, fractions: &[f64], seed: u64) -> Result<(Vec<NoiseRow>, Vec<EvalReport>)> {
    let f = &t.model.cfg.fusion;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &fraction in fractions {
        for method in [Method::SRag, Method::ReFilter] {
            let cond = Condition { method, k: f.k, noise_fraction: fraction, shuffled: false, seed };
            let retrieved = lab.retrieve(&lab.test_qa, &cond)?;
            let (report, gates) = match method {
                Method::ReFilter => {
                    let (report, diag) = lab.eval_refilter(t, &lab.test_qa, &retrieved, &cond, true)?;
                    let correct: Vec<bool> = report.records.iter().map(|r| r.em == 1.0).collect();
                    let w = weight_rows(lab, &lab.test_qa, &retrieved, &diag, &correct, f.k, f.s)?;
                    (report, gate_means(&w))
                }
                _ => (lab.eval_srag(&lab.test_qa, &retrieved, &cond)?, (None, None)),
            };
            rows.push(NoiseRow {
                seed,
                method,
                fraction,
                em: report.mean_em,
                f1: report.mean_f1,
                gate_noise: gates.0,
                gate_gold: gates.1,
            });
            reports.push(report);
        }
    }
    Ok((rows, reports))
}

/// Metric at the first fraction minus the metric at the last, per method.
pub fn noise_drop(rows: &[NoiseRow], method: Method) -> Result<f64> {
    let m: Vec<&NoiseRow> = rows.iter().filter(|r| r.method == method).collect();
    match (m.first(), m.last()) {
        (Some(a), Some(b)) => Ok(a.em - b.em),
        _ => Err(Error::Data(format!("no noise rows for {method}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub seed: u64,
    pub method: Method,
    pub k: usize,
    pub ordered_em: f64,
    pub shuffled_em: f64,
    /// Mean over queries of |metric(shuffled) - metric(ordered)|.
    pub mean_abs_delta: f64,
}

/// In-order versus seeded-shuffle evaluation, paired per query.
pub fn run_shuffle(lab: &Lab, t: &Trained, seed: u64) -> Result<Vec<ShuffleRow>> {
    let k = t.model.cfg.fusion.k;
    let mut rows = Vec::new();
    for method in [Method::SRag, Method::ReFilter] {
        let base = Condition::clean(method, k, seed);
        let shuffled = Condition { shuffled: true, ..base.clone() };
        let a = lab.evaluate(Some(t), &lab.test_qa, &base)?;
        let b = lab.evaluate(Some(t), &lab.test_qa, &shuffled)?;
        let n = a.records.len().max(1) as f64;
        let delta = a.records.iter().zip(&b.records).map(|(x, y)| (y.em - x.em).abs()).sum::<f64>() / n;
        rows.push(ShuffleRow { seed, method, k, ordered_em: a.mean_em, shuffled_em: b.mean_em, mean_abs_delta: delta });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub seed: u64,
    pub depth: usize,
    pub layers: String,
    pub em: f64,
    pub f1: f64,
}

/// Trains and evaluates ReFilter fused at the last `d` layers for each
/// depth (clamped to the backbone's layer count).
pub fn run_depth_ablation(
    lab: &Lab,
    depths: &[usize],
    fusion: &FusionConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<DepthRow>> {
    let total = lab.cfg.backbone.layers;
    let mut rows = Vec::new();
    for &d in depths {
        let layers = last_layers(d, total);
        let t = lab.train_refilter(FusionConfig { layers: layers.clone(), ..fusion.clone() }, train, None)?;
        let r = lab.evaluate(Some(&t), &lab.test_qa, &Condition::clean(Method::ReFilter, fusion.k, seed))?;
        let names: Vec<String> = layers.iter().map(usize::to_string).collect();
        rows.push(DepthRow { seed, depth: d, layers: names.join(" "), em: r.mean_em, f1: r.mean_f1 });
    }
    Ok(rows)
}
