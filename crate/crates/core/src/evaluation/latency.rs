//! Batched wall-clock latency of S-RAG and ReFilter generation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::lab::{Lab, Retrieved, Trained};
use super::report::{Condition, Method};
use crate::backbone::{generate, GenerateOptions};
use crate::context_encoder::Pool;
use crate::corpus::prompt::question_prompt;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySettings {
    pub batch_sizes: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    /// Tokens generated per query, EOS ignored.
    pub gen_tokens: usize,
}

impl Default for LatencySettings {
    fn default() -> Self {
        LatencySettings { batch_sizes: vec![1, 4, 8, 16, 32, 64], trials: 20, warmup: 3, gen_tokens: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub method: Method,
    pub k: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub per_query_ms_mean: f64,
    pub per_query_ms_p50: f64,
    pub per_query_ms_p90: f64,
    pub per_query_ms_p99: f64,
    /// Median prefill-plus-first-token time of the whole batch.
    pub ttft_ms: f64,
    /// Generated tokens per second after the first.
    pub tokens_per_sec: f64,
    /// Mean prompt length per query.
    pub prompt_tokens: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    percentile(xs, 50.0)
}

enum Runner<'a> {
    SRag(Vec<Vec<TokenId>>),
    ReFilter(&'a Trained, Vec<Vec<TokenId>>, Vec<Option<Pool>>),
}

impl Runner<'_> {
    fn prompts(&self) -> &[Vec<TokenId>] {
        match self {
            Runner::SRag(p) | Runner::ReFilter(_, p, _) => p,
        }
    }

    fn run(&self, lab: &Lab, max_new: usize) -> Result<()> {
        let opts = GenerateOptions { max_new, stop_at_eos: false };
        match self {
            Runner::SRag(p) => generate(&lab.backbone, &lab.backbone_store, p, None, opts).map(drop),
            Runner::ReFilter(t, p, pools) => t.model.generate(&t.store, p, pools, t.cache.as_ref(), opts, false).map(drop),
        }
    }
}

fn timed(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Per-query latency, TTFT and throughput for both methods at the trained
/// model's k, each batch drawn from the first test questions (cycled). Runs
/// sequentially on the calling thread.
pub fn run_latency(lab: &Lab, t: &Trained, settings: &LatencySettings, seed: u64) -> Result<Vec<LatencyReport>> {
    if settings.trials == 0 || settings.gen_tokens == 0 {
        return Err(Error::Config("latency needs at least one trial and one generated token".into()));
    }
    let f = &t.model.cfg.fusion;
    let qa = &lab.test_qa;
    if qa.is_empty() {
        return Err(Error::Data("no test questions to time".into()));
    }
    let retrieved = lab.retrieve(qa, &Condition::clean(Method::SRag, f.k, seed))?;
    let mut out = Vec::new();
    for &b in &settings.batch_sizes {
        let pick: Vec<usize> = (0..b).map(|i| i % qa.len()).collect();
        let sub_qa: Vec<_> = pick.iter().map(|&i| qa[i].clone()).collect();
        let sub_r: Vec<Retrieved> = pick.iter().map(|&i| retrieved[i].clone()).collect();
        let srag: Vec<Vec<TokenId>> = lab.srag_prompts(&sub_qa, &sub_r).into_iter().map(|p| p.0).collect();
        let q: Vec<Vec<TokenId>> = sub_qa.iter().map(|x| question_prompt(&lab.vocab, &x.question)).collect();
        let pools: Vec<Option<Pool>> = sub_r.iter().map(|r| lab.pool(r, f.k, f.s)).collect::<Result<_>>()?;
        for (method, runner) in [(Method::SRag, Runner::SRag(srag)), (Method::ReFilter, Runner::ReFilter(t, q, pools))] {
            for _ in 0..settings.warmup {
                runner.run(lab, settings.gen_tokens)?;
            }
            let mut per_query = Vec::with_capacity(settings.trials);
            let mut full = Vec::with_capacity(settings.trials);
            let mut first = Vec::with_capacity(settings.trials);
            for _ in 0..settings.trials {
                first.push(timed(|| runner.run(lab, 1))?);
                let ms = timed(|| runner.run(lab, settings.gen_tokens))?;
                full.push(ms);
                per_query.push(ms / b as f64);
            }
            let mean = per_query.iter().sum::<f64>() / per_query.len() as f64;
            per_query.sort_by(f64::total_cmp);
            let ttft = median(&mut first);
            let total = median(&mut full);
            let rest = (total - ttft).max(1e-9);
            let prompt_tokens = runner.prompts().iter().map(Vec::len).sum::<usize>() as f64 / b as f64;
            out.push(LatencyReport {
                method,
                k: f.k,
                batch_size: b,
                trials: settings.trials,
                per_query_ms_mean: mean,
                per_query_ms_p50: percentile(&per_query, 50.0),
                per_query_ms_p90: percentile(&per_query, 90.0),
                per_query_ms_p99: percentile(&per_query, 99.0),
                ttft_ms: ttft,
                tokens_per_sec: (settings.gen_tokens - 1) as f64 * b as f64 / (rest / 1e3),
                prompt_tokens,
            });
        }
    }
    Ok(out)
}
