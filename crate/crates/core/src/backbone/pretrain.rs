//! Reader pretraining for the toy backbone.
//!
//! The backbone stands in for a pretrained instruction-following LLM, so it
//! is first taught to answer planted-fact questions from retrieve-then-read
//! prompts built from freshly sampled facts. It never sees the evaluation
//! facts, which keeps closed-book accuracy at the answer-type prior.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Backbone, Train};
use crate::corpus::prompt::{answer_targets, concat_prompt};
use crate::corpus::synth::{Episode, EpisodeSampler};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::serial::{self, ByteReader, ByteWriter};
use crate::numerics::{adamw_step, clip_grad_norm, AdamWConfig, GradPolicy, Graph, OptimizerState, ParamStore, Var};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Share of episodes with no retrieved text, once the single-paragraph
    /// stage is over.
    pub closed_book: f64,
    pub max_k: usize,
    /// Share of open-book episodes whose gold paragraph is forced into the
    /// context at a random rank.
    pub forced_gold: f64,
    /// Fraction of the run trained on single-paragraph contexts only, until
    /// the copy behaviour forms.
    pub single_k: f64,
    /// Fraction of the run, after that, over which the largest sampled `k`
    /// grows linearly to `max_k`.
    pub k_ramp: f64,
    /// Examples per gradient shard.
    pub shard: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch: 16,
            lr: 1.5e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            clip: 1.0,
            closed_book: 0.2,
            max_k: 8,
            forced_gold: 0.8,
            single_k: 0.4,
            k_ramp: 0.4,
            shard: 8,
            seed: 1234,
        }
    }
}

/// A prompt and the answer tokens it should be followed by.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub prompt: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

/// Sequences, logit rows and targets for teacher forcing: each example
/// becomes `prompt ++ targets[..T-1]`, predicting target `i` from packed row
/// `offset + |prompt| - 1 + i`.
pub struct Packed {
    pub seqs: Vec<Vec<TokenId>>,
    pub rows: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    /// Positions (within each sequence) whose next token is a target.
    pub positions: Vec<Vec<usize>>,
}

impl Packed {
    pub fn new(examples: &[&LmExample]) -> Self {
        let mut seqs = Vec::with_capacity(examples.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut positions = Vec::new();
        let mut off = 0;
        for ex in examples {
            let mut s = ex.prompt.clone();
            let t = ex.targets.len();
            s.extend_from_slice(&ex.targets[..t.saturating_sub(1)]);
            let first = ex.prompt.len() - 1;
            positions.push((first..first + t).collect());
            for i in 0..t {
                rows.push(off + first + i);
                targets.push(Some(ex.targets[i] as usize));
            }
            off += s.len();
            seqs.push(s);
        }
        Packed { seqs, rows, targets, positions }
    }

    pub fn slices(&self) -> Vec<&[TokenId]> {
        self.seqs.iter().map(Vec::as_slice).collect()
    }
}

pub fn episode_example(vocab: &Vocabulary, ep: &Episode, max_pos: usize) -> LmExample {
    let targets = answer_targets(vocab, &ep.answer);
    let chunks: Vec<Vec<TokenId>> = ep.chunks.iter().map(|c| vocab.encode(c)).collect();
    let refs: Vec<&[TokenId]> = chunks.iter().map(Vec::as_slice).collect();
    let prompt = concat_prompt(vocab, &refs, &ep.question, max_pos, targets.len());
    LmExample { prompt: prompt.ids, targets }
}

/// Mean answer-token NLL of a plain (hook-free) teacher-forced batch.
pub fn lm_loss(bb: &Backbone, g: &mut Graph, examples: &[&LmExample], train: Option<Train>) -> Result<Var> {
    let packed = Packed::new(examples);
    let out = bb.forward(g, &packed.slices(), None, &[], Some(&packed.rows), train)?;
    g.cross_entropy(out.logits, &packed.targets)
}

/// Batch loss of one optimizer step plus the batch values of any auxiliary
/// scalars the loss function reported, combined with the same weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub aux: Vec<f64>,
}

/// One optimizer step over `batch`, with gradients computed per shard in
/// parallel and combined weighted by `weight` (target-token counts), so the
/// result does not depend on the shard size beyond float rounding.
/// `loss_fn` gets the shard's examples and the batch index of the first one.
pub fn sharded_step<T, W, F>(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    batch: &[T],
    weight: W,
    shard: usize,
    clip: f64,
    loss_fn: F,
) -> Result<StepLoss>
where
    T: Sync,
    W: Fn(&T) -> usize + Sync + Send,
    F: Fn(&mut Graph, &[&T], usize) -> Result<(Var, Vec<Var>)> + Sync + Send,
{
    let indexed: Vec<(usize, &T)> = batch.iter().enumerate().collect();
    let frozen: &ParamStore = store;
    let results = par::map_shards(&indexed, shard, |part| {
        let exs: Vec<&T> = part.iter().map(|(_, e)| *e).collect();
        let w: usize = exs.iter().map(|e| weight(e)).sum();
        let mut g = Graph::new(frozen, GradPolicy::Trainable);
        let (loss, aux) = loss_fn(&mut g, &exs, part[0].0)?;
        let value = g.scalar(loss);
        let aux: Vec<f64> = aux.iter().map(|&a| g.scalar(a)).collect();
        let grads = g.backward(loss)?;
        Ok::<_, Error>((value, aux, w, grads))
    });
    let total: usize = batch.iter().map(&weight).sum();
    store.zero_grad();
    let mut out = StepLoss { loss: 0.0, aux: Vec::new() };
    for r in results {
        let (v, aux, w, grads) = r?;
        let scale = w as f64 / total.max(1) as f64;
        out.loss += v * scale;
        out.aux.resize(aux.len(), 0.0);
        for (o, a) in out.aux.iter_mut().zip(aux) {
            *o += a * scale;
        }
        store.accumulate(&grads, scale);
    }
    if !out.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {}", out.loss)));
    }
    clip_grad_norm(store, clip);
    adamw_step(store, opt)?;
    Ok(out)
}

/// Trains every `backbone.` parameter in `store` on sampled episodes and
/// returns the per-step loss.
pub fn pretrain(
    bb: &Backbone,
    store: &mut ParamStore,
    vocab: &Vocabulary,
    sampler: &EpisodeSampler,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.max_k == 0 {
        return Err(Error::Config("pretraining needs steps, batch and max_k of at least 1".into()));
    }
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        warmup_fraction: cfg.warmup_fraction,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(opt_cfg, cfg.steps, store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let single = cfg.single_k * cfg.steps as f64;
        let ramp = (cfg.k_ramp * cfg.steps as f64).max(1.0);
        let grown = ((step as f64 - single).max(0.0) / ramp * (cfg.max_k - 1) as f64) as usize;
        let top_k = (1 + grown).min(cfg.max_k);
        // Closed-book episodes from the start stall the copy behaviour at
        // the answer-type prior.
        let first_stage = (step as f64) < single;
        let closed_book = if first_stage { 0.0 } else { cfg.closed_book };
        let forced_gold = if first_stage { 1.0 } else { cfg.forced_gold };
        let batch: Vec<LmExample> = (0..cfg.batch)
            .map(|_| {
                if rng.gen::<f64>() < closed_book {
                    return episode_example(vocab, &sampler.sample(0, &mut rng), bb.cfg.max_pos);
                }
                let k = rng.gen_range(1..=top_k);
                let ep = if rng.gen::<f64>() < forced_gold {
                    sampler.sample_with_gold(k, &mut rng)
                } else {
                    sampler.sample(k, &mut rng)
                };
                episode_example(vocab, &ep, bb.cfg.max_pos)
            })
            .collect();
        let seed = cfg.seed ^ ((step as u64) << 20);
        let weight = |e: &LmExample| e.targets.len();
        let loss = sharded_step(store, &mut opt, &batch, weight, cfg.shard, cfg.clip, |g, exs, first| {
            Ok((lm_loss(bb, g, exs, Some(Train { seed: seed.wrapping_add(first as u64) }))?, Vec::new()))
        })?
        .loss;
        if step % 100 == 0 {
            log::info!("backbone pretraining step {step}: loss {loss:.4}");
        }
        losses.push(loss);
    }
    store.clear_grad();
    Ok(losses)
}

const CACHE_MAGIC: &[u8; 8] = b"RFBBONE1";

/// Loads a pretrained backbone from `dir` keyed by `key`, or pretrains and
/// stores one. Returns the parameters and whether they came from disk.
pub fn pretrained_or_train(
    dir: Option<&Path>,
    key: u64,
    build: impl FnOnce() -> Result<ParamStore>,
) -> Result<(ParamStore, bool)> {
    let path = dir.map(|d| d.join(format!("backbone-{key:016x}.bin")));
    if let Some(p) = path.as_deref().filter(|p| p.exists()) {
        let bytes = serial::read_file(p)?;
        let mut r = ByteReader::new(&bytes, "backbone cache");
        if r.take(8).ok() == Some(CACHE_MAGIC.as_slice()) && r.u64().ok() == Some(key) {
            if let Ok(store) = serial::read_params(&mut r) {
                return Ok((store, true));
            }
        }
        log::warn!("ignoring unreadable backbone cache {}", p.display());
    }
    let store = build()?;
    if let Some(p) = path {
        let mut w = ByteWriter::new();
        w.bytes(CACHE_MAGIC);
        w.u64(key);
        serial::write_params(&mut w, &store);
        serial::write_file(&p, &w.buf)?;
    }
    Ok((store, false))
}
