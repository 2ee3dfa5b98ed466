//! Teacher-forced optimisation of the filter and fusion parameters on top of
//! a frozen backbone.

mod checkpoint;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, BestSnapshot, Checkpoint, CHECKPOINT_VERSION};
pub use trainer::{dev_split, evaluate_em, train, MetricRecord, TrainOptions, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::context_encoder::{FeatureCache, Pool};
use crate::corpus::prompt::{answer_targets, question_prompt};
use crate::corpus::{Corpus, QAExample, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{FusionHook, ReFilter};
use crate::gated_filter::gate_sparsity_loss;
use crate::backbone::Train;
use crate::numerics::{Graph, Var};
use crate::retriever::InvertedIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Weight of the gate sparsity term.
    pub lambda: f64,
    pub seed: u64,
    pub dev_fraction: f64,
    /// Also fine-tune the context encoder body (the projection is always
    /// trained). When false the feature cache can serve training too.
    pub train_encoder: bool,
    /// Examples per gradient shard.
    pub shard: usize,
    /// Generation budget for dev exact match.
    pub max_new: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            batch: 16,
            lr: 3e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            clip: 1.0,
            lambda: 0.01,
            seed: 0,
            dev_fraction: 0.1,
            train_encoder: true,
            shard: 4,
            max_new: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.shard == 0 {
            return Err(Error::Config("epochs, batch and shard must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!("dev_fraction {} outside [0, 1)", self.dev_fraction)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// A question with its answer tokens and retrieved pool (`None` when
/// retrieval found nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: usize,
    pub question: String,
    pub answers: Vec<String>,
    pub prompt: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub pool: Option<Pool>,
    pub gold_chunk_ids: Vec<String>,
}

/// Retrieves `k` chunks for each question and builds its prompt, targets
/// and pool. Questions without an answer are skipped with a warning.
pub fn build_examples(
    qa: &[QAExample],
    vocab: &Vocabulary,
    corpus: &Corpus,
    index: &InvertedIndex,
    k: usize,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(qa.len());
    for (i, q) in qa.iter().enumerate() {
        let Some(answer) = q.answers.first().filter(|a| !vocab.encode(a).is_empty()) else {
            log::warn!("skipping question {i} ({:?}): empty answer", q.question);
            continue;
        };
        let result = index.search(&i.to_string(), &q.question, k)?;
        let pool = if result.hits.is_empty() { None } else { Some(Pool::from_result(&result, corpus, k)?) };
        out.push(TrainExample {
            id: i,
            question: q.question.clone(),
            answers: q.answers.clone(),
            prompt: question_prompt(vocab, &q.question),
            targets: answer_targets(vocab, answer),
            pool,
            gold_chunk_ids: q.gold_chunk_ids.clone(),
        });
    }
    Ok(out)
}

/// Loss terms of one batch. `total = nll + λ·gate` by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub gate: f64,
    pub total: f64,
    pub mean_gate: f64,
}

impl LossBreakdown {
    pub fn new(nll: f64, gate: f64, lambda: f64) -> Self {
        LossBreakdown { nll, gate, total: nll + lambda * gate, mean_gate: gate }
    }
}

/// Differentiable loss terms in one graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub nll: Var,
    /// Absent when no example in the batch retrieved anything.
    pub gate: Option<Var>,
    pub total: Var,
}

/// Sequences and supervision for teacher forcing with fusion. When every
/// fusion layer is the last one, an injection at an answer position cannot
/// reach any other position, so one pass per example injects at all answer
/// positions at once. Deeper fusion would leak between positions, so each
/// answer token then gets its own prefix, injected only at its last position,
/// exactly as in generation.
struct TeacherBatch<'a> {
    seqs: Vec<Vec<TokenId>>,
    positions: Vec<Vec<usize>>,
    rows: Vec<usize>,
    targets: Vec<Option<usize>>,
    pools: Vec<&'a Pool>,
    pool_of_seq: Vec<Option<usize>>,
}

fn teacher_batch<'a>(model: &ReFilter, exs: &[&'a TrainExample]) -> TeacherBatch<'a> {
    let last_only = model.cfg.fusion.layers.iter().all(|&l| l == model.cfg.backbone.layers);
    let mut b = TeacherBatch {
        seqs: Vec::new(),
        positions: Vec::new(),
        rows: Vec::new(),
        targets: Vec::new(),
        pools: Vec::new(),
        pool_of_seq: Vec::new(),
    };
    let mut off = 0;
    for ex in exs {
        let pool = ex.pool.as_ref().map(|p| {
            b.pools.push(p);
            b.pools.len() - 1
        });
        let first = ex.prompt.len() - 1;
        let t = ex.targets.len();
        let mut push = |b: &mut TeacherBatch<'a>, seq: Vec<TokenId>, pos: Vec<usize>, tgt: &[TokenId]| {
            for (i, &p) in pos.iter().enumerate() {
                b.rows.push(off + p);
                b.targets.push(Some(tgt[i] as usize));
            }
            off += seq.len();
            b.seqs.push(seq);
            b.positions.push(pos);
            b.pool_of_seq.push(pool);
        };
        if last_only {
            let mut seq = ex.prompt.clone();
            seq.extend_from_slice(&ex.targets[..t - 1]);
            push(&mut b, seq, (first..first + t).collect(), &ex.targets);
        } else {
            for i in 0..t {
                let mut seq = ex.prompt.clone();
                seq.extend_from_slice(&ex.targets[..i]);
                push(&mut b, seq, vec![first + i], &ex.targets[i..=i]);
            }
        }
    }
    b
}

/// Teacher-forced NLL over answer tokens plus `λ` times the mean gate.
/// `train_seed` turns on dropout.
pub fn compute_loss(
    model: &ReFilter,
    g: &mut Graph,
    exs: &[&TrainExample],
    lambda: f64,
    cache: Option<&FeatureCache>,
    train_seed: Option<u64>,
) -> Result<LossVars> {
    let b = teacher_batch(model, exs);
    let mut hook = FusionHook::new(model, b.pools, b.pool_of_seq, cache, train_seed, false)?;
    let seqs: Vec<&[TokenId]> = b.seqs.iter().map(Vec::as_slice).collect();
    let train = train_seed.map(|seed| Train { seed });
    let out = model.fused_forward(g, &seqs, b.positions, &mut hook, &[], Some(&b.rows), train)?;
    let nll = g.cross_entropy(out.logits, &b.targets)?;
    if hook.gammas.is_empty() {
        return Ok(LossVars { nll, gate: None, total: nll });
    }
    let gate = gate_sparsity_loss(g, &hook.gammas)?;
    let weighted = g.scale(gate, lambda);
    let total = g.add(nll, weighted)?;
    Ok(LossVars { nll, gate: Some(gate), total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::new(2.0, 0.5, 1.0);
        assert_eq!(b.total, 2.5);
        let b = LossBreakdown::new(1.25, 0.75, 0.0);
        assert_eq!(b.total, b.nll);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    }
}
