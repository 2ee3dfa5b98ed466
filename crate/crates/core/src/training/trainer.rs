use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, BestSnapshot, Checkpoint};
use super::{compute_loss, LossBreakdown, TrainConfig, TrainExample};
use crate::backbone::{sharded_step, GenerateOptions};
use crate::context_encoder::{FeatureCache, Pool};
use crate::corpus::{write_jsonl, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::metrics::exact_match;
use crate::fusion::ReFilter;
use crate::numerics::serial::copy_params;
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore};

/// One line of the metrics log. `dev_metric` is set on the last step of
/// each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub gate: f64,
    pub total: f64,
    pub mean_gate: f64,
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Return after this many completed steps, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last completed step.
    pub last: Checkpoint,
    pub finished: bool,
}

impl TrainOutcome {
    pub fn log(&self) -> &[MetricRecord] {
        &self.last.log
    }

    /// Best-dev parameters, or the final ones when there was no dev set.
    pub fn best_params(&self) -> &ParamStore {
        self.last.best.as_ref().map_or(&self.last.params, |b| &b.params)
    }
}

/// Shuffled `(train, dev)` indices, `dev` holding `round(fraction · n)`.
pub fn dev_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xde5_5b11));
    let d = (fraction * n as f64).round() as usize;
    let dev = idx.split_off(n - d.min(n));
    (idx, dev)
}

fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0e90c << 8).wrapping_add(epoch as u64)));
    order
}

/// Greedy-decoding exact match of the fused model over `examples`.
pub fn evaluate_em(
    model: &ReFilter,
    store: &ParamStore,
    vocab: &Vocabulary,
    examples: &[&TrainExample],
    cache: Option<&FeatureCache>,
    max_new: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let prompts: Vec<_> = examples.iter().map(|e| e.prompt.clone()).collect();
    let pools: Vec<Option<Pool>> = examples.iter().map(|e| e.pool.clone()).collect();
    let opts = GenerateOptions { max_new, stop_at_eos: true };
    let (out, _) = model.generate(store, &prompts, &pools, cache, opts, false)?;
    let hits: f64 = out.iter().zip(examples).map(|(o, e)| exact_match(&vocab.decode(o), &e.answers)).sum();
    Ok(hits / examples.len() as f64)
}

fn dump_batch(dir: Option<&Path>, batch: &[&TrainExample], err: &Error) -> String {
    let ids: Vec<usize> = batch.iter().map(|e| e.id).collect();
    let mut msg = format!("{err} in batch of examples {ids:?}");
    if let Some(dir) = dir {
        #[derive(Serialize)]
        struct Dumped<'a> {
            id: usize,
            question: &'a str,
            answers: &'a [String],
            prompt: &'a [u32],
            targets: &'a [u32],
            chunks: Vec<&'a str>,
        }
        let rows: Vec<Dumped> = batch
            .iter()
            .map(|e| Dumped {
                id: e.id,
                question: &e.question,
                answers: &e.answers,
                prompt: &e.prompt,
                targets: &e.targets,
                chunks: e.pool.iter().flat_map(|p| p.chunks.iter().map(|c| c.chunk_id.as_str())).collect(),
            })
            .collect();
        let path = dir.join("nonfinite-batch.jsonl");
        if write_jsonl(&path, &rows).is_ok() {
            msg.push_str(&format!("; batch written to {}", path.display()));
        }
    }
    msg
}

/// Trains the filter, fusion and (optionally) encoder parameters of `model`
/// on `examples`, holding the backbone fixed. Keeps the parameters of the
/// best dev epoch; `store` ends at the last completed step.
pub fn train(
    model: &ReFilter,
    store: &mut ParamStore,
    vocab: &Vocabulary,
    examples: &[TrainExample],
    cache: Option<&FeatureCache>,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.set_trainable(store);
    if !cfg.train_encoder {
        for id in model.encoder.body_ids() {
            store.get_mut(id).trainable = false;
        }
    }
    let (train_idx, dev_idx) = dev_split(examples.len(), cfg.dev_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Training("no training examples left after the dev split".into()));
    }
    let per_epoch = train_idx.len().div_ceil(cfg.batch);
    let total_steps = per_epoch * cfg.epochs;
    let dev: Vec<&TrainExample> = dev_idx.iter().map(|&i| &examples[i]).collect();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (mut opt, mut log, mut best, start) = match opts.resume {
        Some(ck) => {
            if ck.train != *cfg || ck.model != model.cfg {
                return Err(Error::Incompatible("checkpoint was written under a different configuration".into()));
            }
            copy_params(store, &ck.params)?;
            (ck.optimizer, ck.log, ck.best, ck.step)
        }
        None => {
            let opt_cfg = AdamWConfig {
                lr: cfg.lr,
                warmup_fraction: cfg.warmup_fraction,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            };
            (OptimizerState::new(opt_cfg, total_steps, store), Vec::new(), None, 0)
        }
    };

    let snapshot = |store: &ParamStore, opt: &OptimizerState, log: &Vec<MetricRecord>, best: &Option<BestSnapshot>, step: usize| {
        Checkpoint {
            model: model.cfg.clone(),
            train: cfg.clone(),
            params: store.clone(),
            optimizer: opt.clone(),
            step,
            epoch: step / per_epoch,
            seed: cfg.seed,
            best: best.clone(),
            log: log.clone(),
        }
    };

    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    for step in start..total_steps {
        let (epoch, within) = (step / per_epoch, step % per_epoch);
        if epoch != order_epoch {
            order = epoch_order(&train_idx, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let hi = ((within + 1) * cfg.batch).min(order.len());
        let batch: Vec<&TrainExample> = order[within * cfg.batch..hi].iter().map(|&i| &examples[i]).collect();
        let step_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 24);
        let weight = |e: &&TrainExample| e.targets.len();
        let res = sharded_step(store, &mut opt, &batch, weight, cfg.shard, cfg.clip, |g, exs, first| {
            let exs: Vec<&TrainExample> = exs.iter().map(|e| **e).collect();
            let l = compute_loss(model, g, &exs, cfg.lambda, cache, Some(step_seed.wrapping_add(first as u64)))?;
            let gate = match l.gate {
                Some(v) => v,
                None => g.constant(crate::numerics::Tensor::scalar(0.0)),
            };
            Ok((l.total, vec![l.nll, gate]))
        });
        let res = match res {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                return Err(Error::Numeric(dump_batch(opts.out_dir.as_deref(), &batch, &e)));
            }
            Err(e) => return Err(e),
        };
        let b = LossBreakdown::new(res.aux[0], res.aux[1], cfg.lambda);
        let mut rec = MetricRecord {
            step: step + 1,
            epoch,
            nll: b.nll,
            gate: b.gate,
            total: b.total,
            mean_gate: b.mean_gate,
            dev_metric: None,
        };
        if within + 1 == per_epoch {
            if !dev.is_empty() {
                let m = evaluate_em(model, store, vocab, &dev, cache, cfg.max_new)?;
                rec.dev_metric = Some(m);
                if best.as_ref().is_none_or(|b| m > b.dev_metric) {
                    best = Some(BestSnapshot { dev_metric: m, epoch, params: store.clone() });
                }
            }
            log::info!("epoch {epoch}: loss {:.4}, dev EM {:?}", b.total, rec.dev_metric);
        }
        log.push(rec);
        if within + 1 == per_epoch {
            if let Some(dir) = &opts.out_dir {
                let ck = snapshot(store, &opt, &log, &best, step + 1);
                save_checkpoint(&dir.join("last.ckpt"), &ck)?;
            }
        }
        if opts.stop_after == Some(step + 1) && step + 1 < total_steps {
            return Ok(TrainOutcome { last: snapshot(store, &opt, &log, &best, step + 1), finished: false });
        }
    }
    store.clear_grad();
    let last = snapshot(store, &opt, &log, &best, total_steps);
    if let Some(dir) = &opts.out_dir {
        write_jsonl(&dir.join("metrics.jsonl"), &log)?;
        save_checkpoint(&dir.join("last.ckpt"), &last)?;
        let mut best_ck = last.clone();
        if let Some(b) = &last.best {
            best_ck.params = b.params.clone();
        }
        save_checkpoint(&dir.join("best.ckpt"), &best_ck)?;
    }
    Ok(TrainOutcome { last, finished: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        let (t, d) = dev_split(540, 0.1, 3);
        assert_eq!((t.len(), d.len()), (486, 54));
        let mut all: Vec<usize> = t.iter().chain(&d).copied().collect();
        all.sort();
        assert_eq!(all, (0..540).collect::<Vec<_>>());
        assert_eq!(dev_split(540, 0.1, 3), (t, d));
        assert_eq!(dev_split(10, 0.0, 1).1.len(), 0);
    }
}
