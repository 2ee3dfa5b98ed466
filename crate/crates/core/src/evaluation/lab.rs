//! One seed's worth of experiment state: corpus, index, pretrained backbone
//! and the evaluation of each method under a retrieval condition.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{exact_match, token_f1};
use super::report::{Condition, EvalRecord, EvalReport, Method};
use crate::backbone::{generate, pretrain, pretrained_or_train, Backbone, BackboneConfig, GenerateOptions, PretrainConfig};
use crate::context_encoder::{EncoderConfig, FeatureCache, Pool};
use crate::corpus::prompt::{concat_prompt, question_prompt};
use crate::corpus::synth::{self, EpisodeSampler, SynthConfig, SynthData};
use crate::corpus::{inject_noise, Chunk, Corpus, QAExample, Split, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{Diagnostics, FusionConfig, ReFilter, ReFilterConfig};
use crate::numerics::serial::fingerprint;
use crate::numerics::ParamStore;
use crate::par;
use crate::retriever::InvertedIndex;
use crate::training::{build_examples, train, Checkpoint, TrainConfig, TrainExample, TrainOptions, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub synth: SynthConfig,
    /// `vocab_size` is replaced by the lexicon size.
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    /// `vocab_size`, `chunk_len` and `d_model` follow the rest of the lab.
    pub encoder: EncoderConfig,
    /// Generation budget for answers.
    pub max_new: usize,
    /// Queries per parallel generation shard.
    pub eval_shard: usize,
    /// Start each context encoder from the pretrained backbone's token
    /// embeddings instead of from scratch.
    pub encoder_from_backbone: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            encoder: EncoderConfig::default(),
            max_new: 4,
            eval_shard: 25,
            encoder_from_backbone: true,
        }
    }
}

/// The evaluated chunks of one query after noise and shuffling, in the
/// order the methods see them.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub chunks: Vec<Chunk>,
    pub gold_retrieved: bool,
}

/// A trained ReFilter with its best-dev parameters.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ReFilter,
    pub store: ParamStore,
    pub outcome: TrainOutcome,
    pub cache: Option<FeatureCache>,
}

impl Trained {
    /// The best-dev model of a saved run (the final one if it had no dev set).
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let store = ck.best.as_ref().map_or(&ck.params, |b| &b.params).clone();
        let model = ReFilter::attach(ck.model.clone(), &store)?;
        Ok(Trained { model, store, outcome: TrainOutcome { last: ck, finished: true }, cache: None })
    }
}

pub struct Lab {
    pub cfg: LabConfig,
    pub data: SynthData,
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub noise: Corpus,
    pub index: InvertedIndex,
    pub backbone: Backbone,
    pub backbone_store: ParamStore,
    pub train_qa: Vec<QAExample>,
    pub test_qa: Vec<QAExample>,
}

impl Lab {
    /// Vocabulary shared by every seed of `cfg.synth`.
    pub fn vocabulary(cfg: &LabConfig) -> Result<Vocabulary> {
        let lex = synth::lexicon(&cfg.synth);
        Vocabulary::build(lex.iter().map(String::as_str), lex.len() + 8)
    }

    fn resolved(mut cfg: LabConfig, vocab: &Vocabulary) -> LabConfig {
        cfg.backbone.vocab_size = vocab.len();
        cfg.encoder.vocab_size = vocab.len();
        cfg.encoder.chunk_len = cfg.synth.chunk_len;
        cfg.encoder.d_model = cfg.backbone.d_model;
        cfg
    }

    /// Pretrains the reader backbone, or loads it from `cache_dir`. The
    /// result depends on the backbone, pretraining and lexicon settings but
    /// not on the corpus seed.
    pub fn pretrained_backbone(cfg: &LabConfig, cache_dir: Option<&Path>) -> Result<ParamStore> {
        let vocab = Self::vocabulary(cfg)?;
        let cfg = Self::resolved(cfg.clone(), &vocab);
        let lexicon_cfg = SynthConfig { seed: 0, ..cfg.synth.clone() };
        let key_src = serde_json::to_string(&(&cfg.backbone, &cfg.pretrain, &lexicon_cfg))
            .map_err(|e| Error::Data(e.to_string()))?;
        let key = fingerprint(key_src.as_bytes());
        let (store, cached) = pretrained_or_train(cache_dir, key, || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
            let bb = Backbone::new(cfg.backbone.clone(), &mut store, &mut rng)?;
            let sampler = EpisodeSampler::new(synth::entity_universe(cfg.synth.entity_pool), cfg.synth.clone())?;
            let losses = pretrain(&bb, &mut store, &vocab, &sampler, &cfg.pretrain)?;
            log::info!("backbone pretrained, final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
            Ok(store)
        })?;
        if cached {
            log::info!("loaded pretrained backbone {key:016x}");
        }
        Ok(store)
    }

    /// Builds the corpus for `cfg.synth.seed` around an already pretrained
    /// backbone.
    pub fn with_backbone(cfg: LabConfig, backbone_store: ParamStore) -> Result<Self> {
        let vocab = Self::vocabulary(&cfg)?;
        let cfg = Self::resolved(cfg, &vocab);
        let backbone = Backbone::attach(cfg.backbone.clone(), &backbone_store)?;
        let data = synth::generate(&cfg.synth)?;
        let corpus = Corpus::from_documents(&data.documents, cfg.synth.chunk_len, &vocab, false)?;
        let noise = Corpus::from_documents(&data.noise, cfg.synth.chunk_len, &vocab, true)?;
        let index = InvertedIndex::build(corpus.chunks())?;
        let train_qa = data.qa.iter().filter(|q| q.split == Split::Train).cloned().collect();
        let test_qa = data.qa.iter().filter(|q| q.split == Split::Test).cloned().collect();
        Ok(Lab { cfg, data, vocab, corpus, noise, index, backbone, backbone_store, train_qa, test_qa })
    }

    pub fn new(cfg: LabConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let store = Self::pretrained_backbone(&cfg, cache_dir)?;
        Self::with_backbone(cfg, store)
    }

    pub fn refilter_config(&self, fusion: FusionConfig) -> ReFilterConfig {
        let mut encoder = self.cfg.encoder.clone();
        encoder.chunk_len = fusion.s;
        ReFilterConfig { backbone: self.cfg.backbone.clone(), encoder, fusion }
    }

    pub fn train_examples(&self, k: usize) -> Result<Vec<TrainExample>> {
        build_examples(&self.train_qa, &self.vocab, &self.corpus, &self.index, k)
    }

    /// Trains a ReFilter at `fusion.k` on the training questions and keeps
    /// its best-dev parameters. Model initialisation is seeded by
    /// `train.seed`.
    pub fn train_refilter(&self, fusion: FusionConfig, train_cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Trained> {
        let rcfg = self.refilter_config(fusion);
        let mut store = self.backbone_store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x0ef1_17e2);
        let model = ReFilter::new(rcfg, &mut store, &mut rng)?;
        if self.cfg.encoder_from_backbone {
            let id = store
                .id(&format!("{}tok_emb", crate::backbone::PREFIX))
                .ok_or_else(|| Error::Incompatible("backbone token embeddings missing".into()))?;
            let table = store.value(id).clone();
            model.encoder.init_from_embeddings(&mut store, &table, &mut rng)?;
        }
        let examples = self.train_examples(model.cfg.fusion.k)?;
        let opts = TrainOptions { out_dir: out_dir.map(Path::to_path_buf), ..Default::default() };
        let outcome = train(&model, &mut store, &self.vocab, &examples, None, train_cfg, opts)?;
        let best = outcome.best_params().clone();
        Ok(Trained { model, store: best, outcome, cache: None })
    }

    /// Top-`k` chunks per question, then seeded noise replacement and
    /// optional seeded shuffling, each keyed by the question index.
    pub fn retrieve(&self, qa: &[QAExample], cond: &Condition) -> Result<Vec<Retrieved>> {
        if cond.k == 0 {
            return Ok(qa.iter().map(|_| Retrieved { chunks: Vec::new(), gold_retrieved: false }).collect());
        }
        let noise_pool = self.noise.chunks();
        let out = par::map_range(qa.len(), |i| {
            let q = &qa[i];
            let result = self.index.search(&i.to_string(), &q.question, cond.k)?;
            let mut chunks: Vec<Chunk> = result
                .hits
                .iter()
                .map(|h| self.corpus.get(&h.chunk_id).cloned().ok_or_else(|| Error::Data(format!("unknown chunk {}", h.chunk_id))))
                .collect::<Result<_>>()?;
            let item_seed = cond.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            chunks = inject_noise(&chunks, noise_pool, cond.noise_fraction, item_seed)?;
            if cond.shuffled {
                chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed ^ 0x5b0f_f1e5));
            }
            let gold_retrieved = chunks.iter().any(|c| q.gold_chunk_ids.contains(&c.chunk_id));
            Ok(Retrieved { chunks, gold_retrieved })
        });
        out.into_iter().collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        self.vocab.decode(ids)
    }

    fn records(
        &self,
        qa: &[QAExample],
        retrieved: &[Retrieved],
        predictions: Vec<String>,
        prompts: &[(usize, bool)],
        cond: &Condition,
    ) -> EvalReport {
        let records = qa
            .iter()
            .zip(retrieved)
            .zip(predictions)
            .zip(prompts)
            .enumerate()
            .map(|(i, (((q, r), prediction), &(prompt_tokens, truncated)))| EvalRecord {
                id: i,
                question: q.question.clone(),
                em: exact_match(&prediction, &q.answers),
                f1: token_f1(&prediction, &q.answers),
                prediction,
                golds: q.answers.clone(),
                gold_retrieved: r.gold_retrieved,
                truncated,
                prompt_tokens,
                condition: cond.clone(),
            })
            .collect();
        EvalReport::new(cond.clone(), records)
    }

    /// Prompt-concatenation baseline (closed book when no chunks).
    pub fn srag_prompts(&self, qa: &[QAExample], retrieved: &[Retrieved]) -> Vec<(Vec<TokenId>, bool)> {
        qa.iter()
            .zip(retrieved)
            .map(|(q, r)| {
                let ids: Vec<&[TokenId]> = r.chunks.iter().map(Chunk::content_ids).collect();
                let p = concat_prompt(&self.vocab, &ids, &q.question, self.cfg.backbone.max_pos, self.cfg.max_new);
                (p.ids, p.truncated)
            })
            .collect()
    }

    pub fn eval_srag(&self, qa: &[QAExample], retrieved: &[Retrieved], cond: &Condition) -> Result<EvalReport> {
        let prompts = self.srag_prompts(qa, retrieved);
        let ids: Vec<Vec<TokenId>> = prompts.iter().map(|p| p.0.clone()).collect();
        let opts = GenerateOptions { max_new: self.cfg.max_new, stop_at_eos: true };
        let shards = par::map_shards(&ids, self.cfg.eval_shard, |part| {
            generate(&self.backbone, &self.backbone_store, part, None, opts)
        });
        let mut preds = Vec::with_capacity(qa.len());
        for s in shards {
            preds.extend(s?.iter().map(|o| self.decode(o)));
        }
        let meta: Vec<(usize, bool)> = prompts.iter().map(|(p, t)| (p.len(), *t)).collect();
        Ok(self.records(qa, retrieved, preds, &meta, cond))
    }

    /// Pool of `k` slots from the evaluated chunks, pad-filled; `None` when
    /// nothing was retrieved.
    pub fn pool(&self, r: &Retrieved, k: usize, s: usize) -> Result<Option<Pool>> {
        if r.chunks.is_empty() {
            return Ok(None);
        }
        let mut chunks = r.chunks.clone();
        while chunks.len() < k {
            chunks.push(Chunk::padding(chunks.len(), s));
        }
        Pool::new(chunks, s).map(Some)
    }

    /// Fused generation. Diagnostics are recorded when `record` is set, with
    /// `seq` indexing `qa`.
    pub fn eval_refilter(
        &self,
        t: &Trained,
        qa: &[QAExample],
        retrieved: &[Retrieved],
        cond: &Condition,
        record: bool,
    ) -> Result<(EvalReport, Diagnostics)> {
        let f = &t.model.cfg.fusion;
        let prompts: Vec<Vec<TokenId>> = qa.iter().map(|q| question_prompt(&self.vocab, &q.question)).collect();
        let pools: Vec<Option<Pool>> = retrieved.iter().map(|r| self.pool(r, f.k, f.s)).collect::<Result<_>>()?;
        let items: Vec<usize> = (0..qa.len()).collect();
        let opts = GenerateOptions { max_new: self.cfg.max_new, stop_at_eos: true };
        let shards = par::map_shards(&items, self.cfg.eval_shard, |part| {
            let p: Vec<Vec<TokenId>> = part.iter().map(|&i| prompts[i].clone()).collect();
            let pl: Vec<Option<Pool>> = part.iter().map(|&i| pools[i].clone()).collect();
            t.model.generate(&t.store, &p, &pl, t.cache.as_ref(), opts, record).map(|(o, mut d)| {
                for w in &mut d.weights {
                    w.seq += part[0];
                }
                for x in &mut d.injections {
                    x.seq += part[0];
                }
                (o, d)
            })
        });
        let mut preds = Vec::with_capacity(qa.len());
        let mut diag = Diagnostics::default();
        for s in shards {
            let (o, d) = s?;
            preds.extend(o.iter().map(|x| self.decode(x)));
            diag.weights.extend(d.weights);
            diag.injections.extend(d.injections);
        }
        let meta: Vec<(usize, bool)> = prompts.iter().map(|p| (p.len(), false)).collect();
        Ok((self.records(qa, retrieved, preds, &meta, cond), diag))
    }

    /// Retrieves under `cond` and evaluates its method on `qa`.
    pub fn evaluate(&self, trained: Option<&Trained>, qa: &[QAExample], cond: &Condition) -> Result<EvalReport> {
        let retrieved = self.retrieve(qa, cond)?;
        match cond.method {
            Method::ClosedBook => {
                let none: Vec<Retrieved> = retrieved.iter().map(|_| Retrieved { chunks: vec![], gold_retrieved: false }).collect();
                self.eval_srag(qa, &none, cond)
            }
            Method::SRag => self.eval_srag(qa, &retrieved, cond),
            Method::ReFilter => {
                let t = trained.ok_or_else(|| Error::Config("refilter evaluation needs a trained model".into()))?;
                Ok(self.eval_refilter(t, qa, &retrieved, cond, false)?.0)
            }
        }
    }
}
