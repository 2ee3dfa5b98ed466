//! Synthetic planted-fact QA task.
//!
//! Every entity owns one document whose paragraphs are exactly `chunk_len`
//! tokens long, so fixed-length chunking recovers them one-to-one and gold
//! chunk ids are known at generation time. A fact paragraph contains the
//! contiguous triple `entity relation value .` at a random offset inside
//! filler text. Distractor paragraphs name the entity and repeat the
//! relation word, which makes BM25 rank them above the gold paragraph, and
//! scatter same-type values that are *not* part of a fact.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{Document, QAExample, Split};
use crate::error::{Error, Result};

pub const RELATIONS: [(&str, [&str; 8]); 6] = [
    ("color", ["crimson", "azure", "amber", "ivory", "jade", "violet", "scarlet", "teal"]),
    ("city", ["paris", "lima", "oslo", "cairo", "delhi", "quito", "rome", "seoul"]),
    ("animal", ["otter", "falcon", "lynx", "heron", "bison", "gecko", "walrus", "badger"]),
    ("metal", ["copper", "cobalt", "nickel", "silver", "zinc", "tin", "iron", "bronze"]),
    ("fruit", ["mango", "plum", "cherry", "lemon", "fig", "guava", "melon", "peach"]),
    ("instrument", ["harp", "cello", "flute", "oboe", "lute", "drum", "violin", "tuba"]),
];

const FILLER: [&str; 64] = [
    "river", "stone", "market", "old", "quiet", "village", "road", "hill", "garden", "bridge",
    "winter", "morning", "lantern", "harbor", "forest", "tower", "small", "bright", "long",
    "narrow", "green", "field", "song", "story", "letter", "window", "across", "near", "under",
    "during", "beyond", "behind", "through", "along", "between", "people", "traders", "children",
    "merchants", "visitors", "farmers", "sailors", "walked", "waited", "watched", "gathered",
    "carried", "spoke", "remembered", "rested", "traveled", "sang", "often", "rarely", "slowly",
    "quietly", "always", "sometimes", "there", "here", "and", "but", "with", "then",
];

const NOISE_WORDS: [&str; 40] = [
    "patient", "dosage", "clinical", "symptom", "therapy", "fever", "infection", "vaccine",
    "tissue", "enzyme", "protein", "cardiac", "renal", "hepatic", "chronic", "acute", "diagnosis",
    "treatment", "trial", "placebo", "cohort", "biopsy", "lesion", "dermal", "neural", "immune",
    "antibody", "pathogen", "syndrome", "insulin", "glucose", "plasma", "serum", "lymph", "marrow",
    "cortex", "steroid", "toxin", "dose", "ward",
];

const ONSETS: [&str; 18] =
    ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "x", "k"];

/// Shortest chunk length that fits every paragraph template.
pub const MIN_CHUNK_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_questions: usize,
    pub test_questions: usize,
    pub chunk_len: usize,
    pub facts_per_entity: usize,
    pub light_mentions: usize,
    pub noise_docs: usize,
    pub noise_paragraphs: usize,
    /// Size of the fixed entity-name universe every seed draws from.
    pub entity_pool: usize,
    /// Relative frequency of 0, 1, 2, ... distractors that outrank the gold
    /// paragraph for a given (entity, relation).
    pub distractor_weights: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_questions: 540,
            test_questions: 200,
            chunk_len: 16,
            facts_per_entity: 3,
            light_mentions: 2,
            noise_docs: 150,
            noise_paragraphs: 4,
            entity_pool: 320,
            distractor_weights: vec![0.40, 0.15, 0.12, 0.10, 0.08, 0.06, 0.05, 0.04],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub documents: Vec<Document>,
    pub qa: Vec<QAExample>,
    pub noise: Vec<Document>,
    pub entities: Vec<String>,
}

pub fn question_text(relation: &str, entity: &str) -> String {
    format!("what is the {relation} of {entity} ?")
}

pub fn relation_values(relation: &str) -> Option<&'static [&'static str; 8]> {
    RELATIONS.iter().find(|(r, _)| *r == relation).map(|(_, v)| v)
}

fn is_value(word: &str) -> bool {
    RELATIONS.iter().any(|(_, vs)| vs.contains(&word))
}

fn is_relation(word: &str) -> bool {
    RELATIONS.iter().any(|(r, _)| *r == word)
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let reserved: HashSet<&str> = FILLER
        .iter()
        .chain(NOISE_WORDS.iter())
        .chain(RELATIONS.iter().map(|(r, _)| r))
        .chain(RELATIONS.iter().flat_map(|(_, v)| v.iter()))
        .copied()
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syll = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syll {
            name.push_str(ONSETS.choose(rng).unwrap());
            name.push_str(VOWELS.choose(rng).unwrap());
        }
        name.push_str(CODAS.choose(rng).unwrap());
        if !reserved.contains(name.as_str()) && seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

const UNIVERSE_SEED: u64 = 0x0e7e_0001;

/// The first `n` entity names of a seed-independent universe. Corpora of
/// different seeds pick different subsets, so one vocabulary and one
/// pretrained backbone serve them all.
pub fn entity_universe(n: usize) -> Vec<String> {
    entity_names(n, &mut ChaCha8Rng::seed_from_u64(UNIVERSE_SEED))
}

/// Every word a generated corpus, question, noise document or prompt can
/// contain, each once, in a fixed order.
pub fn lexicon(cfg: &SynthConfig) -> Vec<String> {
    let template = ["question", ":", "answer", "what", "is", "the", "of", "?", "."];
    let mut seen = HashSet::new();
    template
        .iter()
        .chain(RELATIONS.iter().map(|(r, _)| r))
        .chain(RELATIONS.iter().flat_map(|(_, v)| v.iter()))
        .chain(FILLER.iter())
        .chain(NOISE_WORDS.iter())
        .map(|w| w.to_string())
        .chain(entity_universe(cfg.entity_pool))
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

fn sample_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn filler(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n).map(|_| FILLER.choose(rng).unwrap().to_string()).collect()
}

/// `entity relation value .` at a random offset inside filler.
fn fact_paragraph(e: &str, r: &str, v: &str, len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words = filler(len - 4, rng);
    let at = rng.gen_range(0..=words.len());
    let fact = [e, r, v, "."].map(String::from);
    words.splice(at..at, fact);
    words
}

/// Places `items` at random distinct slots of a filler paragraph such that no
/// value directly follows a relation word and the entity never directly
/// precedes a relation word.
fn scatter(items: &[String], len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    loop {
        let mut words = filler(len, rng);
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        for (item, &slot) in items.iter().zip(&slots) {
            words[slot] = item.clone();
        }
        let bad = words.windows(2).any(|w| {
            (is_relation(&w[0]) && is_value(&w[1])) || (is_relation(&w[1]) && !FILLER.contains(&w[0].as_str()))
        });
        if !bad {
            return words;
        }
    }
}

/// Paragraph mentioning the entity once and the relation twice, plus one or
/// two same-type values that are not stated as the fact.
fn distractor_paragraph(e: &str, r: &str, len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let values = relation_values(r).expect("known relation");
    let mut items = vec![e.to_string(), r.to_string(), r.to_string()];
    let n_vals = rng.gen_range(1..=2);
    for v in values.choose_multiple(rng, n_vals) {
        items.push(v.to_string());
    }
    scatter(&items, len, rng)
}

/// Paragraph mentioning the entity once plus a stray value of any type.
fn light_paragraph(e: &str, len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let (_, values) = RELATIONS.choose(rng).unwrap();
    let items = vec![e.to_string(), values.choose(rng).unwrap().to_string()];
    scatter(&items, len, rng)
}

fn noise_paragraph(len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..len).map(|_| NOISE_WORDS.choose(rng).unwrap().to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Fact(usize),
    Distractor(usize),
    Light,
}

struct EntityDoc {
    paragraphs: Vec<(Kind, Vec<String>)>,
    facts: Vec<(usize, usize)>,
}

fn entity_document(e: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> EntityDoc {
    let s = cfg.chunk_len;
    let mut rel_ids: Vec<usize> = (0..RELATIONS.len()).collect();
    rel_ids.shuffle(rng);
    rel_ids.truncate(cfg.facts_per_entity.min(RELATIONS.len()));
    let mut paragraphs = Vec::new();
    let mut facts = Vec::new();
    for &ri in &rel_ids {
        let (r, values) = RELATIONS[ri];
        let vi = rng.gen_range(0..values.len());
        facts.push((ri, vi));
        paragraphs.push((Kind::Fact(ri), fact_paragraph(e, r, values[vi], s, rng)));
        let d = sample_weighted(&cfg.distractor_weights, rng);
        for _ in 0..d {
            paragraphs.push((Kind::Distractor(ri), distractor_paragraph(e, r, s, rng)));
        }
    }
    for _ in 0..cfg.light_mentions {
        paragraphs.push((Kind::Light, light_paragraph(e, s, rng)));
    }
    paragraphs.shuffle(rng);
    EntityDoc { paragraphs, facts }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.chunk_len < MIN_CHUNK_LEN {
        return Err(Error::Config(format!(
            "synthetic paragraphs need chunk_len >= {MIN_CHUNK_LEN}, got {}",
            cfg.chunk_len
        )));
    }
    if cfg.facts_per_entity == 0 || cfg.facts_per_entity > RELATIONS.len() {
        return Err(Error::Config(format!(
            "facts_per_entity must be in 1..={}",
            RELATIONS.len()
        )));
    }
    if cfg.distractor_weights.is_empty() || cfg.distractor_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("distractor_weights must be non-empty and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per = cfg.facts_per_entity;
    let n_train_ent = cfg.train_questions.div_ceil(per);
    let n_test_ent = cfg.test_questions.div_ceil(per);
    if n_train_ent + n_test_ent > cfg.entity_pool {
        return Err(Error::Config(format!(
            "{} entities needed but entity_pool is {}",
            n_train_ent + n_test_ent,
            cfg.entity_pool
        )));
    }
    let mut entities = entity_universe(cfg.entity_pool);
    entities.shuffle(&mut rng);
    entities.truncate(n_train_ent + n_test_ent);

    let mut documents = Vec::with_capacity(entities.len());
    let mut qa = Vec::new();
    let (mut n_train, mut n_test) = (0, 0);
    for (ei, e) in entities.iter().enumerate() {
        let doc_id = format!("doc-{ei:04}");
        let doc = entity_document(e, cfg, &mut rng);
        let split = if ei < n_train_ent { Split::Train } else { Split::Test };
        for &(ri, vi) in &doc.facts {
            let budget = if split == Split::Train { &mut n_train } else { &mut n_test };
            let cap = if split == Split::Train { cfg.train_questions } else { cfg.test_questions };
            if *budget >= cap {
                continue;
            }
            *budget += 1;
            let pi = doc.paragraphs.iter().position(|(k, _)| *k == Kind::Fact(ri)).unwrap();
            let (r, values) = RELATIONS[ri];
            qa.push(QAExample {
                question: question_text(r, e),
                answers: vec![values[vi].to_string()],
                gold_chunk_ids: vec![format!("{doc_id}#{pi}")],
                split,
            });
        }
        let text = doc.paragraphs.iter().map(|(_, w)| w.join(" ")).collect::<Vec<_>>().join(" ");
        documents.push(Document { doc_id, text });
    }

    let noise = (0..cfg.noise_docs)
        .map(|i| {
            let text = (0..cfg.noise_paragraphs)
                .map(|_| noise_paragraph(cfg.chunk_len, &mut rng).join(" "))
                .collect::<Vec<_>>()
                .join(" ");
            Document { doc_id: format!("noise-{i:04}"), text }
        })
        .collect();
    Ok(SynthData { documents, qa, noise, entities })
}

/// One retrieve-then-read training episode with freshly drawn facts.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Paragraphs in simulated retrieval-rank order.
    pub chunks: Vec<String>,
    pub question: String,
    pub answer: String,
    pub gold_rank: Option<usize>,
}

/// Samples episodes whose facts are drawn independently of the generated
/// corpus, so a backbone trained on them learns to read evidence rather than
/// memorise the evaluation facts.
pub struct EpisodeSampler {
    entities: Vec<String>,
    cfg: SynthConfig,
}

impl EpisodeSampler {
    pub fn new(entities: Vec<String>, cfg: SynthConfig) -> Result<Self> {
        if entities.len() < 2 {
            return Err(Error::Config("episode sampler needs at least two entities".into()));
        }
        Ok(EpisodeSampler { entities, cfg })
    }

    /// Top-`k` paragraphs ordered the way BM25 ranks them on the generated
    /// corpus: distractors for the asked relation, then the gold paragraph,
    /// then the entity's other paragraphs, then other entities' facts about
    /// the same relation.
    pub fn sample(&self, k: usize, rng: &mut ChaCha8Rng) -> Episode {
        let e = self.entities.choose(rng).unwrap();
        let doc = entity_document(e, &self.cfg, rng);
        let qi = rng.gen_range(0..doc.facts.len());
        let (ri, vi) = doc.facts[qi];
        let (r, values) = RELATIONS[ri];
        let mut ranked: Vec<(u8, Vec<String>)> = doc
            .paragraphs
            .into_iter()
            .map(|(kind, words)| {
                let tier = match kind {
                    Kind::Distractor(x) if x == ri => 0,
                    Kind::Fact(x) if x == ri => 1,
                    _ => 2,
                };
                (tier, words)
            })
            .collect();
        ranked.sort_by_key(|(t, _)| *t);
        let gold_pos = ranked.iter().position(|(t, _)| *t == 1);
        let mut chunks: Vec<String> = ranked.into_iter().map(|(_, w)| w.join(" ")).collect();
        while chunks.len() < k {
            let other = self.entities.choose(rng).unwrap();
            if other == e {
                continue;
            }
            let v = values.choose(rng).unwrap();
            chunks.push(fact_paragraph(other, r, v, self.cfg.chunk_len, rng).join(" "));
        }
        chunks.truncate(k);
        let gold_rank = gold_pos.filter(|&p| p < k);
        Episode { chunks, question: question_text(r, e), answer: values[vi].to_string(), gold_rank }
    }

    /// Like [`Self::sample`] but the gold paragraph is always among the `k`
    /// (`k >= 1`), moved to a uniformly random rank.
    pub fn sample_with_gold(&self, k: usize, rng: &mut ChaCha8Rng) -> Episode {
        let mut ep = self.sample(k.max(1) + 8, rng);
        let g = ep.gold_rank.expect("gold paragraph is always ranked");
        let gold = ep.chunks.remove(g);
        ep.chunks.truncate(k.max(1) - 1);
        let at = rng.gen_range(0..=ep.chunks.len());
        ep.chunks.insert(at, gold);
        ep.gold_rank = Some(at);
        ep
    }
}
