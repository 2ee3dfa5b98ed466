//! Tiny models and pools shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refilter::backbone::{Backbone, BackboneConfig};
use refilter::context_encoder::{EncoderConfig, Pool};
use refilter::corpus::Chunk;
use refilter::fusion::{FusionConfig, ReFilter, ReFilterConfig};
use refilter::numerics::ParamStore;

pub const D: usize = 16;
pub const S: usize = 4;
pub const K: usize = 2;

pub fn config(layers: Vec<usize>, freeze: bool) -> ReFilterConfig {
    ReFilterConfig {
        backbone: BackboneConfig { vocab_size: 40, d_model: D, layers: 3, heads: 2, ff_width: 32, max_pos: 32, dropout: 0.0 },
        encoder: EncoderConfig { vocab_size: 40, d_e: 8, layers: 1, heads: 2, ff_width: 16, chunk_len: S, d_model: D, dropout: 0.0 },
        fusion: FusionConfig { layers, k: K, s: S, dropout: 0.0, alpha_init: 0.1, freeze_after_prefill: freeze },
    }
}

/// Model with every fusion parameter moved off its initial value.
pub fn model(layers: Vec<usize>, freeze: bool) -> (ReFilter, ParamStore) {
    let cfg = config(layers, freeze);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    Backbone::new(cfg.backbone.clone(), &mut store, &mut rng).unwrap();
    let m = ReFilter::new(cfg, &mut store, &mut rng).unwrap();
    for (gp, fp) in m.gates.iter().zip(&m.fusion) {
        for x in &mut store.value_mut(gp.w_g).data {
            *x = rng.gen_range(-0.5..0.5);
        }
        store.value_mut(gp.a_g).data[0] = 0.3;
        for x in &mut store.value_mut(gp.mu).data {
            *x = rng.gen_range(0.2..1.5);
        }
        store.value_mut(fp.alpha).data[0] = 0.7;
        for x in &mut store.value_mut(fp.ln_g).data {
            *x = rng.gen_range(0.5..1.5);
        }
        for x in &mut store.value_mut(fp.ln_b).data {
            *x = rng.gen_range(-0.2..0.2);
        }
    }
    (m, store)
}

pub fn chunk(id: &str, rng: &mut ChaCha8Rng) -> Chunk {
    Chunk {
        chunk_id: id.into(),
        doc_id: id.into(),
        text: String::new(),
        token_ids: (0..S).map(|_| rng.gen_range(4..40)).collect(),
        is_noise: false,
    }
}

pub fn pool(seed: u64, k: usize) -> Pool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Pool::new((0..k).map(|i| chunk(&format!("c{seed}-{i}"), &mut rng)).collect(), S).unwrap()
}

pub fn prompt(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(4..40)).collect()
}


pub fn vocab() -> refilter::corpus::Vocabulary {
    let mut t: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].map(String::from).to_vec();
    t.extend((4..40).map(|i| format!("w{i}")));
    refilter::corpus::Vocabulary::from_tokens(t)
}

/// Random prompts answered by one token then `<eos>`. Every fourth example
/// retrieves nothing.
pub fn examples(n: usize, seed: u64) -> Vec<refilter::training::TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let answer = rng.gen_range(4..40u32);
            let s = seed * 1000 + i as u64;
            refilter::training::TrainExample {
                id: i,
                question: format!("q{i}"),
                answers: vec![format!("w{answer}")],
                prompt: prompt(s, rng.gen_range(3..8)),
                targets: vec![answer, refilter::corpus::EOS],
                pool: (i % 4 != 3).then(|| pool(s, K)),
                gold_chunk_ids: Vec::new(),
            }
        })
        .collect()
}
