mod common;

use common::{model, pool, prompt, D, K, S};
use refilter::backbone::generate;
use refilter::backbone::GenerateOptions;
use refilter::context_encoder::{pool_embeddings, FeatureCache, Pool};
use refilter::fusion::{FusionHook, ReFilter};
use refilter::numerics::{sigmoid, GradPolicy, Graph, ParamStore};
use refilter::Error;

/// Hidden states at `layer` for every position, fused at `pos`.
fn fused_states(m: &ReFilter, store: &ParamStore, seq: &[u32], p: &Pool, pos: usize, layer: usize) -> Vec<Vec<f64>> {
    let pools = [p.clone()];
    let mut hook = FusionHook::per_sequence(m, &pools, None, None, false).unwrap();
    let mut g = Graph::new(store, GradPolicy::None);
    let out = m.fused_forward(&mut g, &[seq], vec![vec![pos]], &mut hook, &[layer], None, None).unwrap();
    (0..seq.len()).map(|i| out.hidden.decision_state(0, layer, i).unwrap()).collect()
}

fn plain_states(m: &ReFilter, store: &ParamStore, seq: &[u32], layer: usize) -> Vec<Vec<f64>> {
    let mut g = Graph::new(store, GradPolicy::None);
    let out = m.backbone.forward(&mut g, &[seq], None, &[layer], None, None).unwrap();
    (0..seq.len()).map(|i| out.hidden.decision_state(0, layer, i).unwrap()).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i]).collect()
}

#[test]
fn injection_matches_hand_composition() {
    let (m, store) = model(vec![2], false);
    let seq = prompt(1, 7);
    let p = pool(1, K);
    let fused = fused_states(&m, &store, &seq, &p, 6, 2);

    let h = plain_states(&m, &store, &seq, 2)[6].clone();
    let mut g = Graph::new(&store, GradPolicy::None);
    let cv = pool_embeddings(&mut g, &m.encoder, &[&p], None, true, None).unwrap();
    let c: Vec<&[f64]> = g.value(cv).chunks(D).collect();
    let (gp, fp) = (m.gates[0], m.fusion[0]);
    let w = &store.value(gp.w_g).data;
    let a = store.value(gp.a_g).data[0];
    let mu = &store.value(gp.mu).data;
    let mut sum = vec![0.0; D];
    for (j, cj) in c.iter().enumerate() {
        let score: f64 = (0..D).map(|i| w[i] * cj[i] + w[D + i] * h[i]).sum::<f64>() + a;
        let wt = mu[j] * sigmoid(score);
        for i in 0..D {
            sum[i] += wt * cj[i];
        }
    }
    let r = layer_norm(&sum, &store.value(fp.ln_g).data, &store.value(fp.ln_b).data);
    let alpha = store.value(fp.alpha).data[0];
    for i in 0..D {
        let want = h[i] + alpha * r[i];
        assert!((fused[6][i] - want).abs() < 1e-12, "dim {i}: {} vs {want}", fused[6][i]);
    }
}

#[test]
fn zero_alpha_is_bitwise_bypass() {
    let (m, mut store) = model(vec![2, 3], false);
    for fp in &m.fusion {
        store.value_mut(fp.alpha).data[0] = 0.0;
    }
    let seq = prompt(2, 9);
    let fused = fused_states(&m, &store, &seq, &pool(2, K), 8, 3);
    assert_eq!(fused, plain_states(&m, &store, &seq, 3));

    let prompts = vec![prompt(3, 5), prompt(4, 8)];
    let opts = GenerateOptions { max_new: 5, stop_at_eos: false };
    let plain = generate(&m.backbone, &store, &prompts, None, opts).unwrap();
    let (out, _) = m.generate(&store, &prompts, &[Some(pool(3, K)), Some(pool(4, K))], None, opts, false).unwrap();
    assert_eq!(out, plain);
}

#[test]
fn no_retrieval_is_bitwise_bypass() {
    let (m, store) = model(vec![3], false);
    let prompts = vec![prompt(5, 6), prompt(6, 4)];
    let opts = GenerateOptions { max_new: 5, stop_at_eos: false };
    let plain = generate(&m.backbone, &store, &prompts, None, opts).unwrap();
    let (out, diag) = m.generate(&store, &prompts, &[None, None], None, opts, true).unwrap();
    assert_eq!(out, plain);
    assert!(diag.injections.is_empty());

    // Mixed batch: the retrieval-free prompt is untouched.
    let pools = [pool(7, K)];
    let mut hook = FusionHook::new(&m, pools.iter().collect(), vec![Some(0), None], None, None, false).unwrap();
    let (a, b) = (prompt(7, 6), prompt(8, 5));
    let mut g = Graph::new(&store, GradPolicy::None);
    let out = m.fused_forward(&mut g, &[&a, &b], vec![vec![5], vec![4]], &mut hook, &[3], None, None).unwrap();
    let alone = plain_states(&m, &store, &b, 3);
    for p in 0..5 {
        assert_eq!(out.hidden.decision_state(1, 3, p).unwrap(), alone[p]);
    }
    assert_ne!(out.hidden.decision_state(0, 3, 5).unwrap(), plain_states(&m, &store, &a, 3)[5]);
}

#[test]
fn only_the_decision_position_changes() {
    let (m, store) = model(vec![2], false);
    let seq = prompt(9, 8);
    let p = pool(9, K);
    let fused = fused_states(&m, &store, &seq, &p, 5, 2);
    let plain = plain_states(&m, &store, &seq, 2);
    for i in 0..8 {
        assert_eq!(fused[i] == plain[i], i != 5, "position {i}");
    }
    let before = fused_states(&m, &store, &seq, &p, 5, 1);
    assert_eq!(before, plain_states(&m, &store, &seq, 1));
}

#[test]
fn chunk_order_does_not_matter_with_matching_mask() {
    let (m, mut store) = model(vec![2], false);
    let seq = prompt(10, 6);
    let p = pool(10, K);
    let a = fused_states(&m, &store, &seq, &p, 5, 2);
    // Swap the chunks and the matching halves of the position mask.
    let mu = store.value(m.gates[0].mu).data.clone();
    store.value_mut(m.gates[0].mu).data = [&mu[S..], &mu[..S]].concat();
    let b = fused_states(&m, &store, &seq, &p.permuted(&[1, 0]).unwrap(), 5, 2);
    for (x, y) in a[5].iter().zip(&b[5]) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn pool_size_mismatch_is_a_dimension_error() {
    let (m, _) = model(vec![3], false);
    let pools = [pool(11, K + 1)];
    assert!(matches!(FusionHook::per_sequence(&m, &pools, None, None, false), Err(Error::Dimension(_))));
}

#[test]
fn frozen_update_fires_once_per_sequence() {
    let opts = GenerateOptions { max_new: 4, stop_at_eos: false };
    let prompts = vec![prompt(12, 5), prompt(13, 7)];
    let pools = vec![Some(pool(12, K)), Some(pool(13, K))];
    let (m, store) = model(vec![2, 3], false);
    let (live, d_live) = m.generate(&store, &prompts, &pools, None, opts, true).unwrap();
    let (mf, store_f) = model(vec![2, 3], true);
    let (frozen, d_frozen) = mf.generate(&store_f, &prompts, &pools, None, opts, true).unwrap();
    assert_eq!(d_live.injections.len(), 2 * 2 * 4);
    assert_eq!(d_frozen.injections.len(), 2 * 2);
    assert!(d_frozen.injections.iter().all(|r| r.position + 1 == prompts[r.seq].len()));
    for (a, b) in live.iter().zip(&frozen) {
        assert_eq!(a[0], b[0]);
    }
}

#[test]
fn cached_features_give_identical_generations() {
    let (m, store) = model(vec![3], false);
    let prompts = vec![prompt(14, 5), prompt(15, 6)];
    let pools = vec![Some(pool(14, K)), Some(pool(15, K))];
    let mut cache = FeatureCache::new(m.encoder.stamp(&store), m.cfg.encoder.d_e, S);
    for p in pools.iter().flatten() {
        let feats = m.encoder.encode_values(&store, &p.token_rows()).unwrap();
        for (c, f) in p.chunks.iter().zip(feats) {
            cache.put(&c.chunk_id, cache.stamp, f).unwrap();
        }
    }
    let opts = GenerateOptions { max_new: 4, stop_at_eos: false };
    let (a, da) = m.generate(&store, &prompts, &pools, None, opts, true).unwrap();
    let (b, db) = m.generate(&store, &prompts, &pools, Some(&cache), opts, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(da, db);
}
