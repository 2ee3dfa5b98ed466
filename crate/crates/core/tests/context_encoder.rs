mod common;

use common::{model, pool, K, S};
use refilter::context_encoder::{pool_embeddings, FeatureCache, Pool};
use refilter::corpus::{Chunk, Corpus, PAD};
use refilter::numerics::{GradPolicy, Graph};
use refilter::Error;

#[test]
fn cached_and_fresh_embeddings_are_bitwise_equal() {
    let (m, store) = model(vec![3], false);
    let pools = [pool(1, K), pool(2, K)];
    let refs: Vec<&Pool> = pools.iter().collect();
    let mut g = Graph::new(&store, GradPolicy::None);
    let fresh = pool_embeddings(&mut g, &m.encoder, &refs, None, true, None).unwrap();
    let fresh = g.value(fresh).to_vec();

    let mut cache = FeatureCache::new(m.encoder.stamp(&store), m.cfg.encoder.d_e, S);
    for p in &pools {
        for (c, f) in p.chunks.iter().zip(m.encoder.encode_values(&store, &p.token_rows()).unwrap()) {
            cache.put(&c.chunk_id, cache.stamp, f).unwrap();
        }
    }
    let mut g = Graph::new(&store, GradPolicy::None);
    let cached = pool_embeddings(&mut g, &m.encoder, &refs, Some(&cache), false, None).unwrap();
    assert_eq!(g.value(cached), fresh.as_slice());
    assert_eq!(g.shape(cached), &[2 * K * S, m.cfg.backbone.d_model]);
}

#[test]
fn stale_or_missing_cache_entries() {
    let (m, mut store) = model(vec![3], false);
    let p = pool(3, K);
    let empty = FeatureCache::new(m.encoder.stamp(&store), m.cfg.encoder.d_e, S);
    let mut g = Graph::new(&store, GradPolicy::None);
    assert!(matches!(pool_embeddings(&mut g, &m.encoder, &[&p], Some(&empty), false, None), Err(Error::Cache(_))));

    let mut cache = FeatureCache::new(m.encoder.stamp(&store), m.cfg.encoder.d_e, S);
    for (c, f) in p.chunks.iter().zip(m.encoder.encode_values(&store, &p.token_rows()).unwrap()) {
        cache.put(&c.chunk_id, cache.stamp, f).unwrap();
    }
    let old = m.encoder.stamp(&store);
    store.value_mut(m.encoder.body_ids()[0]).data[0] += 0.5;
    let new = m.encoder.stamp(&store);
    assert_ne!(old, new);
    assert!(cache.get(&p.chunks[0].chunk_id, new).is_none());
    assert!(cache.put("x", old, vec![0.0; 3]).is_err());
}

#[test]
fn cache_file_round_trip() {
    let (m, store) = model(vec![3], false);
    let p = pool(4, K);
    let corpus = Corpus::from_chunks(p.chunks.clone(), S).unwrap();
    let mut cache = FeatureCache::new(m.encoder.stamp(&store), m.cfg.encoder.d_e, S);
    for (c, f) in p.chunks.iter().zip(m.encoder.encode_values(&store, &p.token_rows()).unwrap()) {
        cache.put(&c.chunk_id, cache.stamp, f).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.bin");
    cache.save(&path, &corpus).unwrap();
    assert_eq!(FeatureCache::load(&path, &corpus).unwrap(), cache);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(FeatureCache::load(&path, &corpus), Err(Error::Cache(_))));
    let fallback = FeatureCache::load_or_new(&path, &corpus, cache.stamp, cache.d_e, S);
    assert!(fallback.is_empty());
}

#[test]
fn pool_layout_is_rank_major() {
    let p = pool(5, 3);
    assert_eq!(p.n(), 3 * S);
    let origins = p.origins();
    for (j, o) in origins.iter().enumerate() {
        assert_eq!((o.rank, o.offset), (j / S, j % S));
        assert_eq!(p.slot(o.rank, o.offset), j);
        assert_eq!(o.token, p.chunks[o.rank].token_ids[o.offset]);
        assert_eq!(o.chunk_id, p.chunks[o.rank].chunk_id);
    }
    let swapped = p.permuted(&[2, 0, 1]).unwrap();
    assert_eq!(swapped.chunks[0], p.chunks[2]);
    assert!(p.permuted(&[0, 0, 1]).is_err());
    assert!(p.permuted(&[0, 1]).is_err());
}

#[test]
fn short_chunks_are_padded_and_flagged() {
    let mut c = Chunk::padding(0, S);
    c.token_ids[0] = 7;
    c.is_noise = true;
    let p = Pool::new(vec![c], S).unwrap();
    let o = p.origins();
    assert!(!o[0].is_pad && o[0].is_noise);
    assert!(o[1..].iter().all(|x| x.is_pad && x.token == PAD));

    let mut bad = Chunk::padding(1, S);
    bad.token_ids.pop();
    assert!(matches!(Pool::new(vec![bad], S), Err(Error::Dimension(_))));
}

#[test]
fn encoder_features_stay_inside_their_chunk() {
    let (m, store) = model(vec![3], false);
    let p = pool(6, 2);
    let mut q = p.clone();
    q.chunks[1].token_ids[0] = if q.chunks[1].token_ids[0] == 5 { 6 } else { 5 };
    let a = m.encoder.encode_values(&store, &p.token_rows()).unwrap();
    let b = m.encoder.encode_values(&store, &q.token_rows()).unwrap();
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
}
