//! Token-level chunk features, their projection into the backbone width and
//! the flattened per-query token pool.

mod cache;
mod encoder;
mod pool;

pub use cache::FeatureCache;
pub use encoder::{ContextEncoder, EncoderConfig, ENCODER_PREFIX, PROJECTION_NAME};
pub use pool::{Pool, TokenOrigin};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Context embeddings `C` for a batch of pools, `[B*N, d_m]`, pools stacked
/// in batch order and each flattened in rank order.
///
/// When the graph tracks encoder gradients the chunks are always encoded
/// inside the graph. Otherwise features come from `cache` where present and
/// are encoded as constants where missing (or `Error::Cache` if
/// `allow_encode` is false).
pub fn pool_embeddings(
    g: &mut Graph,
    enc: &ContextEncoder,
    pools: &[&Pool],
    cache: Option<&FeatureCache>,
    allow_encode: bool,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let s = enc.cfg.chunk_len;
    if let Some(p) = pools.iter().find(|p| p.s != s) {
        return Err(Error::Dimension(format!("pool of chunk length {}, encoder expects {s}", p.s)));
    }
    let rows: Vec<&[TokenId]> = pools.iter().flat_map(|p| p.token_rows()).collect();
    let body_trainable = enc.body_ids().iter().any(|&id| {
        let v = g.param(id);
        g.requires_grad(v)
    });
    let f = if body_trainable || (cache.is_none() && allow_encode) {
        enc.encode(g, &rows, dropout_seed)?
    } else {
        let store = g.store();
        let stamp = enc.stamp(store);
        let width = s * enc.cfg.d_e;
        let mut data = Vec::with_capacity(rows.len() * width);
        let ids: Vec<&str> = pools.iter().flat_map(|p| p.chunks.iter().map(|c| c.chunk_id.as_str())).collect();
        let mut missing = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match cache.and_then(|c| c.get(id, stamp)) {
                Some(feat) => data.extend_from_slice(feat),
                None => {
                    missing.push(i);
                    data.extend(std::iter::repeat_n(0.0, width));
                }
            }
        }
        if !missing.is_empty() {
            if !allow_encode {
                return Err(Error::Cache(format!("no cached features for chunk {}", ids[missing[0]])));
            }
            let fresh = enc.encode_values(store, &missing.iter().map(|&i| rows[i]).collect::<Vec<_>>())?;
            for (&i, feat) in missing.iter().zip(fresh) {
                data[i * width..(i + 1) * width].copy_from_slice(&feat);
            }
        }
        g.constant(Tensor::new(vec![rows.len() * s, enc.cfg.d_e], data)?)
    };
    enc.project(g, f)
}
