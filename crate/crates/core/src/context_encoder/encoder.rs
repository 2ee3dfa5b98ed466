use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::layers::{check_shape, dropout_fn, param_id, Block, LN_EPS};
use crate::numerics::serial::{fingerprint, ByteWriter};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const PROJECTION_NAME: &str = "projection.w";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub chunk_len: usize,
    /// Width of the backbone the projection maps into.
    pub d_model: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 2048,
            d_e: 32,
            layers: 2,
            heads: 2,
            ff_width: 128,
            chunk_len: 16,
            d_model: 64,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_e.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_e {} not divisible by {} heads", self.d_e, self.heads)));
        }
        if self.chunk_len == 0 || self.d_model == 0 || self.vocab_size < 4 {
            return Err(Error::Config("encoder chunk_len, d_model and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Bidirectional transformer over single chunks plus the bias-free linear
/// map `W_p` into the backbone width.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    projection: ParamId,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (v, d, s) = (cfg.vocab_size, cfg.d_e, cfg.chunk_len);
        let p = ENCODER_PREFIX;
        let std = 0.02;
        let tok_emb = store.add(format!("{p}tok_emb"), Tensor::randn(&[v, d], std, rng))?;
        let pos_emb = store.add(format!("{p}pos_emb"), Tensor::randn(&[s, d], std, rng))?;
        let blocks = (1..=cfg.layers)
            .map(|l| Block::new(store, &format!("{p}l{l}."), d, cfg.ff_width, std, std, rng))
            .collect::<Result<Vec<_>>>()?;
        let lnf_g = store.add(format!("{p}lnf.g"), Tensor::full(&[d], 1.0))?;
        let lnf_b = store.add(format!("{p}lnf.b"), Tensor::zeros(&[d]))?;
        let scale = 1.0 / (d as f64).sqrt();
        let projection = store.add(PROJECTION_NAME, Tensor::randn(&[d, cfg.d_model], scale, rng))?;
        Ok(ContextEncoder { cfg, tok_emb, pos_emb, blocks, lnf_g, lnf_b, projection })
    }

    pub fn attach(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let p = ENCODER_PREFIX;
        let blocks = (1..=cfg.layers)
            .map(|l| Block::attach(store, &format!("{p}l{l}.")))
            .collect::<Result<Vec<_>>>()?;
        let enc = ContextEncoder {
            tok_emb: param_id(store, p, "tok_emb")?,
            pos_emb: param_id(store, p, "pos_emb")?,
            lnf_g: param_id(store, p, "lnf.g")?,
            lnf_b: param_id(store, p, "lnf.b")?,
            projection: param_id(store, "", PROJECTION_NAME)?,
            blocks,
            cfg,
        };
        check_shape(store, enc.tok_emb, &[enc.cfg.vocab_size, enc.cfg.d_e])?;
        check_shape(store, enc.pos_emb, &[enc.cfg.chunk_len, enc.cfg.d_e])?;
        check_shape(store, enc.projection, &[enc.cfg.d_e, enc.cfg.d_model])?;
        Ok(enc)
    }

    pub fn projection_id(&self) -> ParamId {
        self.projection
    }

    /// Encoder body parameters (everything except the projection).
    pub fn body_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }

    /// Token features of each chunk, stacked: `[n*s, d_e]`.
    pub fn encode(&self, g: &mut Graph, chunks: &[&[TokenId]], dropout_seed: Option<u64>) -> Result<Var> {
        let s = self.cfg.chunk_len;
        if let Some(c) = chunks.iter().find(|c| c.len() != s) {
            return Err(Error::Dimension(format!("chunk of {} tokens, encoder expects {s}", c.len())));
        }
        if let Some(&bad) = chunks.iter().flat_map(|c| c.iter()).find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside encoder vocabulary")));
        }
        let ids: Vec<usize> = chunks.iter().flat_map(|c| c.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = (0..chunks.len()).flat_map(|_| 0..s).collect();
        let segs: Vec<(usize, usize)> = (0..chunks.len()).map(|i| (i * s, s)).collect();
        let tok = g.param(self.tok_emb);
        let pe = g.param(self.pos_emb);
        let e = g.embedding(tok, &ids)?;
        let p = g.embedding(pe, &pos)?;
        let mut x = g.add(e, p)?;
        let mut dropout = dropout_fn(self.cfg.dropout, dropout_seed);
        for blk in &self.blocks {
            x = blk.forward(g, x, self.cfg.heads, &segs, false, &mut dropout)?;
        }
        let (gf, bf) = (g.param(self.lnf_g), g.param(self.lnf_b));
        g.layer_norm(x, gf, bf, LN_EPS)
    }

    /// `f · W_p`, row by row.
    pub fn project(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let w = g.param(self.projection);
        g.matmul(f, w)
    }

    /// Inference-mode features of one chunk, `s * d_e` values.
    pub fn encode_values(&self, store: &ParamStore, chunks: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(store);
        let f = self.encode(&mut g, chunks, None)?;
        let width = self.cfg.chunk_len * self.cfg.d_e;
        Ok(g.value(f).chunks(width).map(<[f64]>::to_vec).collect())
    }

    /// Starts the encoder from a pretrained `[V, d_m]` embedding table: token
    /// embeddings become `table · Q` for a random `Q` with orthonormal
    /// columns, and the projection becomes `Qᵀ`, so projected features begin
    /// in the table's coordinate frame.
    pub fn init_from_embeddings<R: Rng + ?Sized>(&self, store: &mut ParamStore, table: &Tensor, rng: &mut R) -> Result<()> {
        let (v, d_e, d_m) = (self.cfg.vocab_size, self.cfg.d_e, self.cfg.d_model);
        if table.shape != [v, d_m] {
            return Err(Error::Dimension(format!("embedding table {:?}, encoder expects [{v}, {d_m}]", table.shape)));
        }
        if d_e > d_m {
            return Err(Error::Config(format!("d_e {d_e} exceeds d_m {d_m}; no orthonormal frame")));
        }
        // Gram-Schmidt on random columns; q[c] is column c of Q.
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d_e);
        while q.len() < d_e {
            let mut col = Tensor::randn(&[d_m], 1.0, rng).data;
            for b in &q {
                let dot: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
                col.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(col.into_iter().map(|x| x / norm).collect());
            }
        }
        let emb = store.value_mut(self.tok_emb);
        for t in 0..v {
            let row = table.row(t);
            for (c, qc) in q.iter().enumerate() {
                emb.data[t * d_e + c] = row.iter().zip(qc).map(|(x, y)| x * y).sum();
            }
        }
        let proj = store.value_mut(self.projection);
        for (c, qc) in q.iter().enumerate() {
            proj.data[c * d_m..(c + 1) * d_m].copy_from_slice(qc);
        }
        Ok(())
    }

    /// Version stamp of the encoder body: changes whenever any of its
    /// parameters change.
    pub fn stamp(&self, store: &ParamStore) -> u64 {
        let mut w = ByteWriter::new();
        for id in self.body_ids() {
            w.str(&store.get(id).name);
            w.tensor(store.value(id));
        }
        fingerprint(&w.buf)
    }
}
