use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::layers::{check_shape, dropout_fn, param_id, Block, LN_EPS};
use crate::numerics::{GradPolicy, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_pos: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 2048,
            d_model: 64,
            layers: 4,
            heads: 4,
            ff_width: 256,
            max_pos: 128,
            dropout: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 4 || self.max_pos == 0 || self.ff_width == 0 {
            return Err(Error::Config("vocab_size, max_pos and ff_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-LN decoder-only transformer with learned absolute positions and an
/// output head tied to the token embedding. Parameters live in a caller's
/// [`ParamStore`] under the `backbone.` prefix.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

pub const PREFIX: &str = "backbone.";

/// Injection sites of one layer: sequence id and position of each row.
#[derive(Debug, Clone, Copy)]
pub struct Sites<'a> {
    pub seq: &'a [usize],
    pub pos: &'a [usize],
}

/// Rewrites hidden states at injection sites.
pub trait Hook {
    /// `states` holds one row per site (pre-injection values). Returns the
    /// additive update, same shape as `states`.
    fn update(&mut self, g: &mut Graph, layer: usize, sites: Sites, states: Var) -> Result<Var>;
}

/// Where a [`Hook`] fires during one forward pass.
pub struct Injection<'h> {
    /// 1-based layer indices, after whose output the hook runs.
    pub layers: Vec<usize>,
    /// Positions to rewrite, per input sequence.
    pub positions: Vec<Vec<usize>>,
    /// Id reported to the hook for each input sequence.
    pub seq_ids: Vec<usize>,
    pub hook: &'h mut dyn Hook,
}

/// Recorded per-layer activations of a packed batch.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    /// Recorded layer indices, strictly increasing.
    pub layers: Vec<usize>,
    /// `[T, d]` per recorded layer, sequences stacked.
    pub states: Vec<Tensor>,
    /// `(offset, len)` of each sequence in the packed rows.
    pub segs: Vec<(usize, usize)>,
}

impl HiddenStates {
    /// Copy of `H[b, pos, layer, :]`.
    pub fn decision_state(&self, b: usize, layer: usize, pos: usize) -> Result<Vec<f64>> {
        let &(off, len) =
            self.segs.get(b).ok_or_else(|| Error::Index(format!("batch index {b} of {}", self.segs.len())))?;
        if pos >= len {
            return Err(Error::Index(format!("position {pos} of a {len}-token sequence")));
        }
        let li = self
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::Index(format!("layer {layer} was not recorded")))?;
        Ok(self.states[li].row(off + pos).to_vec())
    }
}

pub struct ForwardOutput {
    /// `[R, V]` logits for the requested rows (all rows if none requested).
    pub logits: Var,
    /// Packed row index behind each logit row.
    pub rows: Vec<usize>,
    pub hidden: HiddenStates,
    pub segs: Vec<(usize, usize)>,
}

/// Dropout configuration for a training-mode pass.
#[derive(Debug, Clone, Copy)]
pub struct Train {
    pub seed: u64,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v, p) = (cfg.d_model, cfg.ff_width, cfg.vocab_size, cfg.max_pos);
        let std = 0.02;
        let out_std = std / (2.0 * cfg.layers as f64).sqrt();
        let tok_emb = store.add(format!("{PREFIX}tok_emb"), Tensor::randn(&[v, d], std, rng))?;
        let pos_emb = store.add(format!("{PREFIX}pos_emb"), Tensor::randn(&[p, d], std, rng))?;
        let blocks = (1..=cfg.layers)
            .map(|l| Block::new(store, &format!("{PREFIX}l{l}."), d, f, std, out_std, rng))
            .collect::<Result<Vec<_>>>()?;
        let lnf_g = store.add(format!("{PREFIX}lnf.g"), Tensor::full(&[d], 1.0))?;
        let lnf_b = store.add(format!("{PREFIX}lnf.b"), Tensor::zeros(&[d]))?;
        Ok(Backbone { cfg, tok_emb, pos_emb, blocks, lnf_g, lnf_b })
    }

    /// Re-attaches to parameters already present in `store` (e.g. loaded).
    pub fn attach(cfg: BackboneConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let blocks = (1..=cfg.layers)
            .map(|l| Block::attach(store, &format!("{PREFIX}l{l}.")))
            .collect::<Result<Vec<_>>>()?;
        let bb = Backbone {
            tok_emb: param_id(store, PREFIX, "tok_emb")?,
            pos_emb: param_id(store, PREFIX, "pos_emb")?,
            lnf_g: param_id(store, PREFIX, "lnf.g")?,
            lnf_b: param_id(store, PREFIX, "lnf.b")?,
            blocks,
            cfg,
        };
        let (v, d, p) = (bb.cfg.vocab_size, bb.cfg.d_model, bb.cfg.max_pos);
        check_shape(store, bb.tok_emb, &[v, d])?;
        check_shape(store, bb.pos_emb, &[p, d])?;
        Ok(bb)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }

    /// Packed forward pass over `seqs`.
    ///
    /// `logit_rows` restricts the output head to the given packed rows;
    /// `record` lists layers whose (post-hook) outputs are kept. Layer 0 is
    /// the embedding output.
    pub fn forward(
        &self,
        g: &mut Graph,
        seqs: &[&[TokenId]],
        mut injection: Option<Injection>,
        record: &[usize],
        logit_rows: Option<&[usize]>,
        train: Option<Train>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        if record.windows(2).any(|w| w[0] >= w[1]) || record.iter().any(|&l| l > cfg.layers) {
            return Err(Error::Config(format!("record layers {record:?} must ascend within 0..={}", cfg.layers)));
        }
        let mut segs = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.len() > cfg.max_pos {
                return Err(Error::Index(format!(
                    "sequence of {} tokens exceeds max position {}",
                    s.len(),
                    cfg.max_pos
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            segs.push((ids.len(), s.len()));
            ids.extend(s.iter().map(|&t| t as usize));
            pos.extend(0..s.len());
        }
        let mut sites: Vec<usize> = Vec::new();
        let mut site_seq: Vec<usize> = Vec::new();
        let mut site_pos: Vec<usize> = Vec::new();
        if let Some(inj) = &injection {
            if inj.positions.len() != seqs.len() || inj.seq_ids.len() != seqs.len() {
                return Err(Error::Dimension(format!(
                    "injection describes {} sequences, batch has {}",
                    inj.positions.len(),
                    seqs.len()
                )));
            }
            if let Some(&l) = inj.layers.iter().find(|&&l| l == 0 || l > cfg.layers) {
                return Err(Error::Index(format!("fusion layer {l} outside 1..={}", cfg.layers)));
            }
            for (b, ps) in inj.positions.iter().enumerate() {
                for &p in ps {
                    if p >= segs[b].1 {
                        return Err(Error::Index(format!(
                            "injection position {p} in a {}-token sequence",
                            segs[b].1
                        )));
                    }
                    sites.push(segs[b].0 + p);
                    site_seq.push(inj.seq_ids[b]);
                    site_pos.push(p);
                }
            }
        }

        let mut hidden = HiddenStates { layers: Vec::new(), states: Vec::new(), segs: segs.clone() };
        let tok = g.param(self.tok_emb);
        let pe = g.param(self.pos_emb);
        let e = g.embedding(tok, &ids)?;
        let p = g.embedding(pe, &pos)?;
        let mut x = g.add(e, p)?;
        let mut dropout = dropout_fn(cfg.dropout, train.map(|t| t.seed));
        x = dropout(g, x)?;
        if record.first() == Some(&0) {
            hidden.layers.push(0);
            hidden.states.push(g.tensor(x));
        }
        for (li, blk) in self.blocks.iter().enumerate() {
            let layer = li + 1;
            x = blk.forward(g, x, cfg.heads, &segs, true, &mut dropout)?;
            if let Some(inj) = injection.as_mut() {
                if !sites.is_empty() && inj.layers.contains(&layer) {
                    let states = g.gather_rows(x, &sites)?;
                    let at = Sites { seq: &site_seq, pos: &site_pos };
                    let delta = inj.hook.update(g, layer, at, states)?;
                    x = g.add_rows_at(x, &sites, delta)?;
                }
            }
            if record.contains(&layer) {
                hidden.layers.push(layer);
                hidden.states.push(g.tensor(x));
            }
        }
        let rows: Vec<usize> = match logit_rows {
            Some(r) => r.to_vec(),
            None => (0..ids.len()).collect(),
        };
        let xs = if logit_rows.is_some() { g.gather_rows(x, &rows)? } else { x };
        let (gf, bf) = (g.param(self.lnf_g), g.param(self.lnf_b));
        let y = g.layer_norm(xs, gf, bf, LN_EPS)?;
        let logits = g.matmul_t(y, tok, false, true)?;
        Ok(ForwardOutput { logits, rows, hidden, segs })
    }

    /// Last-row logits of each sequence, no hooks, inference mode.
    pub fn next_token_logits(&self, store: &ParamStore, seqs: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store, GradPolicy::None);
        let last = last_rows(seqs);
        let out = self.forward(&mut g, seqs, None, &[], Some(&last), None)?;
        Ok(split_rows(g.value(out.logits), self.cfg.vocab_size))
    }
}

/// Packed row of each sequence's final token.
pub fn last_rows(seqs: &[&[TokenId]]) -> Vec<usize> {
    let mut off = 0;
    seqs.iter()
        .map(|s| {
            off += s.len();
            off - 1
        })
        .collect()
}

pub fn split_rows(data: &[f64], width: usize) -> Vec<Vec<f64>> {
    data.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Factory for the hook used at each generation step. `step` counts from 0
/// (the prefill pass).
pub trait StepHook {
    fn layers(&self) -> Vec<usize>;
    fn hook(&mut self, step: usize) -> &mut dyn Hook;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Stop a sequence once it emits `<eos>` (which is not returned).
    pub stop_at_eos: bool,
}

/// Batched greedy decoding without a key/value cache. Each step re-runs the
/// whole prefix; the hook (if any) re-fires at every sequence's current last
/// position. Sequences also stop when they reach the position limit.
pub fn generate(
    bb: &Backbone,
    store: &ParamStore,
    prompts: &[Vec<TokenId>],
    mut hooks: Option<&mut dyn StepHook>,
    opts: GenerateOptions,
) -> Result<Vec<Vec<TokenId>>> {
    if let Some(i) = prompts.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("prompt {i} is empty")));
    }
    let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].len() < bb.cfg.max_pos).collect();
    for step in 0..opts.max_new {
        if active.is_empty() {
            break;
        }
        let batch: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let last = last_rows(&batch);
        let mut g = Graph::new(store, GradPolicy::None);
        let fwd = match hooks.as_deref_mut() {
            Some(h) => {
                let layers = h.layers();
                let injection = Injection {
                    layers,
                    positions: batch.iter().map(|s| vec![s.len() - 1]).collect(),
                    seq_ids: active.clone(),
                    hook: h.hook(step),
                };
                bb.forward(&mut g, &batch, Some(injection), &[], Some(&last), None)?
            }
            None => bb.forward(&mut g, &batch, None, &[], Some(&last), None)?,
        };
        let logits = g.value(fwd.logits);
        let v = bb.cfg.vocab_size;
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            let t = argmax(&logits[j * v..(j + 1) * v]) as TokenId;
            if opts.stop_at_eos && t == EOS {
                continue;
            }
            out[i].push(t);
            seqs[i].push(t);
            if seqs[i].len() < bb.cfg.max_pos {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}
