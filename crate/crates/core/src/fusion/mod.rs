//! Aggregation of weighted token features into one evidence vector and its
//! additive injection into the backbone at the fusion layer(s).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    generate, Backbone, BackboneConfig, ForwardOutput, GenerateOptions, Hook, Injection, Sites, StepHook, Train,
};
use crate::context_encoder::{pool_embeddings, ContextEncoder, EncoderConfig, FeatureCache, Pool};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::gated_filter::{apply_mask, dynamic_gate, weight_features, GateParams, TokenWeights};
use crate::layers::{check_shape, param_id, LN_EPS};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PREFIX: &str = "fusion.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// 1-based backbone layers after which evidence is injected.
    pub layers: Vec<usize>,
    pub k: usize,
    pub s: usize,
    pub dropout: f64,
    pub alpha_init: f64,
    /// Reuse the prefill-time update for every generated token instead of
    /// recomputing gates at each step.
    pub freeze_after_prefill: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            layers: vec![4],
            k: 3,
            s: 16,
            dropout: 0.1,
            alpha_init: 0.5,
            freeze_after_prefill: false,
        }
    }
}

impl FusionConfig {
    pub fn n(&self) -> usize {
        self.k * self.s
    }

    pub fn validate(&self, total_layers: usize) -> Result<()> {
        if self.layers.is_empty() || self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("fusion layers {:?} must be non-empty and ascending", self.layers)));
        }
        if let Some(l) = self.layers.iter().find(|&&l| l == 0 || l > total_layers) {
            return Err(Error::Config(format!("fusion layer {l} outside 1..={total_layers}")));
        }
        if self.k == 0 || self.s == 0 {
            return Err(Error::Config("k and s must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fusion dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// The last `n` layers of an `total`-layer stack, clamped to the stack.
pub fn last_layers(n: usize, total: usize) -> Vec<usize> {
    let n = n.clamp(1, total);
    (total - n + 1..=total).collect()
}

/// Scale `α` and layer-norm affine of one fusion layer.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub alpha: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, layer: usize, d: usize, alpha: f64) -> Result<Self> {
        let p = format!("{PREFIX}l{layer}.");
        Ok(FusionParams {
            alpha: store.add(format!("{p}alpha"), Tensor::scalar(alpha))?,
            ln_g: store.add(format!("{p}ln.g"), Tensor::full(&[d], 1.0))?,
            ln_b: store.add(format!("{p}ln.b"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn attach(store: &ParamStore, layer: usize, d: usize) -> Result<Self> {
        let p = format!("{PREFIX}l{layer}.");
        let fp = FusionParams {
            alpha: param_id(store, &p, "alpha")?,
            ln_g: param_id(store, &p, "ln.g")?,
            ln_b: param_id(store, &p, "ln.b")?,
        };
        check_shape(store, fp.alpha, &[1])?;
        check_shape(store, fp.ln_g, &[d])?;
        check_shape(store, fp.ln_b, &[d])?;
        Ok(fp)
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.alpha, self.ln_g, self.ln_b]
    }
}

/// `r = LayerNorm(Σ_j Dropout(Ĉ_j))` over groups of `n` rows.
pub fn aggregate(g: &mut Graph, c_hat: Var, n: usize, fp: &FusionParams, p: f64, seed: Option<u64>) -> Result<Var> {
    let x = match seed {
        Some(s) => g.dropout(c_hat, p, true, s)?,
        None => c_hat,
    };
    let sum = g.segment_sum(x, n)?;
    let (lg, lb) = (g.param(fp.ln_g), g.param(fp.ln_b));
    g.layer_norm(sum, lg, lb, LN_EPS)
}

/// The additive update `α · r`.
pub fn inject(g: &mut Graph, r: Var, fp: &FusionParams) -> Result<Var> {
    let a = g.param(fp.alpha);
    g.scale_by(r, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReFilterConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl ReFilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        self.fusion.validate(self.backbone.layers)?;
        if self.encoder.chunk_len != self.fusion.s {
            return Err(Error::Config(format!(
                "encoder chunk length {} differs from fusion s {}",
                self.encoder.chunk_len, self.fusion.s
            )));
        }
        if self.encoder.d_model != self.backbone.d_model {
            return Err(Error::Config("encoder projection width must equal backbone d_model".into()));
        }
        if self.encoder.vocab_size != self.backbone.vocab_size {
            return Err(Error::Config("encoder and backbone vocabularies differ".into()));
        }
        Ok(())
    }
}

/// Frozen backbone plus context encoder, per-layer gates and fusion
/// parameters, all resolved against one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ReFilter {
    pub cfg: ReFilterConfig,
    pub backbone: Backbone,
    pub encoder: ContextEncoder,
    pub gates: Vec<GateParams>,
    pub fusion: Vec<FusionParams>,
}

impl ReFilter {
    /// Adds encoder, gate and fusion parameters to a store that already
    /// holds the backbone.
    pub fn new<R: Rng + ?Sized>(cfg: ReFilterConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::attach(cfg.backbone.clone(), store)?;
        let encoder = ContextEncoder::new(cfg.encoder.clone(), store, rng)?;
        let (d, n) = (cfg.backbone.d_model, cfg.fusion.n());
        let mut gates = Vec::new();
        let mut fusion = Vec::new();
        for &l in &cfg.fusion.layers {
            gates.push(GateParams::new(store, l, d, n, rng)?);
            fusion.push(FusionParams::new(store, l, d, cfg.fusion.alpha_init)?);
        }
        Ok(ReFilter { cfg, backbone, encoder, gates, fusion })
    }

    pub fn attach(cfg: ReFilterConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::attach(cfg.backbone.clone(), store)?;
        let encoder = ContextEncoder::attach(cfg.encoder.clone(), store)?;
        let (d, n) = (cfg.backbone.d_model, cfg.fusion.n());
        let gates = cfg.fusion.layers.iter().map(|&l| GateParams::attach(store, l, d, n)).collect::<Result<_>>()?;
        let fusion = cfg.fusion.layers.iter().map(|&l| FusionParams::attach(store, l, d)).collect::<Result<_>>()?;
        Ok(ReFilter { cfg, backbone, encoder, gates, fusion })
    }

    /// Encoder body, projection, gates, masks, α and fusion layer norms.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.body_ids();
        ids.push(self.encoder.projection_id());
        for (gp, fp) in self.gates.iter().zip(&self.fusion) {
            ids.extend(gp.ids());
            ids.extend(fp.ids());
        }
        ids
    }

    /// Marks the backbone frozen and everything in [`Self::trainable_ids`]
    /// trainable.
    pub fn set_trainable(&self, store: &mut ParamStore) {
        for id in self.backbone.param_ids() {
            store.get_mut(id).trainable = false;
        }
        for id in self.trainable_ids() {
            store.get_mut(id).trainable = true;
        }
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.cfg
            .fusion
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::Index(format!("layer {layer} is not a fusion layer")))
    }

    /// Backbone forward with the fusion hook wired in at every configured
    /// layer and at `positions` of each sequence. Without any pool the hook
    /// is not installed at all.
    pub fn fused_forward(
        &self,
        g: &mut Graph,
        seqs: &[&[TokenId]],
        positions: Vec<Vec<usize>>,
        hook: &mut FusionHook,
        record: &[usize],
        logit_rows: Option<&[usize]>,
        train: Option<Train>,
    ) -> Result<ForwardOutput> {
        hook.begin_graph();
        if !hook.has_any_pool() {
            return self.backbone.forward(g, seqs, None, record, logit_rows, train);
        }
        let injection = Injection {
            layers: self.cfg.fusion.layers.clone(),
            positions,
            seq_ids: (0..seqs.len()).collect(),
            hook,
        };
        self.backbone.forward(g, seqs, Some(injection), record, logit_rows, train)
    }
}

/// Weights and injection summaries recorded while generating.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub weights: Vec<TokenWeights>,
    pub injections: Vec<InjectionRecord>,
}

impl ReFilter {
    /// Greedy decoding with fusion. `pools[b]` is the retrieval of prompt
    /// `b`; `None` leaves that prompt to the plain backbone.
    pub fn generate(
        &self,
        store: &ParamStore,
        prompts: &[Vec<TokenId>],
        pools: &[Option<Pool>],
        cache: Option<&FeatureCache>,
        opts: GenerateOptions,
        record: bool,
    ) -> Result<(Vec<Vec<TokenId>>, Diagnostics)> {
        if pools.len() != prompts.len() {
            return Err(Error::Dimension(format!("{} pools for {} prompts", pools.len(), prompts.len())));
        }
        let mut list = Vec::new();
        let mut pool_of_seq = Vec::with_capacity(pools.len());
        for p in pools {
            pool_of_seq.push(p.as_ref().map(|p| {
                list.push(p);
                list.len() - 1
            }));
        }
        if list.is_empty() {
            return Ok((generate(&self.backbone, store, prompts, None, opts)?, Diagnostics::default()));
        }
        let mut hook = FusionHook::new(self, list, pool_of_seq, cache, None, record)?;
        let out = generate(&self.backbone, store, prompts, Some(&mut hook), opts)?;
        Ok((out, Diagnostics { weights: hook.weights, injections: hook.injections }))
    }
}

/// Summary of one injection, for run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub seq: usize,
    pub layer: usize,
    pub position: usize,
    pub r_norm: f64,
    pub alpha: f64,
}

/// Hook computing `α · LayerNorm(Σ_j μ_j γ_j C_j)` for each injection site.
pub struct FusionHook<'m> {
    model: &'m ReFilter,
    pools: Vec<&'m Pool>,
    pool_of_seq: Vec<Option<usize>>,
    cache: Option<&'m FeatureCache>,
    train_seed: Option<u64>,
    record: bool,
    c: Option<Var>,
    c_values: Option<Tensor>,
    frozen: HashMap<(usize, usize), Vec<f64>>,
    step: usize,
    calls: u64,
    /// Gate tensors of the current graph, for the sparsity loss.
    pub gammas: Vec<Var>,
    pub weights: Vec<TokenWeights>,
    pub injections: Vec<InjectionRecord>,
}

impl<'m> FusionHook<'m> {
    /// `pool_of_seq[b]` selects the pool of sequence `b` (None: no
    /// retrieval, that sequence is left untouched). `train_seed` enables
    /// dropout and gradient flow through the encoder.
    pub fn new(
        model: &'m ReFilter,
        pools: Vec<&'m Pool>,
        pool_of_seq: Vec<Option<usize>>,
        cache: Option<&'m FeatureCache>,
        train_seed: Option<u64>,
        record: bool,
    ) -> Result<Self> {
        let n = model.cfg.fusion.n();
        if let Some(p) = pools.iter().find(|p| p.n() != n) {
            return Err(Error::Dimension(format!("pool of {} tokens, fusion configured for N = {n}", p.n())));
        }
        if let Some(&bad) = pool_of_seq.iter().flatten().find(|&&i| i >= pools.len()) {
            return Err(Error::Index(format!("pool index {bad} of {}", pools.len())));
        }
        Ok(FusionHook {
            model,
            pools,
            pool_of_seq,
            cache,
            train_seed,
            record,
            c: None,
            c_values: None,
            frozen: HashMap::new(),
            step: 0,
            calls: 0,
            gammas: Vec::new(),
            weights: Vec::new(),
            injections: Vec::new(),
        })
    }

    /// One pool per sequence, every sequence retrieving.
    pub fn per_sequence(
        model: &'m ReFilter,
        pools: &'m [Pool],
        cache: Option<&'m FeatureCache>,
        train_seed: Option<u64>,
        record: bool,
    ) -> Result<Self> {
        Self::new(model, pools.iter().collect(), (0..pools.len()).map(Some).collect(), cache, train_seed, record)
    }

    pub fn has_any_pool(&self) -> bool {
        self.pool_of_seq.iter().any(Option::is_some)
    }

    /// Forgets graph-bound state; call before each new graph.
    pub fn begin_graph(&mut self) {
        self.c = None;
        self.gammas.clear();
    }

    fn embeddings(&mut self, g: &mut Graph) -> Result<Var> {
        if let Some(c) = self.c {
            return Ok(c);
        }
        let c = match &self.c_values {
            Some(t) => g.constant(t.clone()),
            None => {
                let seed = self.train_seed.map(|s| s ^ 0x5eed_0e2c);
                let c = pool_embeddings(g, &self.model.encoder, &self.pools, self.cache, true, seed)?;
                if self.train_seed.is_none() {
                    self.c_values = Some(g.tensor(c));
                }
                c
            }
        };
        self.c = Some(c);
        Ok(c)
    }
}

impl Hook for FusionHook<'_> {
    fn update(&mut self, g: &mut Graph, layer: usize, sites: Sites, states: Var) -> Result<Var> {
        let slot = self.model.slot(layer)?;
        let d = self.model.cfg.backbone.d_model;
        let n = self.model.cfg.fusion.n();
        let count = sites.seq.len();
        let present: Vec<usize> =
            (0..count).filter(|&i| self.pool_of_seq.get(sites.seq[i]).copied().flatten().is_some()).collect();
        if present.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[count, d])));
        }
        if self.model.cfg.fusion.freeze_after_prefill && self.step > 0 {
            let mut data = vec![0.0; count * d];
            for &i in &present {
                if let Some(v) = self.frozen.get(&(sites.seq[i], layer)) {
                    data[i * d..(i + 1) * d].copy_from_slice(v);
                }
            }
            return Ok(g.constant(Tensor::new(vec![count, d], data)?));
        }
        let c = self.embeddings(g)?;
        let mut rows = Vec::with_capacity(present.len() * n);
        for &i in &present {
            let p = self.pool_of_seq[sites.seq[i]].unwrap();
            rows.extend(p * n..(p + 1) * n);
        }
        let c_sites = g.gather_rows(c, &rows)?;
        let h = if present.len() == count { states } else { g.gather_rows(states, &present)? };
        let gp = self.model.gates[slot];
        let fp = self.model.fusion[slot];
        let gamma = dynamic_gate(g, c_sites, h, n, &gp)?;
        let mu = g.param(gp.mu);
        let w_t = apply_mask(g, gamma, mu)?;
        let c_hat = weight_features(g, c_sites, w_t)?;
        self.calls += 1;
        let seed = self.train_seed.map(|s| s.wrapping_add(self.calls.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let r = aggregate(g, c_hat, n, &fp, self.model.cfg.fusion.dropout, seed)?;
        let mut delta = inject(g, r, &fp)?;
        self.gammas.push(gamma);

        let av = g.param(fp.alpha);
        let alpha = g.value(av)[0];
        let (rv, gv, wv, muv) = (g.value(r), g.value(gamma), g.value(w_t), g.value(mu));
        for (j, &i) in present.iter().enumerate() {
            let (seq, position) = (sites.seq[i], sites.pos[i]);
            let r_norm = rv[j * d..(j + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            if self.record {
                self.injections.push(InjectionRecord { seq, layer, position, r_norm, alpha });
                self.weights.push(TokenWeights {
                    seq,
                    layer,
                    position,
                    gamma: gv[j * n..(j + 1) * n].to_vec(),
                    mu: muv.to_vec(),
                    w_t: wv[j * n..(j + 1) * n].to_vec(),
                });
            }
        }
        if self.model.cfg.fusion.freeze_after_prefill && self.step == 0 {
            let dv = g.value(delta).to_vec();
            for (j, &i) in present.iter().enumerate() {
                self.frozen.insert((sites.seq[i], layer), dv[j * d..(j + 1) * d].to_vec());
            }
        }
        if present.len() != count {
            let zeros = g.constant(Tensor::zeros(&[count, d]));
            delta = g.add_rows_at(zeros, &present, delta)?;
        }
        Ok(delta)
    }
}

impl StepHook for FusionHook<'_> {
    fn layers(&self) -> Vec<usize> {
        self.model.cfg.fusion.layers.clone()
    }

    fn hook(&mut self, step: usize) -> &mut dyn Hook {
        self.begin_graph();
        self.step = step;
        self
    }
}
