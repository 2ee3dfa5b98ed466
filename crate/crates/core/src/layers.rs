//! Transformer building blocks shared by the backbone and the context encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Pre-LN transformer block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const NAMES: [&str; 12] =
    ["ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2"];

impl Block {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ff: usize,
        std: f64,
        out_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes: [(&[usize], f64, f64); 12] = [
            (&[d], 0.0, 1.0),
            (&[d], 0.0, 0.0),
            (&[d, d], std, 0.0),
            (&[d, d], std, 0.0),
            (&[d, d], std, 0.0),
            (&[d, d], out_std, 0.0),
            (&[d], 0.0, 1.0),
            (&[d], 0.0, 0.0),
            (&[d, ff], std, 0.0),
            (&[ff], 0.0, 0.0),
            (&[ff, d], out_std, 0.0),
            (&[d], 0.0, 0.0),
        ];
        let mut ids = Vec::with_capacity(12);
        for (name, (shape, s, fill)) in NAMES.iter().zip(shapes) {
            let t = if s > 0.0 { Tensor::randn(shape, s, rng) } else { Tensor::full(shape, fill) };
            ids.push(store.add(format!("{prefix}{name}"), t)?);
        }
        Ok(Self::from_ids(&ids))
    }

    pub(crate) fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let ids = NAMES
            .iter()
            .map(|n| {
                let full = format!("{prefix}{n}");
                store.id(&full).ok_or_else(|| Error::Incompatible(format!("missing parameter {full}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        Block {
            ln1_g: ids[0],
            ln1_b: ids[1],
            wq: ids[2],
            wk: ids[3],
            wv: ids[4],
            wo: ids[5],
            ln2_g: ids[6],
            ln2_b: ids[7],
            w1: ids[8],
            b1: ids[9],
            w2: ids[10],
            b2: ids[11],
        }
    }

    pub(crate) fn ids(&self) -> [ParamId; 12] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.ln2_g, self.ln2_b, self.w1,
            self.b1, self.w2, self.b2,
        ]
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        heads: usize,
        segs: &[(usize, usize)],
        causal: bool,
        dropout: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
    ) -> Result<Var> {
        let (g1, b1) = (g.param(self.ln1_g), g.param(self.ln1_b));
        let a = g.layer_norm(x, g1, b1, LN_EPS)?;
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(a, wq)?;
        let k = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        let att = g.attention(q, k, v, heads, segs, causal)?;
        let o = g.matmul(att, wo)?;
        let o = dropout(g, o)?;
        let x = g.add(x, o)?;
        let (g2, b2) = (g.param(self.ln2_g), g.param(self.ln2_b));
        let m = g.layer_norm(x, g2, b2, LN_EPS)?;
        let (w1, bias1, w2, bias2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let f = g.matmul(m, w1)?;
        let f = g.add_bias(f, bias1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, bias2)?;
        let f = dropout(g, f)?;
        g.add(x, f)
    }
}

/// Dropout closure with a per-call seed sequence; identity when `seed` is
/// `None` or `p == 0`.
pub(crate) fn dropout_fn(p: f64, seed: Option<u64>) -> impl FnMut(&mut Graph, Var) -> Result<Var> {
    let mut state = seed;
    move |g: &mut Graph, v: Var| match state.as_mut() {
        Some(s) if p > 0.0 => {
            *s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            g.dropout(v, p, true, *s)
        }
        _ => Ok(v),
    }
}

/// Looks up `prefix + name` in `store`.
pub(crate) fn param_id(store: &ParamStore, prefix: &str, name: &str) -> Result<ParamId> {
    let full = format!("{prefix}{name}");
    store.id(&full).ok_or_else(|| Error::Incompatible(format!("missing parameter {full}")))
}

/// Fails with a dimension error naming the parameter if shapes differ.
pub(crate) fn check_shape(store: &ParamStore, id: ParamId, want: &[usize]) -> Result<()> {
    let got = &store.value(id).shape;
    if got[..] != want[..] {
        return Err(Error::Dimension(format!(
            "parameter {}: shape {got:?}, config expects {want:?}",
            store.get(id).name
        )));
    }
    Ok(())
}
