//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value plus whatever it needs for the backward pass
//! (softmax probabilities, normalisation statistics, dropout masks). Parameter
//! leaves borrow their values from the [`ParamStore`] instead of copying them.
//!
//! Row-major 2-D layout is assumed throughout: a tensor of shape
//! `[.., cols]` is treated as `rows x cols`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, gemm_strided, Mat};
use super::tensor::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Pre-activation range accepted by [`Graph::sigmoid`]; keeps outputs strictly
/// inside (0, 1) in f64.
pub const SIGMOID_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradPolicy {
    /// Only parameters flagged trainable.
    Trainable,
    /// Every parameter, regardless of the trainable flag (gradient checks).
    All,
    /// Nothing; pure inference.
    None,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segs: Vec<(usize, usize)>, probs: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    AddRowsAt { x: Var, rows: Vec<usize>, delta: Var },
    ConcatBroadcast { c: Var, h: Var, n: usize },
    ConcatRows(Vec<Var>),
    MulTiled { x: Var, m: Var },
    ScaleRows { x: Var, w: Var },
    SegmentSum { x: Var, n: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Mean(Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    policy: GradPolicy,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    if c == 0 {
        (0, 0)
    } else {
        (n / c, c)
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, policy: GradPolicy) -> Self {
        Graph { store, policy, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, GradPolicy::None)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad =
            self.policy != GradPolicy::None && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.store.value(id).data,
            _ => &node.data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.shape(v).to_vec(), data: self.value(v).to_vec() }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, &[])
    }

    /// Leaf referencing a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let needs_grad = match self.policy {
            GradPolicy::All => true,
            GradPolicy::Trainable => p.trainable,
            GradPolicy::None => false,
        };
        self.nodes.push(Node {
            shape: p.tensor.shape.clone(),
            data: Vec::new(),
            op: Op::Param(id),
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `op(a) · op(b)` where `op` optionally transposes a stored 2-D matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = rows_cols(self.shape(a));
        let (br, bc) = rows_cols(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?}{} and {:?}{}: inner extents {} vs {}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" },
                k,
                k2
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    // ── element-wise ─────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        let bv = self.value(bias);
        if bv.len() != c {
            return Err(Error::Dimension(format!(
                "bias {:?} for rows of width {c}",
                self.shape(bias)
            )));
        }
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!("scale_by needs a scalar, got {:?}", self.shape(s))));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Logistic function with the pre-activation clamped to ±[`SIGMOID_CLAMP`].
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm over width {c} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout. Identity (no new node) outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, seed);
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x]))
    }

    // ── indexing and structure ───────────────────────────────────────

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rows_cols(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of a {r}-row tensor")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Copy of `x` with `delta[i]` added to row `rows[i]`.
    pub fn add_rows_at(&mut self, x: Var, rows: &[usize], delta: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        let (dr, dc) = rows_cols(self.shape(delta));
        if dr != rows.len() || dc != c {
            return Err(Error::Dimension(format!(
                "add_rows_at: {} rows of width {c} vs delta {:?}",
                rows.len(),
                self.shape(delta)
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of a {r}-row tensor")));
        }
        let mut out = self.value(x).to_vec();
        let dv = self.value(delta);
        for (i, &row) in rows.iter().enumerate() {
            for j in 0..c {
                out[row * c + j] += dv[i * c + j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::AddRowsAt { x, rows: rows.to_vec(), delta },
            &[x, delta],
        ))
    }

    /// For `c` of shape `[S*n, d]` and `h` of shape `[S, e]`, row `s*n + j`
    /// of the output is `[c[s*n + j]; h[s]]`.
    pub fn concat_broadcast(&mut self, c: Var, h: Var, n: usize) -> Result<Var> {
        let (cr, d) = rows_cols(self.shape(c));
        let (s, e) = rows_cols(self.shape(h));
        if n == 0 || cr != s * n {
            return Err(Error::Dimension(format!(
                "concat_broadcast: {:?} rows against {s} states of {n} tokens",
                self.shape(c)
            )));
        }
        let (cv, hv) = (self.value(c), self.value(h));
        let mut out = Vec::with_capacity(cr * (d + e));
        for row in 0..cr {
            out.extend_from_slice(&cv[row * d..(row + 1) * d]);
            let si = row / n;
            out.extend_from_slice(&hv[si * e..(si + 1) * e]);
        }
        Ok(self.push(vec![cr, d + e], out, Op::ConcatBroadcast { c, h, n }, &[c, h]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| rows_cols(self.shape(p)).1).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = rows_cols(self.shape(p));
            if pc != c {
                return Err(Error::Dimension(format!("concat_rows width {pc} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `x[i] * m[i % len(m)]`.
    pub fn mul_tiled(&mut self, x: Var, m: Var) -> Result<Var> {
        let nm = self.value(m).len();
        if nm == 0 || !self.value(x).len().is_multiple_of(nm) {
            return Err(Error::Dimension(format!(
                "mul_tiled: {:?} is not a whole number of {:?} tiles",
                self.shape(x),
                self.shape(m)
            )));
        }
        let mv = self.value(m);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v * mv[i % nm]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulTiled { x, m }, &[x, m]))
    }

    /// Scales row `r` of `x` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(w).len() != r {
            return Err(Error::Dimension(format!(
                "scale_rows: {:?} rows with {:?} weights",
                self.shape(x),
                self.shape(w)
            )));
        }
        let wv = self.value(w);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v * wv[i / c]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// Sums consecutive groups of `n` rows: `[S*n, d] -> [S, d]`.
    pub fn segment_sum(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, d) = rows_cols(self.shape(x));
        if n == 0 || r % n != 0 {
            return Err(Error::Dimension(format!("segment_sum of {r} rows in groups of {n}")));
        }
        let s = r / n;
        let xv = self.value(x);
        let mut out = vec![0.0; s * d];
        for row in 0..r {
            let si = row / n;
            for j in 0..d {
                out[si * d + j] += xv[row * d + j];
            }
        }
        Ok(self.push(vec![s, d], out, Op::SegmentSum { x, n }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension(format!("reshape {:?} to {:?}", self.shape(x), shape)));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    // ── reductions and losses ────────────────────────────────────────

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        self.push(vec![1], vec![m], Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// With every row ignored the loss is defined as 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = rows_cols(self.shape(logits));
        if targets.len() != r {
            return Err(Error::Dimension(format!("{} targets for {r} logit rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {v}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..r {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            if let Some(t) = targets[i] {
                total += -(row[t] - max - z.ln());
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    // ── attention ────────────────────────────────────────────────────

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[T, d]` with the rows of several sequences stacked;
    /// `segs` lists `(offset, len)` for each sequence. Attention never crosses
    /// a segment boundary.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[(usize, usize)],
        causal: bool,
    ) -> Result<Var> {
        let (t, d) = rows_cols(self.shape(q));
        if rows_cols(self.shape(k)) != (t, d) || rows_cols(self.shape(v)) != (t, d) {
            return Err(Error::Dimension("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if segs.iter().any(|&(o, l)| o + l > t) {
            return Err(Error::Index("attention segment exceeds packed rows".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; t * d];
        let total: usize = segs.iter().map(|&(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut pofs = 0;
        for &(off, len) in segs {
            for h in 0..heads {
                let p = &mut probs[pofs..pofs + len * len];
                let base = off * d + h * dh;
                // scores = Q_h K_hᵀ
                gemm_strided(
                    len,
                    dh,
                    len,
                    scale,
                    Mat::new(qv, base, d, 1),
                    Mat::new(kv, base, 1, d),
                    0.0,
                    p,
                    0,
                    len,
                    1,
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let lim = if causal { i + 1 } else { len };
                    let max = row[..lim].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in &mut row[..lim] {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in &mut row[..lim] {
                        *x /= z;
                    }
                    for x in &mut row[lim..] {
                        *x = 0.0;
                    }
                }
                // out_h = P V_h
                gemm_strided(
                    len,
                    len,
                    dh,
                    1.0,
                    Mat::new(p, 0, len, 1),
                    Mat::new(vv, base, d, 1),
                    0.0,
                    &mut out,
                    base,
                    d,
                    1,
                );
                pofs += len * len;
            }
        }
        Ok(self.push(
            vec![t, d],
            out,
            Op::Attention { q, k, v, heads, segs: segs.to_vec(), probs },
            &[q, k, v],
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Back-propagates from a single-element `loss` and returns the gradient
    /// of every parameter leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", self.value(loss)[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.insert(*id, g.to_vec()),
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(da) = self.acc(grads, a) {
                    if !ta {
                        gemm(m, n, k, g, false, bv, !tb, da, 1.0);
                    } else {
                        gemm(k, n, m, bv, tb, g, true, da, 1.0);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    if !tb {
                        gemm(k, m, n, av, !ta, g, false, db, 1.0);
                    } else {
                        gemm(n, m, k, g, true, av, ta, db, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(db) = self.acc(grads, bias) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(da) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            &Op::ScaleBy { x, s } => {
                let sv = self.value(s)[0];
                let xv = self.value(x);
                if let Some(ds) = self.acc(grads, s) {
                    ds[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += sv * b);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                if let Some(dx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let xv = self.value(x);
                let y = &node.data;
                if let Some(dx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xv[i].abs() <= SIGMOID_CLAMP {
                            dx[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain);
                if let Some(dg) = self.acc(grads, *gain) {
                    for (row, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row[j] * xr[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, (row, xr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = row[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = row[j] * gv[j];
                            dx[i * c + j] += rstd[i] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.acc(grads, *table) {
                    let d = g.len() / ids.len().max(1);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let c = g.len() / rows.len().max(1);
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::AddRowsAt { x, rows, delta } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(dd) = self.acc(grads, *delta) {
                    let c = dd.len() / rows.len().max(1);
                    for (i, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            dd[i * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            &Op::ConcatBroadcast { c, h, n } => {
                let d = rows_cols(self.shape(c)).1;
                let e = rows_cols(self.shape(h)).1;
                let w = d + e;
                if let Some(dc) = self.acc(grads, c) {
                    for (row, gr) in g.chunks(w).enumerate() {
                        for j in 0..d {
                            dc[row * d + j] += gr[j];
                        }
                    }
                }
                if let Some(dh) = self.acc(grads, h) {
                    for (row, gr) in g.chunks(w).enumerate() {
                        let si = row / n;
                        for j in 0..e {
                            dh[si * e + j] += gr[d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut ofs = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.acc(grads, p) {
                        dp.iter_mut().zip(&g[ofs..ofs + len]).for_each(|(a, b)| *a += b);
                    }
                    ofs += len;
                }
            }
            &Op::MulTiled { x, m } => {
                let (xv, mv) = (self.value(x), self.value(m));
                let nm = mv.len();
                if let Some(dx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * mv[i % nm];
                    }
                }
                if let Some(dm) = self.acc(grads, m) {
                    for i in 0..g.len() {
                        dm[i % nm] += g[i] * xv[i];
                    }
                }
            }
            &Op::ScaleRows { x, w } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let c = rows_cols(self.shape(x)).1;
                if let Some(dx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * wv[i / c];
                    }
                }
                if let Some(dw) = self.acc(grads, w) {
                    for i in 0..g.len() {
                        dw[i / c] += g[i] * xv[i];
                    }
                }
            }
            &Op::SegmentSum { x, n } => {
                if let Some(dx) = self.acc(grads, x) {
                    let d = rows_cols(&node.shape).1;
                    for (row, chunk) in dx.chunks_mut(d).enumerate() {
                        let si = row / n;
                        for j in 0..d {
                            chunk[j] += g[si * d + j];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Mean(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    let n = dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                if let Some(dl) = self.acc(grads, *logits) {
                    let v = probs.len() / targets.len();
                    let s = g[0] / *count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            dl[i * v + j] += s * probs[i * v + j];
                        }
                        dl[i * v + t] -= s;
                    }
                }
            }
            Op::Attention { q, k, v, heads, segs, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segs, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[(usize, usize)],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, d) = rows_cols(self.shape(q));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, nv) =
            (self.nodes[q.0].needs_grad, self.nodes[k.0].needs_grad, self.nodes[v.0].needs_grad);
        let t = qv.len() / d;
        let mut dq = vec![0.0; if nq { t * d } else { 0 }];
        let mut dk = vec![0.0; if nk { t * d } else { 0 }];
        let mut dv = vec![0.0; if nv { t * d } else { 0 }];
        let mut pofs = 0;
        let mut dp = Vec::new();
        for &(off, len) in segs {
            for h in 0..heads {
                let p = &probs[pofs..pofs + len * len];
                pofs += len * len;
                let base = off * d + h * dh;
                if nv {
                    // dV_h += Pᵀ dO_h
                    gemm_strided(
                        len,
                        len,
                        dh,
                        1.0,
                        Mat::new(p, 0, 1, len),
                        Mat::new(g, base, d, 1),
                        1.0,
                        &mut dv,
                        base,
                        d,
                        1,
                    );
                }
                if !(nq || nk) {
                    continue;
                }
                // dP = dO_h V_hᵀ
                dp.clear();
                dp.resize(len * len, 0.0);
                gemm_strided(
                    len,
                    dh,
                    len,
                    1.0,
                    Mat::new(g, base, d, 1),
                    Mat::new(vv, base, 1, d),
                    0.0,
                    &mut dp,
                    0,
                    len,
                    1,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-multiplied by the score scale
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if nq {
                    gemm_strided(
                        len,
                        len,
                        dh,
                        1.0,
                        Mat::new(&dp, 0, len, 1),
                        Mat::new(kv, base, d, 1),
                        1.0,
                        &mut dq,
                        base,
                        d,
                        1,
                    );
                }
                if nk {
                    gemm_strided(
                        len,
                        len,
                        dh,
                        1.0,
                        Mat::new(&dp, 0, 1, len),
                        Mat::new(qv, base, d, 1),
                        1.0,
                        &mut dk,
                        base,
                        d,
                        1,
                    );
                }
            }
        }
        for (var, buf, needed) in [(q, dq, nq), (k, dk, nk), (v, dv, nv)] {
            if !needed {
                continue;
            }
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    let z = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Keep-mask with survivors pre-scaled by `1 / (1 - p)`; a pure function of
/// `(n, p, seed)`.
pub fn dropout_mask(n: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}
