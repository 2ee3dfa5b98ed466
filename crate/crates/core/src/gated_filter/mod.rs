//! Per-token importance: a query-conditioned sigmoid gate times a learned
//! position mask, applied to the context embeddings.
//!
//! Weights are deliberately not normalised across the pool.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::{check_shape, param_id};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PREFIX: &str = "filter.";

/// Gate weights `W_g` (`[2d, 1]`), bias `a_g` and position mask `μ` (`[N]`)
/// of one fusion layer.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w_g: ParamId,
    pub a_g: ParamId,
    pub mu: ParamId,
}

impl GateParams {
    /// `W_g` small random, `a_g = 0`, `μ = 1`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, layer: usize, d: usize, n: usize, rng: &mut R) -> Result<Self> {
        let p = format!("{PREFIX}l{layer}.");
        Ok(GateParams {
            w_g: store.add(format!("{p}w_g"), Tensor::randn(&[2 * d, 1], 0.02, rng))?,
            a_g: store.add(format!("{p}a_g"), Tensor::zeros(&[1]))?,
            mu: store.add(format!("{p}mu"), Tensor::full(&[n], 1.0))?,
        })
    }

    pub fn attach(store: &ParamStore, layer: usize, d: usize, n: usize) -> Result<Self> {
        let p = format!("{PREFIX}l{layer}.");
        let gp = GateParams {
            w_g: param_id(store, &p, "w_g")?,
            a_g: param_id(store, &p, "a_g")?,
            mu: param_id(store, &p, "mu")?,
        };
        check_shape(store, gp.w_g, &[2 * d, 1])?;
        check_shape(store, gp.a_g, &[1])?;
        check_shape(store, gp.mu, &[n])?;
        Ok(gp)
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_g, self.a_g, self.mu]
    }
}

/// `γ = σ(W_gᵀ [C_j; h] + a_g)` for every token row of `c` (`[S*N, d]`)
/// against the decision state of its site (`h`: `[S, d]`). Returns `[S*N, 1]`.
pub fn dynamic_gate(g: &mut Graph, c: Var, h: Var, n: usize, p: &GateParams) -> Result<Var> {
    let cat = g.concat_broadcast(c, h, n)?;
    let w = g.param(p.w_g);
    let a = g.param(p.a_g);
    let score = g.matmul(cat, w)?;
    let score = g.add_bias(score, a)?;
    Ok(g.sigmoid(score))
}

/// `W_t = μ ⊙ γ`, with `μ` tiled over the sites.
pub fn apply_mask(g: &mut Graph, gamma: Var, mu: Var) -> Result<Var> {
    g.mul_tiled(gamma, mu)
}

/// `Ĉ = W_t · C`: each token vector scaled by its weight.
pub fn weight_features(g: &mut Graph, c: Var, w_t: Var) -> Result<Var> {
    g.scale_rows(c, w_t)
}

/// Mean of all gates.
pub fn gate_sparsity_loss(g: &mut Graph, gammas: &[Var]) -> Result<Var> {
    let all = if gammas.len() == 1 { gammas[0] } else { g.concat_rows(gammas)? };
    Ok(g.mean(all))
}

/// Per-site copy of the token weights, kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub seq: usize,
    pub layer: usize,
    pub position: usize,
    pub gamma: Vec<f64>,
    pub mu: Vec<f64>,
    pub w_t: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sigmoid, GradPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, n: usize) -> (ParamStore, GateParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gp = GateParams::new(&mut store, 1, d, n, &mut rng).unwrap();
        (store, gp)
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let (mut store, gp) = setup(3, 4);
        store.value_mut(gp.w_g).data.fill(0.0);
        let mut g = Graph::new(&store, GradPolicy::None);
        let c = g.constant(Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let h = g.constant(Tensor::randn(&[1, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let gamma = dynamic_gate(&mut g, c, h, 4, &gp).unwrap();
        assert!(g.value(gamma).iter().all(|&x| x == 0.5));
        let l = gate_sparsity_loss(&mut g, &[gamma]).unwrap();
        assert_eq!(g.scalar(l), 0.5);
    }

    #[test]
    fn large_bias_saturates_inside_the_open_interval() {
        let (mut store, gp) = setup(2, 2);
        store.value_mut(gp.w_g).data.fill(0.0);
        store.value_mut(gp.a_g).data[0] = 30.0;
        let mut g = Graph::new(&store, GradPolicy::None);
        let c = g.constant(Tensor::zeros(&[2, 2]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let gamma = dynamic_gate(&mut g, c, h, 2, &gp).unwrap();
        for &x in g.value(gamma) {
            assert!(x > 0.999_999_999 && x < 1.0);
        }
    }

    #[test]
    fn scalar_hand_computation() {
        let (mut store, gp) = setup(1, 2);
        store.value_mut(gp.w_g).data = vec![0.7, -1.3];
        store.value_mut(gp.a_g).data[0] = 0.2;
        let mut g = Graph::new(&store, GradPolicy::None);
        let c = g.constant(Tensor::new(vec![2, 1], vec![0.5, -2.0]).unwrap());
        let h = g.constant(Tensor::new(vec![1, 1], vec![0.9]).unwrap());
        let gamma = dynamic_gate(&mut g, c, h, 2, &gp).unwrap();
        for (j, cj) in [0.5, -2.0].into_iter().enumerate() {
            let want = 1.0 / (1.0 + (-(0.7 * cj - 1.3 * 0.9 + 0.2f64)).exp());
            assert!((g.value(gamma)[j] - want).abs() < 1e-12);
            assert!((sigmoid(0.7 * cj - 1.3 * 0.9 + 0.2) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_and_weighting() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, GradPolicy::None);
        let gamma = g.constant(Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mu = g.constant(Tensor::new(vec![2], vec![0.0, 2.0]).unwrap());
        let w = apply_mask(&mut g, gamma, mu).unwrap();
        assert_eq!(g.value(w), &[0.0, 0.4, 0.0, 0.8]);
        let c = g.constant(Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap());
        let wt = g.constant(Tensor::new(vec![1, 1], vec![0.25]).unwrap());
        let out = weight_features(&mut g, c, wt).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0]);
    }
}
