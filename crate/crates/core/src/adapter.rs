//! Q-Former + MLP speech adapter: compresses encoder states of any length
//! into exactly `n_queries` rows of LM embedding width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::EncoderStates;
use crate::error::{Error, Result};
use crate::lm::SpeechEmbedding;
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, INIT_STD};
use crate::tensor::ops::{self, Mask};
use crate::tensor::{init, Graph, Matrix, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_queries: usize,
    pub query_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width inside each Q-Former block.
    pub ffn_hidden: usize,
    pub mlp_hidden: usize,
    pub d_llm: usize,
    /// Width of the encoder states fed to the in-projection.
    pub encoder_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_queries: 80,
            query_dim: 768,
            n_layers: 2,
            n_heads: 8,
            ffn_hidden: 3072,
            mlp_hidden: 2048,
            d_llm: 64,
            encoder_dim: 64,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_queries,
            self.query_dim,
            self.n_layers,
            self.n_heads,
            self.ffn_hidden,
            self.mlp_hidden,
            self.d_llm,
            self.encoder_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("adapter dimensions must be ≥ 1".into()));
        }
        if self.query_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "query_dim {} is not divisible by {} heads",
                self.query_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct QBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    cfg: AdapterConfig,
    queries: ParamId,
    in_proj: Linear,
    blocks: Vec<QBlock>,
    ln_f: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let dq = cfg.query_dim;
        let queries = store.add(
            "adapter/queries",
            init::trunc_normal(cfg.n_queries, dq, INIT_STD, rng),
        );
        let in_proj = Linear::new(store, "adapter/in_proj", cfg.encoder_dim, dq, true, rng);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("adapter/layers.{i}");
                QBlock {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), dq),
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), dq, dq, cfg.n_heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), dq),
                    cross_attn: Attention::new(store, &format!("{p}.cross_attn"), dq, dq, cfg.n_heads, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), dq),
                    ff: FeedForward::new(store, &format!("{p}.ff"), dq, cfg.ffn_hidden, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "adapter/ln_f", dq);
        let fc1 = Linear::new(store, "adapter/mlp.fc1", dq, cfg.mlp_hidden, true, rng);
        let fc2 = Linear::new(store, "adapter/mlp.fc2", cfg.mlp_hidden, cfg.d_llm, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            queries,
            in_proj,
            blocks,
            ln_f,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    /// Parameter handles of the final MLP: `(W1, b1, W2, b2)`.
    pub fn mlp_params(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        (
            self.fc1.w,
            self.fc1.b.expect("mlp has bias"),
            self.fc2.w,
            self.fc2.b.expect("mlp has bias"),
        )
    }

    fn check_states(&self, width: usize, steps: usize) -> Result<()> {
        if width != self.cfg.encoder_dim {
            return Err(Error::ConfigMismatch(format!(
                "adapter expects encoder width {}, got {width}",
                self.cfg.encoder_dim
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("encoder states have no time steps".into()));
        }
        Ok(())
    }

    fn check_queries(&self, q: &Matrix) -> Result<()> {
        if q.dim() != (self.cfg.n_queries, self.cfg.query_dim) {
            return Err(Error::ConfigMismatch(format!(
                "query output shape {:?}, expected ({}, {})",
                q.dim(),
                self.cfg.n_queries,
                self.cfg.query_dim
            )));
        }
        Ok(())
    }

    /// `Q' = Q-Former(Q, H)`, taped. `h` is a `(T × encoder_dim)` node.
    pub fn qformer_forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let (steps, width) = g.value(h).dim();
        self.check_states(width, steps)?;
        let kv = self.in_proj.forward(g, h);
        let mut x = g.param(self.queries);
        for b in &self.blocks {
            let a = b.ln_self.forward(g, x);
            let a = b.self_attn.forward(g, a, a, Mask::None);
            x = g.add(x, a);
            let c = b.ln_cross.forward(g, x);
            let c = b.cross_attn.forward(g, c, kv, Mask::None);
            x = g.add(x, c);
            let f = b.ln_ff.forward(g, x);
            let f = b.ff.forward(g, f);
            x = g.add(x, f);
        }
        Ok(self.ln_f.forward(g, x))
    }

    /// `E^X = ReLU(Q'·W1 + b1)·W2 + b2`, taped.
    pub fn mlp_project(&self, g: &mut Graph, q_prime: Var) -> Result<Var> {
        self.check_queries(g.value(q_prime))?;
        let z = self.fc1.forward(g, q_prime);
        let z = g.relu(z);
        Ok(self.fc2.forward(g, z))
    }

    pub fn adapt(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let q = self.qformer_forward(g, h)?;
        self.mlp_project(g, q)
    }

    pub fn qformer_eval(&self, store: &ParamStore, h: &EncoderStates) -> Result<Matrix> {
        self.check_states(h.width(), h.steps())?;
        let kv = self.in_proj.apply(store, &h.0);
        let mut x = store.get(self.queries).clone();
        for b in &self.blocks {
            let a = b.ln_self.apply(store, &x);
            x += &b.self_attn.apply(store, &a, &a, Mask::None);
            let c = b.ln_cross.apply(store, &x);
            x += &b.cross_attn.apply(store, &c, &kv, Mask::None);
            let f = b.ln_ff.apply(store, &x);
            x += &b.ff.apply(store, &f);
        }
        Ok(self.ln_f.apply(store, &x))
    }

    pub fn mlp_eval(&self, store: &ParamStore, q_prime: &Matrix) -> Result<SpeechEmbedding> {
        self.check_queries(q_prime)?;
        let mut z = self.fc1.apply(store, q_prime);
        ops::relu_inplace(&mut z);
        Ok(SpeechEmbedding(self.fc2.apply(store, &z)))
    }

    pub fn adapt_eval(&self, store: &ParamStore, h: &EncoderStates) -> Result<SpeechEmbedding> {
        let q = self.qformer_eval(store, h)?;
        self.mlp_eval(store, &q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(n_q: usize, dq: usize, d_enc: usize, d_llm: usize, layers: usize) -> (ParamStore, Adapter) {
        let cfg = AdapterConfig {
            n_queries: n_q,
            query_dim: dq,
            n_layers: layers,
            n_heads: 2,
            ffn_hidden: 2 * dq,
            mlp_hidden: 10,
            d_llm,
            encoder_dim: d_enc,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let a = Adapter::new(&mut store, &cfg, &mut rng).unwrap();
        (store, a)
    }

    fn states(t: usize, d: usize, seed: u64) -> EncoderStates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderStates(init::trunc_normal(t, d, 1.0, &mut rng))
    }

    #[test]
    fn qformer_output_shape() {
        let (store, a) = small(4, 8, 16, 12, 2);
        let q = a.qformer_eval(&store, &states(7, 16, 1)).unwrap();
        assert_eq!(q.dim(), (4, 8));
        let e = a.mlp_eval(&store, &q).unwrap();
        assert_eq!(e.0.dim(), (4, 12));
    }

    #[test]
    fn output_rows_do_not_depend_on_duration() {
        let (store, a) = small(4, 8, 16, 12, 1);
        for t in [1, 10, 3000] {
            let e = a.adapt_eval(&store, &states(t, 16, t as u64)).unwrap();
            assert_eq!(e.0.dim(), (4, 12));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (store, a) = small(4, 8, 16, 12, 1);
        let err = a.adapt_eval(&store, &states(3, 15, 0)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }

    #[test]
    fn zero_weight_mlp_emits_bias_rows() {
        let (mut store, a) = small(4, 8, 16, 12, 1);
        let (w1, b1, w2, b2) = a.mlp_params();
        store.get_mut(w1).fill(0.0);
        store.get_mut(b1).fill(0.0);
        store.get_mut(w2).fill(0.0);
        let c = Matrix::from_shape_fn((1, 12), |(_, j)| j as f64 - 3.5);
        store.get_mut(b2).assign(&c);
        let q = init::ones(4, 8);
        let e = a.mlp_eval(&store, &q).unwrap();
        for row in e.0.rows() {
            assert_eq!(row, c.row(0));
        }
    }

    #[test]
    fn taped_and_plain_forward_agree() {
        let (store, a) = small(3, 8, 6, 5, 2);
        let h = states(9, 6, 4);
        let plain = a.adapt_eval(&store, &h).unwrap();
        let mut g = Graph::new(&store);
        let hv = g.constant(h.0.clone());
        let y = a.adapt(&mut g, hv).unwrap();
        for (x, y) in g.value(y).iter().zip(plain.0.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
