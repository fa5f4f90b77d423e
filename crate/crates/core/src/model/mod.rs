//! Decoder-only transformer with an optional MoE branch beside each FFN.
//!
//! Pre-norm residual blocks; learned absolute positions; GELU FFN; final
//! layer norm; output projection tied to the token embedding. When the
//! config carries experts, each block computes
//! `x + fusion(moe(h), ffn(h))` with `h = ln2(x)` instead of `x + ffn(h)`.

mod config;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{FusionMode, ModelConfig};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::moe::{self, ExpertEvalCounter, FfnVars, RoutingDecision};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter naming scheme.
pub mod names {
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const LN_F_GAMMA: &str = "ln_f.gamma";
    pub const LN_F_BETA: &str = "ln_f.beta";
    pub const ATTN: [&str; 4] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo"];
    pub const FFN: [&str; 4] = ["w1", "b1", "w2", "b2"];

    pub fn layer(i: usize, rest: &str) -> String {
        format!("layer.{i}.{rest}")
    }

    pub fn shared_ffn(i: usize, part: &str) -> String {
        format!("layer.{i}.ffn.{part}")
    }

    pub fn expert(i: usize, j: usize, part: &str) -> String {
        format!("layer.{i}.expert.{j}.{part}")
    }

    pub fn router(i: usize) -> String {
        format!("layer.{i}.router.wg")
    }

    pub fn fusion(i: usize) -> String {
        format!("layer.{i}.fusion.logit")
    }

    pub fn is_expert(name: &str) -> bool {
        name.contains(".expert.")
    }

    pub fn is_router(name: &str) -> bool {
        name.ends_with(".router.wg")
    }

    pub fn is_fusion(name: &str) -> bool {
        name.ends_with(".fusion.logit")
    }

    pub fn is_attention(name: &str) -> bool {
        name.contains(".attn.")
    }

    pub fn is_shared_ffn(name: &str) -> bool {
        name.contains(".ffn.")
    }

    pub fn is_norm(name: &str) -> bool {
        name.contains("ln1.") || name.contains("ln2.") || name.starts_with("ln_f.")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dense,
    Moe,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
}

/// Per-layer routing record of one forward pass (empty for dense models).
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub routing: Vec<RoutingDecision>,
    pub expert_evals: Vec<ExpertEvalCounter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Truncated at two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub const INIT_STD: f32 = 0.02;

impl Model {
    pub fn init_dense(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        if config.is_moe() {
            return Err(Error::config("init_dense needs n_experts = 0; use upcycle for MoE"));
        }
        let (h, inner) = (config.hidden, config.ffn_inner());
        let mut spec: Vec<(String, Vec<usize>, Init)> = vec![
            (names::TOK_EMB.into(), vec![config.vocab, h], Init::Normal),
            (names::POS_EMB.into(), vec![config.seq_len, h], Init::Normal),
            (names::LN_F_GAMMA.into(), vec![h], Init::Ones),
            (names::LN_F_BETA.into(), vec![h], Init::Zeros),
        ];
        for i in 0..config.n_layers {
            for ln in ["ln1", "ln2"] {
                spec.push((names::layer(i, &format!("{ln}.gamma")), vec![h], Init::Ones));
                spec.push((names::layer(i, &format!("{ln}.beta")), vec![h], Init::Zeros));
            }
            for w in names::ATTN {
                spec.push((names::layer(i, w), vec![h, h], Init::Normal));
            }
            spec.push((names::shared_ffn(i, "w1"), vec![h, inner], Init::Normal));
            spec.push((names::shared_ffn(i, "b1"), vec![inner], Init::Zeros));
            spec.push((names::shared_ffn(i, "w2"), vec![inner, h], Init::Normal));
            spec.push((names::shared_ffn(i, "b2"), vec![h], Init::Zeros));
        }
        spec.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in spec {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.insert(name, Tensor::new(shape, data)?, false)?;
        }
        Ok(Model { config: config.clone(), params })
    }

    pub fn kind(&self) -> ModelKind {
        if self.config.is_moe() {
            ModelKind::Moe
        } else {
            ModelKind::Dense
        }
    }

    pub fn is_moe(&self) -> bool {
        self.config.is_moe()
    }

    /// Records the forward pass on `tape`, returning `[batch*seq, vocab]` logits.
    pub fn build(&self, tape: &mut Tape, tokens: &[u32], batch: usize, seq: usize) -> Result<(Var, ForwardTrace)> {
        let cfg = &self.config;
        if seq == 0 || seq > cfg.seq_len {
            return Err(Error::Shape(format!("sequence length {seq} outside 1..={}", cfg.seq_len)));
        }
        if tokens.len() != batch * seq {
            return Err(Error::Shape(format!("{} tokens for batch {batch} x seq {seq}", tokens.len())));
        }
        let p = &self.params;
        let tok = tape.param(p, names::TOK_EMB)?;
        let pos = tape.param(p, names::POS_EMB)?;
        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let xe = tape.embedding(tok, tokens)?;
        let xp = tape.embedding(pos, &positions)?;
        let mut x = tape.add(xe, xp)?;
        let mut trace = ForwardTrace::default();
        for i in 0..cfg.n_layers {
            let g1 = tape.param(p, &names::layer(i, "ln1.gamma"))?;
            let b1 = tape.param(p, &names::layer(i, "ln1.beta"))?;
            let h = tape.layer_norm(x, g1, b1)?;
            let [wq, wk, wv, wo] = names::ATTN.map(|w| tape.param(p, &names::layer(i, w)));
            let q = tape.matmul(h, wq?)?;
            let k = tape.matmul(h, wk?)?;
            let v = tape.matmul(h, wv?)?;
            let a = tape.attention(q, k, v, batch, seq, cfg.n_heads)?;
            let a = tape.matmul(a, wo?)?;
            x = tape.add(x, a)?;

            let g2 = tape.param(p, &names::layer(i, "ln2.gamma"))?;
            let b2 = tape.param(p, &names::layer(i, "ln2.beta"))?;
            let h = tape.layer_norm(x, g2, b2)?;
            let shared = FfnVars::bind(tape, p, |part| names::shared_ffn(i, part))?;
            let shared_out = moe::ffn_tape(tape, &shared, h)?;
            let out = if cfg.is_moe() {
                let (moe_out, decision, counter) = moe::moe_layer_tape(tape, p, cfg, i, h)?;
                trace.routing.push(decision);
                trace.expert_evals.push(counter);
                let logit = tape.param(p, &names::fusion(i))?;
                let logit = match cfg.fusion_mode {
                    FusionMode::Fixed => tape.detach(logit),
                    FusionMode::Learnable => logit,
                };
                let w = tape.sigmoid(logit);
                tape.fuse(w, moe_out, shared_out)?
            } else {
                shared_out
            };
            x = tape.add(x, out)?;
        }
        let gf = tape.param(p, names::LN_F_GAMMA)?;
        let bf = tape.param(p, names::LN_F_BETA)?;
        let x = tape.layer_norm(x, gf, bf)?;
        let logits = tape.matmul_t(x, tok)?;
        Ok((logits, trace))
    }

    /// Next-token logits `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor> {
        Ok(self.forward_traced(tokens, batch, seq)?.0)
    }

    pub fn forward_traced(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let (logits, trace) = self.build(&mut tape, tokens, batch, seq)?;
        let t = tape.value(logits).clone().reshape(&[batch, seq, self.config.vocab])?;
        Ok((t, trace))
    }

    /// Teacher-forced mean cross-entropy over `batch` windows of `window`
    /// tokens: each window predicts its tokens `1..window` from its prefix.
    pub fn lm_loss(&self, tape: &mut Tape, windows: &[u32], batch: usize, window: usize) -> Result<Var> {
        if window < 2 || windows.len() != batch * window {
            return Err(Error::Shape(format!("{} tokens do not form {batch} windows of {window}", windows.len())));
        }
        let seq = window - 1;
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for w in windows.chunks(window) {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        let (logits, _) = self.build(tape, &inputs, batch, seq)?;
        tape.cross_entropy(logits, &targets)
    }

    pub fn header_json(&self) -> String {
        serde_json::to_string(&Header { kind: self.kind(), config: self.config.clone() })
            .expect("header serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.header_json(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let (header, params) = checkpoint::decode(bytes)?;
        Self::from_parts(&header, params)
    }

    fn from_parts(header: &str, params: ParamStore) -> Result<Model> {
        let h: Header = serde_json::from_str(header)?;
        h.config.validate()?;
        if (h.kind == ModelKind::Moe) != h.config.is_moe() {
            return Err(Error::Format(format!("header kind {:?} disagrees with config", h.kind)));
        }
        let tok = params.tensor(names::TOK_EMB)?;
        if tok.shape() != [h.config.vocab, h.config.hidden] {
            return Err(Error::Format(format!("token embedding {:?} disagrees with config", tok.shape())));
        }
        Ok(Model { config: h.config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (header, params) = checkpoint::load(path)?;
        Self::from_parts(&header, params)
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus::of(self)
    }
}

/// Total versus per-token activated parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub total: usize,
    pub activated: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub tensors: usize,
}

impl ParamCensus {
    pub fn of(model: &Model) -> ParamCensus {
        let p = &model.params;
        let total = p.num_scalars();
        let cfg = &model.config;
        let idle = if cfg.is_moe() {
            let per_expert: usize = p
                .iter()
                .filter(|(n, _)| n.starts_with("layer.0.expert.0."))
                .map(|(_, t)| t.tensor.numel())
                .sum();
            (cfg.n_experts - cfg.top_k) * per_expert * cfg.n_layers
        } else {
            0
        };
        let trainable = p.num_trainable_scalars();
        ParamCensus { total, activated: total - idle, trainable, frozen: total - trainable, tensors: p.len() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 1, hidden: 8, n_heads: 2, vocab: 11, seq_len: 6, ..Default::default() }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init_dense(&tiny(), 3).unwrap();
        let b = Model::init_dense(&tiny(), 3).unwrap();
        let c = Model::init_dense(&tiny(), 4).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert!(a.params.iter().all(|(_, p)| p.tensor.data().iter().all(|x| x.abs() <= 1.0)));
    }

    #[test]
    fn init_rejects_moe_and_invalid() {
        let c = ModelConfig { n_experts: 2, ..tiny() };
        assert!(matches!(Model::init_dense(&c, 0), Err(Error::Config(_))));
        let c = ModelConfig { n_heads: 3, ..tiny() };
        assert!(matches!(Model::init_dense(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_and_errors() {
        let m = Model::init_dense(&tiny(), 0).unwrap();
        let toks: Vec<u32> = (0..12).map(|i| i % 11).collect();
        let y = m.forward(&toks, 2, 6).unwrap();
        assert_eq!(y.shape(), &[2, 6, 11]);
        let long: Vec<u32> = vec![0; 7];
        assert!(matches!(m.forward(&long, 1, 7), Err(Error::Shape(_))));
        assert!(matches!(m.forward(&[11], 1, 1), Err(Error::Index { .. })));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = Model::init_dense(&tiny(), 1).unwrap();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }
}
