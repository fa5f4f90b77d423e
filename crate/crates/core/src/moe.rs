//! Router, expert set, fusion gate and the dense-to-MoE upcycling transform.
//!
//! Per token the router takes `softmax(h · W_g)` over all experts, keeps the
//! `k` largest entries (ties go to the lower expert index) and renormalizes
//! them to sum to one. Only the selected experts are evaluated for a token.
//! The MoE output is blended with the frozen shared FFN by the fusion gate
//! `w · moe + (1 − w) · shared`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{names, FusionMode, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;
use crate::train::freeze::{apply_freeze, FreezeStrategy};

/// Gate matrix `W_g: [hidden, n_experts]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub gate_weights: Tensor,
}

impl Router {
    pub fn new(gate_weights: Tensor) -> Result<Self> {
        if gate_weights.rank() != 2 {
            return Err(Error::Shape(format!("router weights must be [hidden, n_experts], got {:?}", gate_weights.shape())));
        }
        Ok(Router { gate_weights })
    }

    pub fn n_experts(&self) -> usize {
        self.gate_weights.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.gate_weights.shape()[0]
    }
}

/// Two-layer GELU feed-forward: `gelu(x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    pub fn from_store(store: &ParamStore, name: impl Fn(&str) -> String) -> Result<Ffn> {
        Ok(Ffn {
            w1: store.tensor(&name("w1"))?.clone(),
            b1: store.tensor(&name("b1"))?.clone(),
            w2: store.tensor(&name("w2"))?.clone(),
            b2: store.tensor(&name("b2"))?.clone(),
        })
    }

    /// `(hidden, inner)`
    pub fn signature(&self) -> (usize, usize) {
        (self.w1.shape()[0], self.w1.shape()[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    experts: Vec<Ffn>,
}

impl ExpertSet {
    pub fn new(experts: Vec<Ffn>) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::config("an expert set needs at least one expert"));
        };
        let sig = first.signature();
        for (j, e) in experts.iter().enumerate() {
            if e.signature() != sig || e.w2.shape() != [sig.1, sig.0] {
                return Err(Error::contract(format!("expert {j} shape {:?} differs from expert 0 {:?}", e.signature(), sig)));
            }
        }
        Ok(ExpertSet { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Ffn] {
        &self.experts
    }
}

/// Scalar fusion weight, stored as a logit so that `w = sigmoid(logit)`
/// always lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionGate {
    pub logit: f32,
    pub mode: FusionMode,
}

impl FusionGate {
    pub fn from_weight(w: f64, mode: FusionMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::config(format!("fusion weight {w} outside [0, 1]")));
        }
        Ok(FusionGate { logit: weight_to_logit(w), mode })
    }

    pub fn weight(&self) -> f32 {
        tape::sigmoid(self.logit)
    }
}

/// `ln(w / (1 − w))`, infinite at the endpoints so they stay exact.
pub fn weight_to_logit(w: f64) -> f32 {
    if w <= 0.0 {
        f32::NEG_INFINITY
    } else if w >= 1.0 {
        f32::INFINITY
    } else {
        (w / (1.0 - w)).ln() as f32
    }
}

/// Top-k expert choice per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub n_tokens: usize,
    pub k: usize,
    /// `[n_tokens * k]`, best expert first.
    pub indices: Vec<usize>,
    /// Renormalized gate weights aligned with `indices`.
    pub weights: Vec<f32>,
}

impl RoutingDecision {
    pub fn token(&self, t: usize) -> (&[usize], &[f32]) {
        (&self.indices[t * self.k..(t + 1) * self.k], &self.weights[t * self.k..(t + 1) * self.k])
    }
}

/// Instrumentation: how many expert FFN evaluations each token received.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertEvalCounter {
    pub per_token: Vec<u32>,
    pub per_expert: Vec<usize>,
}

impl ExpertEvalCounter {
    fn new(n_tokens: usize, n_experts: usize) -> Self {
        ExpertEvalCounter { per_token: vec![0; n_tokens], per_expert: vec![0; n_experts] }
    }

    pub fn total(&self) -> usize {
        self.per_expert.iter().sum()
    }
}

/// Indices of the `k` largest entries of each row of `probs: [n, e]`,
/// descending, ties broken toward the lower index.
pub fn select_top_k(probs: &[f32], n: usize, e: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(e);
    for r in 0..n {
        let row = &probs[r * e..(r + 1) * e];
        order.clear();
        order.extend(0..e);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        out.extend_from_slice(&order[..k]);
    }
    out
}

/// Tape handles of one FFN's weights.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, name: impl Fn(&str) -> String) -> Result<FfnVars> {
        Ok(FfnVars {
            w1: tape.param(store, &name("w1"))?,
            b1: tape.param(store, &name("b1"))?,
            w2: tape.param(store, &name("w2"))?,
            b2: tape.param(store, &name("b2"))?,
        })
    }

    pub fn constant(tape: &mut Tape, ffn: &Ffn) -> FfnVars {
        FfnVars {
            w1: tape.constant(ffn.w1.clone()),
            b1: tape.constant(ffn.b1.clone()),
            w2: tape.constant(ffn.w2.clone()),
            b2: tape.constant(ffn.b2.clone()),
        }
    }
}

pub fn ffn_tape(tape: &mut Tape, f: &FfnVars, x: Var) -> Result<Var> {
    let a = tape.matmul(x, f.w1)?;
    let a = tape.add_bias(a, f.b1)?;
    let a = tape.gelu(a);
    let y = tape.matmul(a, f.w2)?;
    tape.add_bias(y, f.b2)
}

/// Gate softmax plus top-k selection; returns the decision and the
/// differentiable `[n, k]` weight node.
pub fn route_tape(tape: &mut Tape, h: Var, wg: Var, k: usize) -> Result<(RoutingDecision, Var)> {
    let e = tape.value(wg).shape()[1];
    if !(1..=e).contains(&k) {
        return Err(Error::config(format!("top_k {k} outside 1..={e}")));
    }
    let logits = tape.matmul(h, wg)?;
    let probs = tape.softmax(logits, 1)?;
    let n = tape.value(probs).shape()[0];
    let indices = select_top_k(tape.value(probs).data(), n, e, k);
    let weights = tape.topk_renorm(probs, &indices, k)?;
    let decision = RoutingDecision { n_tokens: n, k, indices, weights: tape.value(weights).data().to_vec() };
    Ok((decision, weights))
}

/// `y_t = Σ_{j ∈ topk(t)} w_tj · FFN_j(h_t)`, evaluating each expert only on
/// the tokens routed to it.
pub fn mix_experts_tape(
    tape: &mut Tape,
    experts: &[FfnVars],
    decision: &RoutingDecision,
    weights: Var,
    h: Var,
) -> Result<(Var, ExpertEvalCounter)> {
    let (n, width) = (tape.value(h).shape()[0], tape.value(h).shape()[1]);
    if decision.n_tokens != n {
        return Err(Error::contract(format!("routing covers {} tokens, input has {n}", decision.n_tokens)));
    }
    if let Some(&bad) = decision.indices.iter().find(|&&j| j >= experts.len()) {
        return Err(Error::contract(format!("routing names expert {bad} but only {} exist", experts.len())));
    }
    let mut counter = ExpertEvalCounter::new(n, experts.len());
    let mut parts = Vec::new();
    for (j, expert) in experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (pos, &idx) in decision.indices.iter().enumerate() {
            if idx == j {
                rows.push(pos / decision.k);
                slots.push(pos);
            }
        }
        if rows.is_empty() {
            continue;
        }
        for &t in &rows {
            counter.per_token[t] += 1;
        }
        counter.per_expert[j] = rows.len();
        let x = tape.gather_rows(h, &rows)?;
        let y = ffn_tape(tape, expert, x)?;
        let w = tape.gather_elems(weights, &slots)?;
        let y = tape.row_scale(y, w)?;
        parts.push((y, rows));
    }
    let out = tape.scatter_rows(n, width, parts)?;
    Ok((out, counter))
}

/// The MoE branch of block `layer` on the normalized hidden states `h`.
pub fn moe_layer_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
) -> Result<(Var, RoutingDecision, ExpertEvalCounter)> {
    let wg = tape.param(store, &names::router(layer))?;
    let (decision, weights) = route_tape(tape, h, wg, cfg.top_k)?;
    let experts = (0..cfg.n_experts)
        .map(|j| FfnVars::bind(tape, store, |part| names::expert(layer, j, part)))
        .collect::<Result<Vec<_>>>()?;
    let (out, counter) = mix_experts_tape(tape, &experts, &decision, weights, h)?;
    Ok((out, decision, counter))
}

fn flatten_tokens(h: &Tensor) -> Result<Tensor> {
    let width = *h.shape().last().unwrap();
    h.clone().reshape(&[h.numel() / width, width])
}

/// Routes every token of `h: [..., hidden]`.
pub fn route(router: &Router, h: &Tensor, k: usize) -> Result<RoutingDecision> {
    let mut tape = Tape::new();
    let hv = tape.constant(flatten_tokens(h)?);
    let wg = tape.constant(router.gate_weights.clone());
    Ok(route_tape(&mut tape, hv, wg, k)?.0)
}

pub fn moe_forward(experts: &ExpertSet, decision: &RoutingDecision, h: &Tensor) -> Result<Tensor> {
    Ok(moe_forward_counted(experts, decision, h)?.0)
}

/// [`moe_forward`] plus the per-token expert evaluation count.
pub fn moe_forward_counted(
    experts: &ExpertSet,
    decision: &RoutingDecision,
    h: &Tensor,
) -> Result<(Tensor, ExpertEvalCounter)> {
    let mut tape = Tape::new();
    let hv = tape.constant(flatten_tokens(h)?);
    let vars: Vec<FfnVars> = experts.experts().iter().map(|e| FfnVars::constant(&mut tape, e)).collect();
    let w = tape.constant(Tensor::new(vec![decision.n_tokens, decision.k], decision.weights.clone())?);
    let (out, counter) = mix_experts_tape(&mut tape, &vars, decision, w, hv)?;
    let y = tape.value(out).clone().reshape(h.shape())?;
    Ok((y, counter))
}

pub fn fusion(gate: &FusionGate, moe_out: &Tensor, shared_out: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::scalar(gate.weight()));
    let a = tape.constant(moe_out.clone());
    let b = tape.constant(shared_out.clone());
    let y = tape.fuse(w, a, b)?;
    Ok(tape.value(y).clone())
}

/// Extends a dense store: every expert of every layer is a byte copy of that
/// layer's FFN, which itself stays on as the frozen shared FFN. The router is
/// drawn from `N(0, router_init_std)` (all zeros when the std is 0) and the
/// fusion logit is set from the configured weight. Freeze flags follow
/// [`FreezeStrategy::EmbeddingAndExperts`].
pub fn upcycle(dense: &ParamStore, config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    if config.n_experts == 0 {
        return Err(Error::config("upcycle needs n_experts >= 1"));
    }
    if let Some(name) = dense.names().find(|n| names::is_expert(n) || names::is_router(n) || names::is_fusion(n)) {
        return Err(Error::contract(format!("store already has MoE parameter {name}")));
    }
    let tok = dense.tensor(names::TOK_EMB)?;
    if tok.shape() != [config.vocab, config.hidden] {
        return Err(Error::contract(format!(
            "dense token embedding {:?} does not match config [{}, {}]",
            tok.shape(),
            config.vocab,
            config.hidden
        )));
    }
    let mut out = dense.clone();
    out.clear_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.router_init_std).map_err(|e| Error::config(e.to_string()))?;
    for i in 0..config.n_layers {
        for part in names::FFN {
            let t = dense.tensor(&names::shared_ffn(i, part))?.clone();
            for j in 0..config.n_experts {
                out.insert(names::expert(i, j, part), t.clone(), false)?;
            }
        }
        let n = config.hidden * config.n_experts;
        let wg: Vec<f32> = if config.router_init_std > 0.0 {
            (0..n).map(|_| noise.sample(&mut rng) as f32).collect()
        } else {
            vec![0.0; n]
        };
        out.insert(names::router(i), Tensor::new(vec![config.hidden, config.n_experts], wg)?, false)?;
        let logit = weight_to_logit(config.fusion_weight);
        out.insert(names::fusion(i), Tensor::scalar(logit), false)?;
    }
    apply_freeze(&mut out, FreezeStrategy::EmbeddingAndExperts, true)?;
    Ok(out)
}

impl Model {
    pub fn upcycle(&self, n_experts: usize, top_k: usize, fusion_weight: f64, seed: u64) -> Result<Model> {
        if self.is_moe() {
            return Err(Error::contract("model is already a mixture of experts"));
        }
        let config = ModelConfig { n_experts, top_k, fusion_weight, ..self.config.clone() };
        let params = upcycle(&self.params, &config, seed)?;
        Ok(Model { config, params })
    }

    pub fn router(&self, layer: usize) -> Result<Router> {
        Router::new(self.params.tensor(&names::router(layer))?.clone())
    }

    pub fn experts(&self, layer: usize) -> Result<ExpertSet> {
        let experts = (0..self.config.n_experts)
            .map(|j| Ffn::from_store(&self.params, |p| names::expert(layer, j, p)))
            .collect::<Result<Vec<_>>>()?;
        ExpertSet::new(experts)
    }

    pub fn fusion_gate(&self, layer: usize) -> Result<FusionGate> {
        Ok(FusionGate { logit: self.params.tensor(&names::fusion(layer))?.item(), mode: self.config.fusion_mode })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn wave(n: usize, f: f32) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * f).sin()).collect()
    }

    fn ffn(h: usize, inner: usize, f: f32) -> Ffn {
        Ffn {
            w1: t(&[h, inner], wave(h * inner, f)),
            b1: t(&[inner], wave(inner, f + 0.1)),
            w2: t(&[inner, h], wave(inner * h, f + 0.2)),
            b2: t(&[h], wave(h, f + 0.3)),
        }
    }

    #[test]
    fn single_expert_gets_full_weight() {
        let r = Router::new(t(&[4, 1], wave(4, 0.7))).unwrap();
        let h = t(&[2, 3, 4], wave(24, 1.3));
        let d = route(&r, &h, 1).unwrap();
        assert_eq!(d.n_tokens, 6);
        assert!(d.weights.iter().all(|&w| w == 1.0));
        assert!(d.indices.iter().all(|&i| i == 0));
    }

    #[test]
    fn zero_router_ties_go_low() {
        let r = Router::new(Tensor::zeros(&[3, 4])).unwrap();
        let d = route(&r, &t(&[5, 3], wave(15, 0.9)), 2).unwrap();
        for tok in 0..5 {
            let (idx, w) = d.token(tok);
            assert_eq!(idx, &[0, 1]);
            assert_eq!(w, &[0.5, 0.5]);
        }
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let r = Router::new(Tensor::zeros(&[3, 2])).unwrap();
        let h = Tensor::zeros(&[1, 3]);
        assert!(matches!(route(&r, &h, 0), Err(Error::Config(_))));
        assert!(matches!(route(&r, &h, 3), Err(Error::Config(_))));
    }

    #[test]
    fn top1_is_argmax_expert() {
        let experts = ExpertSet::new(vec![ffn(3, 5, 0.3), ffn(3, 5, 1.1), ffn(3, 5, 2.3)]).unwrap();
        let r = Router::new(t(&[3, 3], wave(9, 2.9))).unwrap();
        let h = t(&[4, 3], wave(12, 0.45));
        let d = route(&r, &h, 1).unwrap();
        let y = moe_forward(&experts, &d, &h).unwrap();
        for tok in 0..4 {
            let j = d.token(tok).0[0];
            let row = Tensor::new(vec![1, 3], h.data()[tok * 3..tok * 3 + 3].to_vec()).unwrap();
            let single = RoutingDecision { n_tokens: 1, k: 1, indices: vec![0], weights: vec![1.0] };
            let alone = moe_forward(&ExpertSet::new(vec![experts.experts()[j].clone()]).unwrap(), &single, &row).unwrap();
            assert_eq!(&y.data()[tok * 3..tok * 3 + 3], alone.data());
        }
    }

    #[test]
    fn mismatched_decision_is_contract_error() {
        let experts = ExpertSet::new(vec![ffn(3, 4, 0.3)]).unwrap();
        let d = RoutingDecision { n_tokens: 2, k: 1, indices: vec![0, 1], weights: vec![1.0, 1.0] };
        assert!(matches!(moe_forward(&experts, &d, &Tensor::zeros(&[2, 3])), Err(Error::Contract(_))));
        let d = RoutingDecision { n_tokens: 3, k: 1, indices: vec![0; 3], weights: vec![1.0; 3] };
        assert!(matches!(moe_forward(&experts, &d, &Tensor::zeros(&[2, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn experts_must_share_shape() {
        assert!(ExpertSet::new(vec![ffn(3, 4, 0.1), ffn(3, 5, 0.1)]).is_err());
        assert!(ExpertSet::new(vec![]).is_err());
    }

    #[test]
    fn gate_weight_in_unit_interval() {
        for w in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let g = FusionGate::from_weight(w, FusionMode::Fixed).unwrap();
            assert!((g.weight() as f64 - w).abs() < 1e-7);
        }
        assert!(FusionGate::from_weight(1.2, FusionMode::Fixed).is_err());
        let g = FusionGate { logit: -80.0, mode: FusionMode::Learnable };
        assert!((0.0..=1.0).contains(&g.weight()));
    }

    #[test]
    fn fusion_examples() {
        let a = t(&[2], vec![1.25, -3.0]);
        let b = t(&[2], vec![0.5, 8.0]);
        let g0 = FusionGate::from_weight(0.0, FusionMode::Fixed).unwrap();
        let g1 = FusionGate::from_weight(1.0, FusionMode::Fixed).unwrap();
        assert_eq!(fusion(&g0, &a, &b).unwrap(), b);
        assert_eq!(fusion(&g1, &a, &b).unwrap(), a);
        let half = FusionGate::from_weight(0.5, FusionMode::Fixed).unwrap();
        let y = fusion(&half, &Tensor::scalar(2.0), &Tensor::scalar(4.0)).unwrap();
        assert_eq!(y.item(), 3.0);
        assert!(matches!(fusion(&half, &a, &Tensor::zeros(&[3])), Err(Error::Dimension { .. })));
    }
}
