//! Test oracles that share no code with the crate's tape: a straight-line
//! f64 re-implementation of the model, closed-form parameter counts, and
//! helpers for building small models.

#![allow(dead_code)]

use std::collections::BTreeMap;

use moect::model::names;
use moect::{Model, ModelConfig};

/// f64 copy of every parameter plus the config needed to run it.
#[derive(Clone)]
pub struct RefModel {
    pub cfg: ModelConfig,
    pub p: BTreeMap<String, Vec<f64>>,
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * rs * g + b).collect()
}

/// `x · W` for `W: [x.len(), out]` stored row-major.
fn vecmat(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl RefModel {
    pub fn from(model: &Model) -> RefModel {
        let p = model
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.tensor.data().iter().map(|&v| v as f64).collect()))
            .collect();
        RefModel { cfg: model.config.clone(), p }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.p[name]
    }

    fn ffn(&self, x: &[f64], name: impl Fn(&str) -> String) -> Vec<f64> {
        let (h, inner) = (self.cfg.hidden, self.cfg.ffn_inner());
        let mut a = vecmat(x, self.get(&name("w1")), inner);
        for (ai, bi) in a.iter_mut().zip(self.get(&name("b1"))) {
            *ai = gelu(*ai + bi);
        }
        let mut y = vecmat(&a, self.get(&name("w2")), h);
        for (yi, bi) in y.iter_mut().zip(self.get(&name("b2"))) {
            *yi += bi;
        }
        y
    }

    /// Top-k experts with renormalized weights, ties to the lower index.
    pub fn route(&self, layer: usize, x: &[f64]) -> Vec<(usize, f64)> {
        let e = self.cfg.n_experts;
        let probs = softmax(&vecmat(x, self.get(&names::router(layer)), e));
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let top = &order[..self.cfg.top_k];
        let z: f64 = top.iter().map(|&j| probs[j]).sum();
        top.iter().map(|&j| (j, probs[j] / z)).collect()
    }

    /// Logits `[batch*seq*vocab]`.
    pub fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let (h, v, heads) = (cfg.hidden, cfg.vocab, cfg.n_heads);
        let d = h / heads;
        let tok = self.get(names::TOK_EMB);
        let pos = self.get(names::POS_EMB);
        let mut out = Vec::with_capacity(batch * seq * v);
        for b in 0..batch {
            let mut xs: Vec<Vec<f64>> = (0..seq)
                .map(|t| {
                    let id = tokens[b * seq + t] as usize;
                    (0..h).map(|j| tok[id * h + j] + pos[t * h + j]).collect()
                })
                .collect();
            for i in 0..cfg.n_layers {
                let l = |s: &str| names::layer(i, s);
                let hs: Vec<Vec<f64>> =
                    xs.iter().map(|x| layer_norm(x, self.get(&l("ln1.gamma")), self.get(&l("ln1.beta")))).collect();
                let q: Vec<Vec<f64>> = hs.iter().map(|x| vecmat(x, self.get(&l("attn.wq")), h)).collect();
                let k: Vec<Vec<f64>> = hs.iter().map(|x| vecmat(x, self.get(&l("attn.wk")), h)).collect();
                let vv: Vec<Vec<f64>> = hs.iter().map(|x| vecmat(x, self.get(&l("attn.wv")), h)).collect();
                for t in 0..seq {
                    let mut att = vec![0.0; h];
                    for hd in 0..heads {
                        let r = hd * d..(hd + 1) * d;
                        let scores: Vec<f64> = (0..=t)
                            .map(|u| {
                                q[t][r.clone()].iter().zip(&k[u][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                    / (d as f64).sqrt()
                            })
                            .collect();
                        let pr = softmax(&scores);
                        for (u, pu) in pr.iter().enumerate() {
                            for j in r.clone() {
                                att[j] += pu * vv[u][j];
                            }
                        }
                    }
                    let o = vecmat(&att, self.get(&l("attn.wo")), h);
                    for j in 0..h {
                        xs[t][j] += o[j];
                    }
                }
                for x in xs.iter_mut() {
                    let hn = layer_norm(x, self.get(&l("ln2.gamma")), self.get(&l("ln2.beta")));
                    let shared = self.ffn(&hn, |p| names::shared_ffn(i, p));
                    let y = if cfg.n_experts > 0 {
                        let mut moe = vec![0.0; h];
                        for (j, w) in self.route(i, &hn) {
                            let e = self.ffn(&hn, |p| names::expert(i, j, p));
                            for c in 0..h {
                                moe[c] += w * e[c];
                            }
                        }
                        let w = 1.0 / (1.0 + (-self.get(&names::fusion(i))[0]).exp());
                        (0..h).map(|c| w * moe[c] + (1.0 - w) * shared[c]).collect()
                    } else {
                        shared
                    };
                    for c in 0..h {
                        x[c] += y[c];
                    }
                }
            }
            for x in &xs {
                let hn = layer_norm(x, self.get(names::LN_F_GAMMA), self.get(names::LN_F_BETA));
                for id in 0..v {
                    out.push((0..h).map(|j| hn[j] * tok[id * h + j]).sum());
                }
            }
        }
        out
    }

    /// Mean next-token cross-entropy over windows, matching `Model::lm_loss`.
    pub fn lm_loss(&self, windows: &[u32], batch: usize, window: usize) -> f64 {
        let seq = window - 1;
        let v = self.cfg.vocab;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for w in windows.chunks(window) {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        let logits = self.logits(&inputs, batch, seq);
        let mut total = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &logits[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[tgt as usize];
        }
        total / targets.len() as f64
    }
}

/// Closed-form parameter count of a dense model.
pub fn dense_param_count(c: &ModelConfig) -> usize {
    let (h, f) = (c.hidden, c.ffn_mult * c.hidden);
    let ffn = h * f + f + f * h + h;
    let block = 2 * 2 * h + 4 * h * h + ffn;
    c.vocab * h + c.seq_len * h + 2 * h + c.n_layers * block
}

/// Closed-form `(total, activated)` counts after upcycling to `n` experts
/// with top-`k` routing: each layer gains `n` FFN copies, a `[h, n]` router
/// and one fusion scalar; only `k` experts run per token.
pub fn moe_param_counts(c: &ModelConfig, n: usize, k: usize) -> (usize, usize) {
    let (h, f) = (c.hidden, c.ffn_mult * c.hidden);
    let ffn = h * f + f + f * h + h;
    let dense = dense_param_count(c);
    let total = dense + c.n_layers * (n * ffn + h * n + 1);
    (total, total - c.n_layers * (n - k) * ffn)
}

/// Deterministic pseudo-random tokens.
pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % vocab as u64) as u32
        })
        .collect()
}

/// Relative error of an analytic gradient against a central difference, with
/// a floor on the denominator for gradients that are zero up to f32 noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Backpropagates the tape loss of `model` and compares every trainable
/// gradient entry with a central difference of the f64 reference loss.
/// Returns the worst relative error and where it occurred.
pub fn worst_gradient_error(model: &Model, windows: &[u32], batch: usize, window: usize, eps: f64) -> (f64, String) {
    let mut tape = moect::tape::Tape::new();
    let loss = model.lm_loss(&mut tape, windows, batch, window).unwrap();
    let mut with_grads = model.clone();
    tape.backward(loss, &mut with_grads.params).unwrap();

    let reference = RefModel::from(model);
    let mut worst = (0.0, String::new());
    for (name, p) in with_grads.params.iter() {
        let Some(g) = p.tensor.grad() else {
            assert!(p.frozen, "{name} is trainable but has no gradient");
            continue;
        };
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = reference.clone();
            plus.p.get_mut(name).unwrap()[i] += eps;
            let mut minus = reference.clone();
            minus.p.get_mut(name).unwrap()[i] -= eps;
            let fd = (plus.lm_loss(windows, batch, window) - minus.lm_loss(windows, batch, window)) / (2.0 * eps);
            let e = rel_err(gi as f64, fd);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {gi} numeric {fd}"));
            }
        }
    }
    worst
}

/// Scales every non-norm weight so gradient checks are not dominated by
/// near-zero activations.
pub fn spread(model: &mut Model, factor: f32) {
    for (name, p) in model.params.iter_mut() {
        if !names::is_norm(name) {
            p.tensor.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}
