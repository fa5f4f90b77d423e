//! Synthetic Markov "languages" with a closed-form entropy rate.
//!
//! A language owns a private token slice and may share an overlap slice with
//! other languages. Its order-k transition rows are symmetric Dirichlet(0.3)
//! draws over its allowed tokens, so the best achievable perplexity is
//! `exp(H)` where `H` is the stationary-weighted row entropy.
//!
//! Seed partition: training streams use even seeds, evaluation streams odd
//! ones, so held-out text never coincides with a training draw.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIRICHLET_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageRole {
    /// Seen during pretraining.
    Original,
    /// Only introduced during continual training.
    New,
}

impl fmt::Display for LanguageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LanguageRole::Original => "original",
            LanguageRole::New => "new",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    pub role: LanguageRole,
    pub vocab_slice: Range<u32>,
    pub markov_order: u8,
    pub transition_seed: u64,
    #[serde(default)]
    pub overlap: Option<Range<u32>>,
}

impl LanguageSpec {
    /// Sorted union of the overlap and private slices.
    pub fn allowed_tokens(&self) -> Vec<u32> {
        let mut set: BTreeSet<u32> = self.vocab_slice.clone().collect();
        if let Some(o) = &self.overlap {
            set.extend(o.clone());
        }
        set.into_iter().collect()
    }

    fn validate(&self, vocab: u32) -> Result<()> {
        let id = &self.id;
        if self.vocab_slice.is_empty() {
            return Err(Error::config(format!("language {id}: empty vocab slice")));
        }
        if self.vocab_slice.end > vocab {
            return Err(Error::config(format!(
                "language {id}: slice {:?} outside vocab of {vocab}",
                self.vocab_slice
            )));
        }
        if let Some(o) = &self.overlap {
            if o.end > vocab {
                return Err(Error::config(format!("language {id}: overlap {o:?} outside vocab of {vocab}")));
            }
            if o.start < self.vocab_slice.end && self.vocab_slice.start < o.end {
                return Err(Error::config(format!("language {id}: private slice intersects overlap {o:?}")));
            }
        }
        if !(1..=2).contains(&self.markov_order) {
            return Err(Error::config(format!("language {id}: markov order {} not in 1..=2", self.markov_order)));
        }
        Ok(())
    }
}

/// An ordered set of languages sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSuite {
    pub vocab: u32,
    pub languages: Vec<LanguageSpec>,
}

impl Default for LanguageSuite {
    /// Two order-2 originals with four private tokens and four order-1 new
    /// languages with twelve, all sharing tokens `0..6`.
    fn default() -> Self {
        let overlap = Some(0..6);
        let lang = |i: u32, id: &str, role, order| {
            let start = if i < 2 { 6 + 4 * i } else { 14 + 12 * (i - 2) };
            let width = if i < 2 { 4 } else { 12 };
            LanguageSpec {
                id: id.to_string(),
                role,
                vocab_slice: start..start + width,
                markov_order: order,
                transition_seed: 101 + i as u64,
                overlap: overlap.clone(),
            }
        };
        LanguageSuite {
            vocab: 64,
            languages: vec![
                lang(0, "orig_a", LanguageRole::Original, 2),
                lang(1, "orig_b", LanguageRole::Original, 2),
                lang(2, "new_a", LanguageRole::New, 1),
                lang(3, "new_b", LanguageRole::New, 1),
                lang(4, "new_c", LanguageRole::New, 1),
                lang(5, "new_d", LanguageRole::New, 1),
            ],
        }
    }
}

impl LanguageSuite {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::config("language suite is empty"));
        }
        let mut ids = BTreeSet::new();
        for (i, l) in self.languages.iter().enumerate() {
            l.validate(self.vocab)?;
            if !ids.insert(&l.id) {
                return Err(Error::config(format!("duplicate language id {}", l.id)));
            }
            for other in &self.languages[..i] {
                let (a, b) = (&l.vocab_slice, &other.vocab_slice);
                if a.start < b.end && b.start < a.end {
                    return Err(Error::config(format!("private slices of {} and {} intersect", other.id, l.id)));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let suite: LanguageSuite = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn build(&self) -> Result<Corpus> {
        self.validate()?;
        let sources = self.languages.iter().map(MarkovSource::build).collect::<Result<Vec<_>>>()?;
        Ok(Corpus { vocab: self.vocab, sources })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Built sources for every language of a suite.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: u32,
    sources: Vec<MarkovSource>,
}

impl Corpus {
    pub fn sources(&self) -> &[MarkovSource] {
        &self.sources
    }

    pub fn get(&self, id: &str) -> Result<&MarkovSource> {
        self.sources
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::config(format!("unknown language {id:?}")))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn with_role(&self, role: LanguageRole) -> Vec<&MarkovSource> {
        self.sources.iter().filter(|s| s.role == role).collect()
    }
}

/// One homogeneous batch of `batch` rows of `seq` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    pub language_id: String,
}

/// Even seed for the `index`-th training draw of a stream rooted at `base`.
pub fn train_seed(base: u64, index: u64) -> u64 {
    splitmix(base ^ splitmix(index)) & !1
}

/// Odd seed for the `index`-th evaluation stream rooted at `base`.
pub fn eval_seed(base: u64, index: u64) -> u64 {
    splitmix(base ^ splitmix(index)) | 1
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded order-1 or order-2 Markov chain over a language's allowed tokens.
///
/// States are the last `order` local token indices packed base `n`; row `s`
/// of `probs` is the next-token distribution in state `s`.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    pub id: String,
    pub role: LanguageRole,
    pub order: usize,
    transition_seed: u64,
    allowed: Vec<u32>,
    local: Vec<Option<usize>>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
    stationary: Vec<f64>,
    entropy_rate: f64,
}

impl MarkovSource {
    pub fn build(spec: &LanguageSpec) -> Result<MarkovSource> {
        let allowed = spec.allowed_tokens();
        let n = allowed.len();
        let order = spec.markov_order as usize;
        if spec.vocab_slice.is_empty() || !(1..=2).contains(&order) {
            return Err(Error::config(format!("language {}: invalid spec", spec.id)));
        }
        let n_states = n.pow(order as u32);
        let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.transition_seed);
        let mut probs = Vec::with_capacity(n_states * n);
        for _ in 0..n_states {
            let row: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = row.iter().sum();
            probs.extend(row.iter().map(|x| x / total));
        }
        let mut cdf = Vec::with_capacity(probs.len());
        for row in probs.chunks(n) {
            let mut acc = 0.0;
            cdf.extend(row.iter().map(|p| {
                acc += p;
                acc
            }));
        }
        let mut local = vec![None; *allowed.last().unwrap() as usize + 1];
        for (i, &t) in allowed.iter().enumerate() {
            local[t as usize] = Some(i);
        }
        let stationary = stationary_distribution(&probs, n, order);
        let entropy_rate = stationary
            .iter()
            .zip(probs.chunks(n))
            .map(|(pi, row)| pi * row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
            .sum();
        Ok(MarkovSource {
            id: spec.id.clone(),
            role: spec.role,
            order,
            transition_seed: spec.transition_seed,
            allowed,
            local,
            probs,
            cdf,
            stationary,
            entropy_rate,
        })
    }

    pub fn allowed_tokens(&self) -> &[u32] {
        &self.allowed
    }

    pub fn n_states(&self) -> usize {
        self.stationary.len()
    }

    /// Next-token distribution in `state`, over local indices.
    pub fn transition_row(&self, state: usize) -> &[f64] {
        let n = self.allowed.len();
        &self.probs[state * n..(state + 1) * n]
    }

    /// Stationary distribution over states.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Stationary unigram distribution over local token indices.
    pub fn stationary_tokens(&self) -> Vec<f64> {
        let n = self.allowed.len();
        let mut out = vec![0.0; n];
        for (s, pi) in self.stationary.iter().enumerate() {
            out[s % n] += pi;
        }
        out
    }

    /// Entropy rate in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        self.entropy_rate
    }

    /// `exp(H)`: the lowest perplexity any predictor can reach on this source.
    pub fn perplexity_floor(&self) -> f64 {
        self.entropy_rate.exp()
    }

    pub fn local_index(&self, token: u32) -> Option<usize> {
        self.local.get(token as usize).copied().flatten()
    }

    fn next_state(&self, state: usize, tok: usize) -> usize {
        let n = self.allowed.len();
        if self.order == 1 {
            tok
        } else {
            (state % n) * n + tok
        }
    }

    fn draw(cdf: &[f64], u: f64) -> usize {
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }

    /// One chain of `len` tokens started from the stationary distribution.
    pub fn sample_tokens(&self, len: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, len)
    }

    fn sample_with(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
        let n = self.allowed.len();
        let mut out = Vec::with_capacity(len);
        let mut acc = 0.0;
        let u: f64 = rng.random();
        let mut state = self.stationary.len() - 1;
        for (s, pi) in self.stationary.iter().enumerate() {
            acc += pi;
            if u < acc {
                state = s;
                break;
            }
        }
        let mut prefix = Vec::with_capacity(self.order);
        let mut s = state;
        for _ in 0..self.order {
            prefix.push(s % n);
            s /= n;
        }
        prefix.reverse();
        out.extend(prefix.iter().take(len).map(|&i| self.allowed[i]));
        while out.len() < len {
            let tok = Self::draw(&self.cdf[state * n..(state + 1) * n], rng.random());
            out.push(self.allowed[tok]);
            state = self.next_state(state, tok);
        }
        out
    }

    /// `batch` independent chains of `seq` tokens.
    pub fn sample_batch(&self, batch: usize, seq: usize, stream_seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let mut tokens = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            tokens.extend(self.sample_with(&mut rng, seq));
        }
        Batch { tokens, batch, seq, language_id: self.id.clone() }
    }

    /// The fixed evaluation stream: one chain on an odd seed.
    pub fn heldout_set(&self, n_tokens: usize) -> Vec<u32> {
        self.sample_tokens(n_tokens, eval_seed(self.transition_seed, 0))
    }

    /// Mean negative log-likelihood of `tokens` under the true chain,
    /// scoring every token after the first `order`. Infinite if any token
    /// or transition is outside the language.
    pub fn cross_entropy(&self, tokens: &[u32]) -> f64 {
        if tokens.len() <= self.order {
            return f64::NAN;
        }
        let n = self.allowed.len();
        let mut state = 0;
        for &t in &tokens[..self.order] {
            match self.local_index(t) {
                Some(i) => state = self.next_state(state, i),
                None => return f64::INFINITY,
            }
        }
        let mut nll = 0.0;
        for &t in &tokens[self.order..] {
            let Some(i) = self.local_index(t) else {
                return f64::INFINITY;
            };
            let p = self.probs[state * n + i];
            if p <= 0.0 {
                return f64::INFINITY;
            }
            nll -= p.ln();
            state = self.next_state(state, i);
        }
        nll / (tokens.len() - self.order) as f64
    }

    pub fn perplexity(&self, tokens: &[u32]) -> f64 {
        self.cross_entropy(tokens).exp()
    }
}

/// Power iteration on the state chain.
fn stationary_distribution(probs: &[f64], n: usize, order: usize) -> Vec<f64> {
    let n_states = n.pow(order as u32);
    let mut pi = vec![1.0 / n_states as f64; n_states];
    let mut next = vec![0.0; n_states];
    for _ in 0..100_000 {
        next.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..n_states {
            let row = &probs[s * n..(s + 1) * n];
            let base = if order == 1 { 0 } else { (s % n) * n };
            for (t, p) in row.iter().enumerate() {
                next[base + t] += pi[s] * p;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_is_valid() {
        let suite = LanguageSuite::default();
        suite.validate().unwrap();
        let c = suite.build().unwrap();
        assert_eq!(c.with_role(LanguageRole::Original).len(), 2);
        assert_eq!(c.with_role(LanguageRole::New).len(), 4);
    }

    #[test]
    fn rows_are_stochastic() {
        for s in LanguageSuite::default().build().unwrap().sources() {
            for st in 0..s.n_states() {
                let total: f64 = s.transition_row(st).iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
            assert!((s.stationary().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn slice_outside_vocab_rejected() {
        let mut suite = LanguageSuite::default();
        suite.languages[5].vocab_slice = 60..70;
        assert!(matches!(suite.build(), Err(Error::Config(_))));
    }

    #[test]
    fn intersecting_slices_rejected() {
        let mut suite = LanguageSuite::default();
        suite.languages[1].vocab_slice = 10..20;
        assert!(matches!(suite.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_parity() {
        for i in 0..100 {
            assert_eq!(train_seed(7, i) % 2, 0);
            assert_eq!(eval_seed(7, i) % 2, 1);
        }
    }

    #[test]
    fn unknown_language_is_config_error() {
        let c = LanguageSuite::default().build().unwrap();
        assert!(matches!(c.get("klingon"), Err(Error::Config(_))));
    }
}
