//! Held-out perplexity reports and forgetting deltas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LanguageRole};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_language_ppl: BTreeMap<String, f64>,
    pub roles: BTreeMap<String, LanguageRole>,
    /// `exp(H)` of each language's source.
    pub floors: BTreeMap<String, f64>,
    /// Mean of `ln(floor) - ln(ppl)` over original languages; 0 is perfect.
    pub original_score: f64,
    /// Same over new languages.
    pub expanded_score: f64,
    /// Logical time: the training step at which the report was taken.
    pub timestamp: u64,
    pub checkpoint_id: String,
}

impl EvalReport {
    fn from_ppl(ppl: BTreeMap<String, f64>, corpus: &Corpus, checkpoint_id: String) -> Result<EvalReport> {
        let mut roles = BTreeMap::new();
        let mut floors = BTreeMap::new();
        for id in ppl.keys() {
            let s = corpus.get(id)?;
            roles.insert(id.clone(), s.role);
            floors.insert(id.clone(), s.perplexity_floor());
        }
        let score = |role| {
            let gaps: Vec<f64> = ppl
                .iter()
                .filter(|(id, _)| roles[*id] == role)
                .map(|(id, p)| floors[id].ln() - p.ln())
                .collect();
            mean(&gaps)
        };
        Ok(EvalReport {
            original_score: score(LanguageRole::Original),
            expanded_score: score(LanguageRole::New),
            per_language_ppl: ppl,
            roles,
            floors,
            timestamp: 0,
            checkpoint_id,
        })
    }

    pub fn with_timestamp(mut self, step: u64) -> Self {
        self.timestamp = step;
        self
    }

    /// `language,role,ppl,floor,score` rows followed by the two group scores.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = crate::train::trainer::csv_err;
        w.write_record(["language", "role", "ppl", "floor", "score"]).map_err(err)?;
        for (id, ppl) in &self.per_language_ppl {
            let floor = self.floors[id];
            let row = [id.clone(), self.roles[id].to_string(), ppl.to_string(), floor.to_string(), (floor.ln() - ppl.ln()).to_string()];
            w.write_record(&row).map_err(err)?;
        }
        for (name, v) in [("original_score", self.original_score), ("expanded_score", self.expanded_score)] {
            w.write_record([name, "", "", "", &v.to_string()]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn ppl(&self, id: &str) -> Result<f64> {
        self.per_language_ppl
            .get(id)
            .copied()
            .ok_or_else(|| Error::config(format!("report has no language {id:?}")))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Teacher-forced held-out perplexity of every corpus language.
pub fn evaluate(model: &Model, corpus: &Corpus, n_tokens: usize) -> Result<EvalReport> {
    let ids: Vec<String> = corpus.ids().into_iter().map(String::from).collect();
    evaluate_languages(model, corpus, &ids, n_tokens)
}

pub fn evaluate_languages(model: &Model, corpus: &Corpus, ids: &[String], n_tokens: usize) -> Result<EvalReport> {
    let seq = model.config.seq_len;
    if n_tokens < 10 * seq {
        return Err(Error::config(format!("eval needs at least {} tokens, got {n_tokens}", 10 * seq)));
    }
    if corpus.vocab as usize > model.config.vocab {
        return Err(Error::config(format!("corpus vocab {} exceeds model vocab {}", corpus.vocab, model.config.vocab)));
    }
    let mut ppl = BTreeMap::new();
    for id in ids {
        let stream = corpus.get(id)?.heldout_set(n_tokens);
        ppl.insert(id.clone(), stream_perplexity(model, &stream)?);
    }
    let hash = model.params.content_hash();
    EvalReport::from_ppl(ppl, corpus, hash[..16].to_string())
}

/// Perplexity over windows of `seq_len + 1` tokens taken with stride `seq_len`,
/// so every token after the first is predicted exactly once.
pub fn stream_perplexity(model: &Model, stream: &[u32]) -> Result<f64> {
    let seq = model.config.seq_len;
    let window = seq + 1;
    let n_windows = stream.len().saturating_sub(1) / seq;
    if n_windows == 0 {
        return Err(Error::config(format!("stream of {} tokens is shorter than one window", stream.len())));
    }
    let mut nll = 0.0f64;
    let mut start = 0;
    while start < n_windows {
        let count = EVAL_CHUNK.min(n_windows - start);
        let mut tokens = Vec::with_capacity(count * window);
        for w in start..start + count {
            tokens.extend_from_slice(&stream[w * seq..w * seq + window]);
        }
        let mut tape = Tape::new();
        let loss = model.lm_loss(&mut tape, &tokens, count, window)?;
        nll += tape.value(loss).item() as f64 * (count * seq) as f64;
        start += count;
    }
    Ok((nll / (n_windows * seq) as f64).exp())
}

/// Change from a reference report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingDelta {
    /// `ppl_after - ppl_before` per language.
    pub per_language: BTreeMap<String, f64>,
    /// Mean log-perplexity change over original languages; positive means
    /// forgetting.
    pub original_delta: f64,
    /// Mean log-perplexity change over new languages; negative means gain.
    pub expanded_delta: f64,
}

impl ForgettingDelta {
    pub fn expanded_gain(&self) -> f64 {
        -self.expanded_delta
    }
}

pub fn compare(before: &EvalReport, after: &EvalReport) -> Result<ForgettingDelta> {
    if before.roles != after.roles {
        return Err(Error::contract(format!(
            "reports cover different suites: {:?} vs {:?}",
            before.roles.keys().collect::<Vec<_>>(),
            after.roles.keys().collect::<Vec<_>>()
        )));
    }
    let mut per_language = BTreeMap::new();
    let mut logs: BTreeMap<LanguageRole, Vec<f64>> = BTreeMap::new();
    for (id, &b) in &before.per_language_ppl {
        let a = after.ppl(id)?;
        per_language.insert(id.clone(), a - b);
        logs.entry(before.roles[id]).or_default().push(a.ln() - b.ln());
    }
    let group = |r| logs.get(&r).map(|v| mean(v)).unwrap_or(f64::NAN);
    Ok(ForgettingDelta {
        per_language,
        original_delta: group(LanguageRole::Original),
        expanded_delta: group(LanguageRole::New),
    })
}
