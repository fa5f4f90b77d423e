//! Pretraining and continual-training loops.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{train_seed, Corpus, LanguageRole};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::optim::{optimizer_step, scheduled_lr, OptState};
use crate::tape::Tape;
use crate::train::mix::MixSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Input positions per row; each row samples `seq + 1` tokens.
    pub seq: usize,
    pub lr: f32,
    pub warmup_frac: f32,
    pub seed: u64,
    /// Evaluate every this many steps; 0 only evaluates at the ends.
    pub eval_every: usize,
    /// Held-out tokens per language per evaluation.
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
}

fn default_eval_tokens() -> usize {
    4096
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 8,
            seq: 64,
            lr: 3e-3,
            warmup_frac: 0.01,
            seed: 0,
            eval_every: 0,
            eval_tokens: default_eval_tokens(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch == 0 {
            bad.push("batch must be positive".to_string());
        }
        if self.seq == 0 || self.seq > model.config.seq_len {
            bad.push(format!("seq {} outside 1..={}", self.seq, model.config.seq_len));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=0.1).contains(&self.warmup_frac) {
            bad.push(format!("warmup_frac {} outside [0, 0.1]", self.warmup_frac));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub language: String,
}

/// Per-tensor hashes of the frozen set before and after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub before: BTreeMap<String, String>,
    pub after: BTreeMap<String, String>,
}

impl FreezeAudit {
    pub fn intact(&self) -> bool {
        self.before == self.after
    }

    pub fn changed(&self) -> Vec<&str> {
        self.before
            .iter()
            .filter(|(k, v)| self.after.get(*k) != Some(v))
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Reports at step 0, every `eval_every` steps, and at the end.
    pub evals: Vec<EvalReport>,
    pub audit: FreezeAudit,
}

impl TrainLog {
    pub fn first_eval(&self) -> Option<&EvalReport> {
        self.evals.first()
    }

    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.evals.last()
    }

    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f32, f32)> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let avg = |r: &[StepRecord]| r.iter().map(|x| x.loss).sum::<f32>() / r.len() as f32;
        Some((avg(&self.records[..w]), avg(&self.records[n - w..])))
    }

    /// `step,loss,ppl_<lang>...`; loss is empty on the step-0 evaluation row
    /// and perplexities are empty on rows without an evaluation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let langs: Vec<&String> = self.evals.first().map(|e| e.per_language_ppl.keys().collect()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend(langs.iter().map(|l| format!("ppl_{l}")));
        w.write_record(&header).map_err(csv_err)?;
        let evals: BTreeMap<u64, &EvalReport> = self.evals.iter().map(|e| (e.timestamp, e)).collect();
        let ppl_cols = |step: u64| -> Vec<String> {
            match evals.get(&step) {
                Some(e) => langs.iter().map(|l| format!("{}", e.per_language_ppl[*l])).collect(),
                None => vec![String::new(); langs.len()],
            }
        };
        if evals.contains_key(&0) {
            let mut row = vec!["0".to_string(), String::new()];
            row.extend(ppl_cols(0));
            w.write_record(&row).map_err(csv_err)?;
        }
        for r in &self.records {
            let mut row = vec![r.step.to_string(), format!("{}", r.loss)];
            row.extend(ppl_cols(r.step as u64));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Trains a dense model on original languages only.
pub fn pretrain(model: &mut Model, corpus: &Corpus, mix: &MixSpec, cfg: &TrainConfig) -> Result<TrainLog> {
    for id in mix.languages() {
        if corpus.get(id)?.role != LanguageRole::Original {
            return Err(Error::config(format!("pretraining mix contains non-original language {id}")));
        }
    }
    run(model, corpus, mix, cfg)
}

/// Continual training under whatever freeze flags `model` already carries.
/// Fails with a contract error if any frozen tensor changed.
pub fn continual_train(model: &mut Model, corpus: &Corpus, mix: &MixSpec, cfg: &TrainConfig) -> Result<TrainLog> {
    let log = run(model, corpus, mix, cfg)?;
    if !log.audit.intact() {
        return Err(Error::contract(format!("frozen tensors changed: {:?}", log.audit.changed())));
    }
    Ok(log)
}

fn run(model: &mut Model, corpus: &Corpus, mix: &MixSpec, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate(model)?;
    mix.check(corpus)?;
    let before = model.params.frozen_hashes();
    let mut evals = vec![evaluate(model, corpus, cfg.eval_tokens)?];
    let sampler = mix.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::default();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lang = sampler.draw(&mut rng);
        let batch = corpus.get(lang)?.sample_batch(cfg.batch, cfg.seq + 1, train_seed(cfg.seed, step as u64));
        let mut tape = Tape::new();
        let loss = model.lm_loss(&mut tape, &batch.tokens, cfg.batch, cfg.seq + 1)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss {value} at step {step} on {lang}")));
        }
        tape.backward(loss, &mut model.params)?;
        optimizer_step(&mut model.params, scheduled_lr(cfg.lr, step, cfg.steps, cfg.warmup_frac), &mut opt)?;
        let done = step + 1;
        records.push(StepRecord { step: done, loss: value, language: lang.to_string() });
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            evals.push(evaluate(model, corpus, cfg.eval_tokens)?.with_timestamp(done as u64));
        }
    }
    if cfg.steps > 0 {
        evals.push(evaluate(model, corpus, cfg.eval_tokens)?.with_timestamp(cfg.steps as u64));
    }
    let after = model.params.frozen_hashes();
    let audit = FreezeAudit { after: before.keys().map(|k| (k.clone(), after.get(k).cloned().unwrap_or_default())).collect(), before };
    Ok(TrainLog { records, evals, audit })
}
