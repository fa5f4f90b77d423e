mod common;

use std::collections::BTreeMap;

use moect::corpus::{LanguageRole, LanguageSuite};
use moect::eval::evaluate;
use moect::model::names;
use moect::train::{apply_freeze, continual_train, make_mix, pretrain, FreezeStrategy, MixSpec, TrainConfig};
use moect::{Error, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch: 4, seq: 32, eval_every: 0, eval_tokens: 1024, ..Default::default() }
}

fn fractions(mix: &MixSpec, draws: usize) -> BTreeMap<String, f64> {
    let s = mix.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(s.draw(&mut rng).to_string()).or_default() += 1.0;
    }
    counts.values_mut().for_each(|c| *c /= draws as f64);
    counts
}

#[test]
fn mix_two_to_twenty_hits_new_fraction() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mix = MixSpec::by_role(&corpus, 2_000, 20_000).unwrap();
    let f = fractions(&mix, 10_000);
    let new: f64 = f.iter().filter(|(k, _)| corpus.get(k).unwrap().role == LanguageRole::New).map(|(_, v)| v).sum();
    assert!((new - 10.0 / 11.0).abs() < 0.02, "new fraction {new}");
}

#[test]
fn mix_fifty_fifty_twenty_fractions() {
    let budgets = BTreeMap::from([("orig_a".to_string(), 50_000), ("orig_b".to_string(), 50_000), ("new_a".to_string(), 20_000)]);
    let mix = make_mix(budgets).unwrap();
    let f = fractions(&mix, 10_000);
    for (id, want) in [("orig_a", 5.0 / 12.0), ("orig_b", 5.0 / 12.0), ("new_a", 2.0 / 12.0)] {
        assert!((f[id] - want).abs() < 0.02, "{id}: {} vs {want}", f[id]);
    }
}

#[test]
fn all_strategy_freezes_nothing() {
    let dense = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    let mut moe = dense.upcycle(2, 1, 0.5, 0).unwrap();
    apply_freeze(&mut moe.params, FreezeStrategy::All, true).unwrap();
    assert!(moe.params.frozen_names().is_empty());
}

#[test]
fn freeze_is_idempotent() {
    let mut moe = Model::init_dense(&ModelConfig::default(), 0).unwrap().upcycle(2, 1, 0.5, 0).unwrap();
    apply_freeze(&mut moe.params, FreezeStrategy::EmbeddingAndExperts, true).unwrap();
    let once = moe.params.frozen_hashes();
    apply_freeze(&mut moe.params, FreezeStrategy::EmbeddingAndExperts, true).unwrap();
    assert_eq!(once, moe.params.frozen_hashes());
}

#[test]
fn attention_only_trains_exactly_projections() {
    let cfg = ModelConfig::default();
    let mut moe = Model::init_dense(&cfg, 0).unwrap().upcycle(2, 1, 0.5, 0).unwrap();
    apply_freeze(&mut moe.params, FreezeStrategy::AttentionOnly, true).unwrap();
    let pattern = |n: &str| n.starts_with("layer.") && ["wq", "wk", "wv", "wo"].iter().any(|w| n.ends_with(&format!(".attn.{w}")));
    let trainable = moe.params.trainable_names();
    assert_eq!(trainable.len(), 4 * cfg.n_layers);
    assert!(trainable.iter().all(|n| pattern(n)));
}

#[test]
fn default_moe_trainable_set() {
    let cfg = ModelConfig::default();
    let moe = Model::init_dense(&cfg, 0).unwrap().upcycle(2, 1, 0.5, 0).unwrap();
    for (name, p) in moe.params.iter() {
        let trains = name == names::TOK_EMB || names::is_expert(name) || names::is_router(name) || names::is_fusion(name);
        assert_eq!(!p.frozen, trains, "{name}");
    }
}

#[test]
fn embedding_only_trains_token_table() {
    let mut moe = Model::init_dense(&ModelConfig::default(), 0).unwrap().upcycle(2, 1, 0.5, 0).unwrap();
    apply_freeze(&mut moe.params, FreezeStrategy::EmbeddingOnly, true).unwrap();
    assert_eq!(moe.params.trainable_names(), vec![names::TOK_EMB]);
}

#[test]
fn expert_strategies_reject_dense() {
    let mut dense = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    for s in [FreezeStrategy::ExpertsOnly, FreezeStrategy::EmbeddingAndExperts] {
        assert!(matches!(apply_freeze(&mut dense.params, s, false), Err(Error::Contract(_))));
    }
    assert!(matches!(apply_freeze(&mut dense.params, FreezeStrategy::All, true), Err(Error::Contract(_))));
}

#[test]
fn zero_steps_leave_params_and_report_unchanged() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    let before = m.params.content_hash();
    let report = evaluate(&m, &corpus, 1024).unwrap();
    let log = pretrain(&mut m, &corpus, &MixSpec::by_role(&corpus, 1, 0).unwrap(), &small_cfg(0)).unwrap();
    assert_eq!(m.params.content_hash(), before);
    assert_eq!(log.evals, vec![report]);
    assert!(log.records.is_empty());
}

#[test]
fn first_loss_is_near_uniform() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    let log = pretrain(&mut m, &corpus, &MixSpec::by_role(&corpus, 1, 0).unwrap(), &small_cfg(1)).unwrap();
    let uniform = (64f32).ln();
    assert!((log.records[0].loss - uniform).abs() < 0.1 * uniform);
}

#[test]
fn pretrain_rejects_new_languages() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    let r = pretrain(&mut m, &corpus, &MixSpec::single("new_a"), &small_cfg(1));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn unknown_language_is_config_error() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    let r = continual_train(&mut m, &corpus, &MixSpec::single("nope"), &small_cfg(1));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn nan_loss_is_numeric_error() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    m.params.get_mut(names::POS_EMB).unwrap().tensor.data_mut()[0] = f32::NAN;
    let r = continual_train(&mut m, &corpus, &MixSpec::single("orig_a"), &small_cfg(1));
    assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
}

#[test]
fn runs_are_reproducible() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mix = MixSpec::by_role(&corpus, 1, 1).unwrap();
    let run = || {
        let mut m = Model::init_dense(&ModelConfig::default(), 3).unwrap();
        let log = continual_train(&mut m, &corpus, &mix, &small_cfg(5)).unwrap();
        (log, m.params.content_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn every_strategy_keeps_frozen_bytes() {
    let corpus = LanguageSuite::default().build().unwrap();
    let base = Model::init_dense(&ModelConfig::default(), 0).unwrap().upcycle(2, 1, 0.5, 0).unwrap();
    let mix = MixSpec::by_role(&corpus, 1, 10).unwrap();
    for s in FreezeStrategy::ALL {
        let mut m = base.clone();
        apply_freeze(&mut m.params, s, true).unwrap();
        let log = continual_train(&mut m, &corpus, &mix, &small_cfg(3)).unwrap();
        assert!(log.audit.intact(), "{s}");
        for name in m.params.trainable_names() {
            // Fixed-mode fusion logits and the top-1 router legitimately get zero gradient.
            if names::is_fusion(name) || names::is_router(name) {
                continue;
            }
            assert_ne!(m.params.tensor_hash(name).unwrap(), base.params.tensor_hash(name).unwrap(), "{s}: {name} did not train");
        }
    }
}

#[test]
fn order_one_language_reaches_floor() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 1).unwrap();
    let before = evaluate(&m, &corpus, 4096).unwrap();
    let cfg = TrainConfig { steps: 2000, eval_tokens: 4096, ..Default::default() };
    let log = continual_train(&mut m, &corpus, &MixSpec::single("new_b"), &cfg).unwrap();
    let after = log.last_eval().unwrap();
    let floor = corpus.get("new_b").unwrap().perplexity_floor();
    assert!(after.ppl("new_b").unwrap() < before.ppl("new_b").unwrap());
    assert!(after.ppl("new_b").unwrap() < 1.15 * floor, "{} vs floor {floor}", after.ppl("new_b").unwrap());
}

#[test]
fn smoothed_loss_falls_for_each_seed() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mix = MixSpec::by_role(&corpus, 1, 0).unwrap();
    for seed in 0..3 {
        let mut m = Model::init_dense(&ModelConfig::default(), seed).unwrap();
        let cfg = TrainConfig { seed, ..small_cfg(300) };
        let log = pretrain(&mut m, &corpus, &mix, &cfg).unwrap();
        let (start, end) = log.smoothed_ends(100).unwrap();
        assert!(end < start, "seed {seed}: {start} -> {end}");
    }
}

#[test]
fn log_csv_has_header_and_eval_columns() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 0).unwrap();
    let cfg = TrainConfig { eval_every: 2, ..small_cfg(4) };
    let log = continual_train(&mut m, &corpus, &MixSpec::single("orig_a"), &cfg).unwrap();
    let csv = log.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("step,loss,ppl_new_a"));
    assert_eq!(lines.len(), 1 + 1 + 4);
    assert_eq!(log.evals.iter().map(|e| e.timestamp).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert!(lines[1].starts_with("0,,"));
    assert!(lines[2].ends_with(','));
}

#[test]
fn dense_ct_on_new_languages_forgets_originals() {
    let corpus = LanguageSuite::default().build().unwrap();
    let mut m = Model::init_dense(&ModelConfig::default(), 2).unwrap();
    let pre = TrainConfig { steps: 1500, ..Default::default() };
    pretrain(&mut m, &corpus, &MixSpec::by_role(&corpus, 1, 0).unwrap(), &pre).unwrap();
    let cfg = TrainConfig { steps: 2000, ..Default::default() };
    let log = continual_train(&mut m, &corpus, &MixSpec::by_role(&corpus, 0, 1).unwrap(), &cfg).unwrap();
    let (before, after) = (log.first_eval().unwrap(), log.last_eval().unwrap());
    for (id, role) in &before.roles {
        let (b, a) = (before.per_language_ppl[id], after.per_language_ppl[id]);
        match role {
            LanguageRole::Original => assert!(a > b, "{id}: {b} -> {a}"),
            LanguageRole::New => assert!(a < b, "{id}: {b} -> {a}"),
        }
    }
}
