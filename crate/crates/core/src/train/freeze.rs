//! Which parameter groups may update during continual training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::names;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FreezeStrategy {
    /// Every parameter trains.
    #[serde(alias = "all")]
    All,
    /// Only the attention projections train.
    #[serde(alias = "attention")]
    AttentionOnly,
    /// Only the token embedding trains. Router and fusion stay frozen.
    #[serde(alias = "embedding")]
    EmbeddingOnly,
    /// Experts, router and fusion logit train.
    #[serde(alias = "experts")]
    ExpertsOnly,
    /// Token embedding, experts, router and fusion logit train.
    #[serde(alias = "embedding_experts")]
    EmbeddingAndExperts,
}

impl FreezeStrategy {
    pub const ALL: [FreezeStrategy; 5] = [
        FreezeStrategy::All,
        FreezeStrategy::AttentionOnly,
        FreezeStrategy::EmbeddingOnly,
        FreezeStrategy::ExpertsOnly,
        FreezeStrategy::EmbeddingAndExperts,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FreezeStrategy::All => "all",
            FreezeStrategy::AttentionOnly => "attention",
            FreezeStrategy::EmbeddingOnly => "embedding",
            FreezeStrategy::ExpertsOnly => "experts",
            FreezeStrategy::EmbeddingAndExperts => "embedding_experts",
        }
    }

    fn needs_experts(self) -> bool {
        matches!(self, FreezeStrategy::ExpertsOnly | FreezeStrategy::EmbeddingAndExperts)
    }

    /// Whether `name` is trainable under this strategy.
    pub fn trains(self, name: &str) -> bool {
        let moe_part = names::is_expert(name) || names::is_router(name) || names::is_fusion(name);
        match self {
            FreezeStrategy::All => true,
            FreezeStrategy::AttentionOnly => names::is_attention(name),
            FreezeStrategy::EmbeddingOnly => name == names::TOK_EMB,
            FreezeStrategy::ExpertsOnly => moe_part,
            FreezeStrategy::EmbeddingAndExperts => moe_part || name == names::TOK_EMB,
        }
    }
}

impl fmt::Display for FreezeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FreezeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezeStrategy::ALL
            .into_iter()
            .find(|v| v.label() == s || format!("{v:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown freeze strategy {s:?}")))
    }
}

/// Sets every frozen flag in `params` from `strategy`.
pub fn apply_freeze(params: &mut ParamStore, strategy: FreezeStrategy, is_moe: bool) -> Result<()> {
    let has_experts = params.names().any(names::is_expert);
    if has_experts != is_moe {
        return Err(Error::contract(format!(
            "store {} expert parameters but is_moe = {is_moe}",
            if has_experts { "has" } else { "lacks" }
        )));
    }
    if strategy.needs_experts() && !is_moe {
        return Err(Error::contract(format!("strategy {strategy} needs experts, store is dense")));
    }
    for (name, p) in params.iter_mut() {
        p.frozen = !strategy.trains(name);
    }
    Ok(())
}
