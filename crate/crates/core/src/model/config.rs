use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `w` stays at its configured value.
    Fixed,
    /// `w = sigmoid(logit)` with the logit trained.
    Learnable,
}

/// Architecture hyperparameters shared by the dense base and its MoE extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// FFN inner width is `ffn_mult * hidden`.
    pub ffn_mult: usize,
    /// 0 for a dense model.
    pub n_experts: usize,
    pub top_k: usize,
    /// Share of the MoE branch in the fused output.
    pub fusion_weight: f64,
    pub fusion_mode: FusionMode,
    /// Std of the router's initial weights; 0 gives an all-zero router.
    #[serde(default = "default_router_std")]
    pub router_init_std: f64,
    /// Reserved for an auxiliary load-balancing term; must stay off.
    #[serde(default)]
    pub load_balance_loss: bool,
}

fn default_router_std() -> f64 {
    1e-3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 32,
            n_heads: 4,
            vocab: 64,
            seq_len: 64,
            ffn_mult: 4,
            n_experts: 0,
            top_k: 1,
            fusion_weight: 0.5,
            fusion_mode: FusionMode::Fixed,
            router_init_std: default_router_std(),
            load_balance_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn ffn_inner(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    pub fn is_moe(&self) -> bool {
        self.n_experts > 0
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.hidden.is_multiple_of(self.n_heads) {
            bad.push(format!("hidden {} not divisible by n_heads {}", self.hidden, self.n_heads));
        }
        if self.n_experts > 0 && !(1..=self.n_experts).contains(&self.top_k) {
            bad.push(format!("top_k {} outside 1..={}", self.top_k, self.n_experts));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            bad.push(format!("fusion_weight {} outside [0, 1]", self.fusion_weight));
        }
        if !(self.router_init_std >= 0.0 && self.router_init_std.is_finite()) {
            bad.push(format!("router_init_std {} must be finite and >= 0", self.router_init_std));
        }
        if self.load_balance_loss {
            bad.push("load_balance_loss is reserved and not supported".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// The same architecture with the MoE branch stripped.
    pub fn dense(&self) -> ModelConfig {
        ModelConfig { n_experts: 0, ..self.clone() }
    }
}
