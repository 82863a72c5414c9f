use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub n_active: usize,
    pub d_expert: usize,
    pub rope_base: f64,
    pub max_context: usize,
    pub vocab: usize,
    pub mask_id: u32,
    pub eos_id: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.d_model / self.n_heads
            )));
        }
        if self.n_active == 0 || self.n_active > self.n_experts {
            return Err(Error::Config(format!(
                "n_active {} must be in [1, n_experts {}]",
                self.n_active, self.n_experts
            )));
        }
        if self.mask_id == self.eos_id {
            return Err(Error::Config("mask_id equals eos_id".into()));
        }
        if self.mask_id as usize >= self.vocab || self.eos_id as usize >= self.vocab {
            return Err(Error::Config("reserved token id outside vocabulary".into()));
        }
        if self.rope_base <= 1.0 {
            return Err(Error::Config(format!("rope_base {} too small", self.rope_base)));
        }
        if self.max_context == 0 {
            return Err(Error::Config("max_context is zero".into()));
        }
        Ok(())
    }
}

/// Closed-form parameter counts derived from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    /// Parameters executed per token: everything non-expert plus the
    /// k selected experts per layer.
    pub active: usize,
    pub expert_total: usize,
    pub expert_active: usize,
    pub embedding: usize,
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let d = cfg.d_model;
    let per_expert = 3 * d * cfg.d_expert;
    let expert_total = cfg.n_layers * cfg.n_experts * per_expert;
    let expert_active = cfg.n_layers * cfg.n_active * per_expert;
    let per_layer_dense = 2 * d          // attn_norm + ffn_norm
        + 4 * d * d                      // wq, wk, wv, wo
        + 2 * d                          // q_gain, k_gain
        + d * cfg.n_experts; // router
    let embedding = 2 * cfg.vocab * d; // untied embed + out_proj
    let dense = embedding + d + cfg.n_layers * per_layer_dense;
    ParamCounts {
        total: dense + expert_total,
        active: dense + expert_active,
        expert_total,
        expert_active,
        embedding,
    }
}
