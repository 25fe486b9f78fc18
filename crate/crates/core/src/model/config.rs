use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hrm,
    Standard,
    Looped,
}

/// Architecture hyperparameters. Defaults are the 1B-scale settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    /// Pre-norm blocks per module (per stack for `standard`).
    pub layers_per_module: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub h_cycles: usize,
    pub l_steps_per_cycle: usize,
    /// Number of module applications for the `looped` variant.
    pub loop_count: usize,
    /// SwiGLU hidden width; `None` means 8/3·d_model rounded up to a
    /// multiple of 64.
    pub mlp_hidden: Option<usize>,
    /// Final normalization at module exit. Disabling it gives the pure
    /// pre-norm ablation.
    pub exit_norm: bool,
    /// Whether the initial low-level state is a trainable parameter.
    pub train_z_l_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Hrm,
            d_model: 1536,
            layers_per_module: 16,
            head_dim: 128,
            n_heads: 12,
            vocab_size: 65_536,
            context_len: 4096,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            h_cycles: 2,
            l_steps_per_cycle: 3,
            loop_count: 4,
            mlp_hidden: None,
            exit_norm: true,
            train_z_l_init: true,
        }
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::Config {
        field,
        reason: reason.into(),
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale experiments.
    pub fn tiny(variant: Variant, d_model: usize, n_heads: usize, layers: usize, vocab: usize) -> Self {
        Self {
            variant,
            d_model,
            layers_per_module: layers,
            head_dim: d_model / n_heads,
            n_heads,
            vocab_size: vocab,
            context_len: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("layers_per_module", self.layers_per_module),
            ("head_dim", self.head_dim),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("h_cycles", self.h_cycles),
            ("l_steps_per_cycle", self.l_steps_per_cycle),
            ("loop_count", self.loop_count),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(bad(field, "must be positive"));
            }
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(bad(
                "d_model",
                format!(
                    "{} != n_heads ({}) × head_dim ({})",
                    self.d_model, self.n_heads, self.head_dim
                ),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(bad("head_dim", format!("{} is odd; rotary pairs need an even width", self.head_dim)));
        }
        if !(self.rope_theta > 0.0) {
            return Err(bad("rope_theta", "must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(bad("norm_eps", "must be positive"));
        }
        if self.mlp_hidden == Some(0) {
            return Err(bad("mlp_hidden", "must be positive"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(bad("vocab_size", "exceeds the 32-bit token id range"));
        }
        Ok(())
    }

    pub fn mlp_hidden_dim(&self) -> usize {
        self.mlp_hidden
            .unwrap_or_else(|| (8 * self.d_model).div_ceil(3).div_ceil(64) * 64)
    }

    /// Module applications in one forward pass.
    pub fn total_module_steps(&self) -> usize {
        match self.variant {
            Variant::Hrm => self.h_cycles * (self.l_steps_per_cycle + 1),
            Variant::Looped => self.loop_count,
            Variant::Standard => 1,
        }
    }

    /// Pre-norm block applications in one forward pass.
    pub fn total_block_applications(&self) -> usize {
        match self.variant {
            Variant::Standard => self.layers_per_module,
            _ => self.total_module_steps() * self.layers_per_module,
        }
    }
}
