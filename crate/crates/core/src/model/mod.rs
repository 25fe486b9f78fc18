//! Hierarchical recurrent model and its comparison baselines.
//!
//! Three variants share the same building blocks (pre-norm blocks with gated
//! attention and SwiGLU, grouped into modules capped by an exit norm):
//!
//! * `hrm`: separate H- and L-modules, interleaved as `(L × l_steps, H) × h_cycles`.
//! * `standard`: one stack of pre-norm blocks, final norm, head.
//! * `looped`: one weight-shared module applied `loop_count` times.

mod checkpoint;
mod config;
mod forward;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, Variant};
pub use forward::{
    forward, forward_passes, hrm_forward, module_schedule, variant_forward, AttentionRecord,
    BlockRecord, ForwardOptions, ForwardOutput, LogitProbes, ModuleTag, RecurrentTrace, TraceStep,
};
pub use layers::{
    gated_attention, magicnorm_module, prenorm_block, rms_norm, rope_apply, swiglu_mlp, BlockContext,
    LayerVars, ModuleOutput, ModuleVars,
};
pub use params::{ParamVars, Parameters};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("sequence of {len} tokens exceeds context length {context}")]
    Length { len: usize, context: usize },
    #[error("gradient horizon {k} outside [{min}, {total}]")]
    Horizon { k: usize, min: usize, total: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: u32, vocab: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A configuration together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
}

impl<S: crate::tensor::Scalar> Model<S> {
    /// Fresh model with LeCun-normal weights drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(Self { config, params })
    }
}
