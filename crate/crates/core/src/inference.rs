//! Greedy decoding with PrefixLM prefill and logit guidance between an early
//! and the final H-module exit of the same forward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForwardOptions, LogitProbes, Model, ModelError, Variant};
use crate::objective::{shifted_targets, ObjectiveError, PackedExample};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("prompt of {len} tokens exceeds the context cap of {cap}")]
    Truncation { len: usize, cap: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// `w` in `(1 + w)·logits(h) − w·logits(h′)`.
    pub guidance_scale: f64,
    /// Which H exit (0-based) supplies `h′`.
    pub shallow_exit: usize,
    pub context_cap: usize,
    /// Generation stops after emitting this id.
    pub stop_token: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 256,
            guidance_scale: 0.0,
            shallow_exit: 0,
            context_cap: 3072,
            stop_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(InferenceError::Config("max_new_tokens must be at least 1".into()));
        }
        if self.context_cap == 0 {
            return Err(InferenceError::Config("context_cap must be positive".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(InferenceError::Config("guidance_scale must be finite".into()));
        }
        Ok(())
    }
}

/// `(1 + w)·h − w·h_shallow`. At `w = 0` the final logits come back
/// unchanged.
pub fn guided_logits<S: Scalar>(h: &Tensor<S>, h_shallow: &Tensor<S>, w: f64) -> Result<Tensor<S>> {
    if h.shape() != h_shallow.shape() {
        return Err(InferenceError::Contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            h.shape(),
            h_shallow.shape()
        )));
    }
    if w == 0.0 {
        return Ok(h.clone());
    }
    let data = h
        .data()
        .iter()
        .zip(h_shallow.data())
        .map(|(&a, &b)| S::lit((1.0 + w) * a.to_f64().unwrap() - w * b.to_f64().unwrap()))
        .collect();
    Ok(Tensor::new(h.shape().to_vec(), data)?)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Final logits combined with the `shallow_exit` H-exit logits of one pass.
/// Needs the hierarchical variant unless `w = 0`.
pub fn guided_pass<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    prefix_len: usize,
    w: f64,
    shallow_exit: usize,
) -> Result<Tensor<S>> {
    if w == 0.0 {
        return Ok(model.evaluate(tokens, prefix_len, &ForwardOptions::default())?.0);
    }
    if model.config.variant != Variant::Hrm {
        return Err(InferenceError::Config("guidance needs the hierarchical variant".into()));
    }
    let opts = ForwardOptions {
        logit_probes: LogitProbes::HExits,
        ..Default::default()
    };
    let (logits, trace) = model.evaluate(tokens, prefix_len, &opts)?;
    let exits = trace.h_exits().count();
    if shallow_exit + 1 >= exits {
        return Err(InferenceError::Config(format!(
            "shallow_exit {shallow_exit} must precede the final of {exits} H exits"
        )));
    }
    let shallow = trace
        .h_exits()
        .nth(shallow_exit)
        .and_then(|s| s.logits.as_ref())
        .expect("H-exit probes were requested");
    guided_logits(&logits, shallow, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopToken,
    MaxTokens,
    ContextCap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub stop: StopReason,
}

/// Greedy decoding without a cache: every emitted token costs one full
/// forward pass over prompt and generated tokens, with the bidirectional
/// region fixed to the original `prefix_len`.
pub fn greedy_decode<S: Scalar>(
    model: &Model<S>,
    prompt: &[u32],
    prefix_len: usize,
    cfg: &DecodeConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let cap = cfg.context_cap.min(model.config.context_len);
    if prompt.len() > cap {
        return Err(InferenceError::Truncation { len: prompt.len(), cap });
    }
    if prompt.is_empty() || prefix_len > prompt.len() {
        return Err(InferenceError::Contract(format!(
            "prefix_len {prefix_len} with a prompt of {} tokens",
            prompt.len()
        )));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    loop {
        if out.len() == cfg.max_new_tokens {
            return Ok(Generation { tokens: out, stop: StopReason::MaxTokens });
        }
        if seq.len() == cap {
            return Ok(Generation { tokens: out, stop: StopReason::ContextCap });
        }
        let logits = guided_pass(model, &seq, prefix_len, cfg.guidance_scale, cfg.shallow_exit)?;
        let next = argmax(logits.row(seq.len() - 1));
        seq.push(next);
        out.push(next);
        if Some(next) == cfg.stop_token {
            return Ok(Generation { tokens: out, stop: StopReason::StopToken });
        }
    }
}

/// Whether greedy decoding from the instruction reproduces the whole
/// response. Computed in one teacher-forced pass: greedy decoding emits the
/// response exactly when every response position's argmax is the reference
/// token.
pub fn response_exact_match<S: Scalar>(model: &Model<S>, ex: &PackedExample, w: f64, shallow_exit: usize) -> Result<bool> {
    let logits = guided_pass(model, &ex.token_ids, ex.prefix_len, w, shallow_exit)?;
    let targets = shifted_targets(&ex.token_ids, &ex.loss_mask)?;
    Ok(targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .all(|(i, t)| argmax(logits.row(i)) == t))
}

pub fn exact_match_rate<S: Scalar>(model: &Model<S>, examples: &[PackedExample], w: f64, shallow_exit: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(InferenceError::Contract("no examples".into()));
    }
    let mut hits = 0;
    for ex in examples {
        hits += response_exact_match(model, ex, w, shallow_exit)? as usize;
    }
    Ok(hits as f64 / examples.len() as f64)
}

pub const GUIDANCE_GRID: [f64; 5] = [-0.5, -0.1, 0.0, 0.1, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub task: String,
    pub w: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Per task, the first grid value with the highest score.
    pub best: Vec<GridRow>,
}

/// Scores every task at every guidance scale and keeps each task's best.
pub fn guidance_grid<S: Scalar>(
    model: &Model<S>,
    tasks: &[(String, Vec<PackedExample>)],
    grid: &[f64],
    shallow_exit: usize,
) -> Result<GridReport> {
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for (task, examples) in tasks {
        let mut top: Option<GridRow> = None;
        for &w in grid {
            let row = GridRow {
                task: task.clone(),
                w,
                exact_match: exact_match_rate(model, examples, w, shallow_exit)?,
            };
            if top.as_ref().is_none_or(|t| row.exact_match > t.exact_match) {
                top = Some(row.clone());
            }
            rows.push(row);
        }
        best.extend(top);
    }
    Ok(GridReport { rows, best })
}
