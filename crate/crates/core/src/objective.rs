//! Attention masks, the response-only loss and attention entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BoolTensor, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no response tokens to score")]
    EmptyResponse,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Style tag prepended to every instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Direct,
    Cot,
    Synth,
    Noisy,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Self::Direct, Self::Cot, Self::Synth, Self::Noisy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Cot => "cot",
            Self::Synth => "synth",
            Self::Noisy => "noisy",
        }
    }

    /// Surface form, e.g. `<|direct|>`.
    pub fn tag(self) -> String {
        format!("<|{}|>", self.name())
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// One training sequence: instruction tokens (tag included) followed by the
/// response and end-of-text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedExample {
    pub token_ids: Vec<u32>,
    pub prefix_len: usize,
    pub loss_mask: Vec<bool>,
    pub condition: Condition,
}

impl PackedExample {
    pub fn new(token_ids: Vec<u32>, prefix_len: usize, condition: Condition) -> Result<Self> {
        if prefix_len > token_ids.len() {
            return Err(ObjectiveError::Contract(format!(
                "prefix_len {prefix_len} exceeds length {}",
                token_ids.len()
            )));
        }
        let loss_mask = (0..token_ids.len()).map(|i| i >= prefix_len).collect();
        Ok(Self {
            token_ids,
            prefix_len,
            loss_mask,
            condition,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn response_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub(crate) fn prefix_mask(prefix_len: usize, seq_len: usize) -> BoolTensor {
    BoolTensor::from_fn(seq_len, seq_len, |i, j| j < prefix_len || j <= i)
}

/// Position `i` may attend to `j` iff `j < prefix_len` or `j <= i`.
pub fn build_prefixlm_mask(prefix_len: usize, seq_len: usize) -> Result<BoolTensor> {
    if seq_len == 0 {
        return Err(ObjectiveError::Contract("empty sequence".into()));
    }
    if prefix_len > seq_len {
        return Err(ObjectiveError::Contract(format!(
            "prefix_len {prefix_len} exceeds seq_len {seq_len}"
        )));
    }
    Ok(prefix_mask(prefix_len, seq_len))
}

pub fn build_causal_mask(seq_len: usize) -> Result<BoolTensor> {
    build_prefixlm_mask(0, seq_len)
}

/// Next-token targets: row `i` scores `tokens[i + 1]` when that position is
/// in the loss mask.
pub fn shifted_targets(tokens: &[u32], loss_mask: &[bool]) -> Result<Vec<Option<u32>>> {
    if tokens.len() != loss_mask.len() {
        return Err(ObjectiveError::Contract(format!(
            "{} tokens but {} mask entries",
            tokens.len(),
            loss_mask.len()
        )));
    }
    let t = tokens.len();
    Ok((0..t)
        .map(|i| (i + 1 < t && loss_mask[i + 1]).then(|| tokens[i + 1]))
        .collect())
}

/// Summed NLL over masked target positions, with the number of positions.
pub fn response_nll_sum<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    tokens: &[u32],
    loss_mask: &[bool],
) -> Result<(Var, usize)> {
    let targets = shifted_targets(tokens, loss_mask)?;
    let count = targets.iter().filter(|t| t.is_some()).count();
    Ok((tape.cross_entropy_sum(logits, &targets)?, count))
}

/// Mean NLL over masked target positions.
pub fn response_nll<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    tokens: &[u32],
    loss_mask: &[bool],
) -> Result<Var> {
    let (sum, count) = response_nll_sum(tape, logits, tokens, loss_mask)?;
    if count == 0 {
        return Err(ObjectiveError::EmptyResponse);
    }
    Ok(tape.scale(sum, S::lit(1.0 / count as f64))?)
}

/// Per-target NLL values (off-tape), in position order.
pub fn token_nlls<S: Scalar>(logits: &Tensor<S>, tokens: &[u32], loss_mask: &[bool]) -> Result<Vec<f64>> {
    let targets = shifted_targets(tokens, loss_mask)?;
    let v = logits.cols();
    let mut out = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row: Vec<f64> = logits.row(i).iter().map(|x| x.to_f64().unwrap()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let target = target as usize;
        if target >= v {
            return Err(ObjectiveError::Contract(format!("target {target} outside vocabulary {v}")));
        }
        out.push(lse - row[target]);
    }
    Ok(out)
}

/// Mean row entropy of a `[heads, t, t]` (or `[t, t]`) probability tensor,
/// averaged over heads and query positions. `0 · ln 0` counts as 0.
pub fn attention_entropy<S: Scalar>(probs: &Tensor<S>) -> f64 {
    let n = probs.cols();
    let rows = probs.len() / n;
    let total: f64 = probs
        .data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .map(|p| p.to_f64().unwrap())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}
