//! Corpus records, think-stripping, condition tags, stratified mixtures,
//! the BPE tokenizer and example packing.

mod bpe;
mod mixture;
pub mod synthetic;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bpe::{pretokenize, special_tokens, Tokenizer, END_OF_TEXT, FIRST_MERGE_ID, PAD};
pub use mixture::{stratified_sample, DatasetRule, MixtureSpec, MixtureStats, StratumStats};

use crate::objective::{Condition, PackedExample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("instruction of {prefix_len} tokens leaves no room in max_len {max_len}")]
    InstructionTooLong { prefix_len: usize, max_len: usize },
    #[error("line {line}: {error}")]
    Parse { line: usize, error: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One corpus record (a JSON object per line).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub instruction: String,
    pub response: String,
    pub dataset: String,
    pub task: String,
    pub condition: Condition,
}

impl Document {
    pub fn validate(&self) -> Result<()> {
        if self.response.is_empty() {
            return Err(DataError::Validation("empty response".into()));
        }
        if self.dataset.is_empty() || self.task.is_empty() {
            return Err(DataError::Validation("missing dataset/task label".into()));
        }
        Ok(())
    }

    /// The same record with `<think>` spans removed from the response.
    pub fn stripped(&self) -> Self {
        Self {
            response: strip_think(&self.response).0,
            ..self.clone()
        }
    }
}

pub fn read_documents(r: impl BufRead) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|error| DataError::Parse { line: i + 1, error })?;
        doc.validate()
            .map_err(|e| DataError::Validation(format!("line {}: {e}", i + 1)))?;
        out.push(doc);
    }
    Ok(out)
}

pub fn write_documents(w: &mut impl Write, docs: &[Document]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut *w, d).map_err(|e| DataError::Validation(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

/// Removes every `<think>…</think>` span, tags included. An unclosed tag
/// strips to the end of the text; the flag reports that case. Passes repeat
/// until nothing changes, so removals that splice a new tag are handled too.
pub fn strip_think(text: &str) -> (String, bool) {
    let (mut out, mut warned) = strip_pass(text);
    loop {
        let (next, w) = strip_pass(&out);
        warned |= w;
        if next == out {
            return (out, warned);
        }
        out = next;
    }
}

fn strip_pass(text: &str) -> (String, bool) {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(THINK_OPEN) {
        out.push_str(&rest[..start]);
        let after = &rest[start + THINK_OPEN.len()..];
        match after.find(THINK_CLOSE) {
            Some(end) => rest = &after[end + THINK_CLOSE.len()..],
            None => {
                log::warn!("unclosed <think> tag; stripped to end of text");
                return (out, true);
            }
        }
    }
    out.push_str(rest);
    (out, false)
}

/// `<|condition|>` followed by the instruction.
pub fn prepend_condition(doc: &Document) -> String {
    format!("{}{}", doc.condition.tag(), doc.instruction)
}

/// Packing result; `truncated` is set when response tokens were dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub example: PackedExample,
    pub truncated: bool,
}

/// `encode(tag + instruction) ++ encode(response) ++ EOT`, truncated from
/// the response tail to `max_len`.
pub fn pack_example(doc: &Document, tok: &Tokenizer, max_len: usize) -> Result<Packed> {
    let mut ids = tok.encode(&prepend_condition(doc));
    let prefix_len = ids.len();
    if prefix_len >= max_len {
        return Err(DataError::InstructionTooLong { prefix_len, max_len });
    }
    ids.extend(tok.encode(&doc.response));
    ids.push(tok.eot_id());
    let truncated = ids.len() > max_len;
    if truncated {
        log::warn!(
            "{}/{}: {} tokens truncated to {max_len}",
            doc.dataset,
            doc.task,
            ids.len()
        );
        ids.truncate(max_len);
    }
    let example = PackedExample::new(ids, prefix_len, doc.condition).expect("prefix below max_len");
    Ok(Packed { example, truncated })
}
