//! Byte-level BPE. Ids 0..256 are raw bytes, then the reserved specials,
//! then one id per merge in training order.
//!
//! Model file (UTF-8 text, one record per line):
//!
//! ```text
//! hrm-bpe 1
//! vocab_size <n>
//! special <id> <surface>
//! ...
//! merge <left id> <right id>
//! ...
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{DataError, Result};
use crate::objective::Condition;

pub const PAD: &str = "<|pad|>";
pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Reserved tokens in id order, starting at 256.
pub fn special_tokens() -> Vec<String> {
    let mut out = vec![PAD.to_string(), END_OF_TEXT.to_string()];
    out.extend(Condition::ALL.iter().map(|c| c.tag()));
    out
}

pub const FIRST_MERGE_ID: u32 = 256 + 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    specials: Vec<String>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c')
}

/// Splits bytes into chunks; a new chunk starts at whitespace that follows
/// non-whitespace.
pub fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if is_space(bytes[i]) && !is_space(bytes[i - 1]) {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

fn merge_pair(symbols: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl Tokenizer {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let specials = special_tokens();
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(specials.iter().map(|s| s.as_bytes().to_vec()));
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let id = FIRST_MERGE_ID + rank as u32;
            for x in [a, b] {
                if (x as usize) >= pieces.len() || (256..FIRST_MERGE_ID).contains(&x) {
                    return Err(DataError::Tokenizer(format!("merge {rank} refers to invalid id {x}")));
                }
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), id);
        }
        Ok(Self {
            specials,
            merges,
            ranks,
            pieces,
        })
    }

    /// Greedy most-frequent-pair merging until `target_vocab` ids exist.
    /// Ties go to the lexicographically smallest `(left bytes, right bytes)`.
    pub fn train(corpus: &[&str], target_vocab: usize) -> Result<Self> {
        let base = FIRST_MERGE_ID as usize;
        if target_vocab < base {
            return Err(DataError::Config(format!(
                "target vocabulary {target_vocab} is below the {base} byte and special ids"
            )));
        }
        if corpus.iter().all(|d| d.is_empty()) {
            return Err(DataError::Config("empty tokenizer corpus".into()));
        }
        let mut counts: HashMap<&[u8], u64> = HashMap::new();
        for doc in corpus {
            for chunk in pretokenize(doc.as_bytes()) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
            .collect();
        words.sort();
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(special_tokens().iter().map(|s| s.as_bytes().to_vec()));
        let mut merges = Vec::new();
        while pieces.len() < target_vocab {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka).then_with(|| pb.cmp(pa))
                })
            });
            let Some((pair, _)) = best else {
                return Err(DataError::Config(format!(
                    "corpus supports only {} ids, target is {target_vocab}",
                    pieces.len()
                )));
            };
            let id = pieces.len() as u32;
            let mut piece = pieces[pair.0 as usize].clone();
            piece.extend_from_slice(&pieces[pair.1 as usize]);
            pieces.push(piece);
            merges.push(pair);
            for (w, _) in &mut words {
                merge_pair(w, pair, id);
            }
        }
        Self::from_merges(merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special_id(&self, surface: &str) -> Option<u32> {
        self.specials.iter().position(|s| s == surface).map(|i| 256 + i as u32)
    }

    pub fn pad_id(&self) -> u32 {
        256
    }

    pub fn eot_id(&self) -> u32 {
        257
    }

    pub fn condition_id(&self, c: Condition) -> u32 {
        self.special_id(&c.tag()).expect("condition tags are reserved")
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&id| (id, (p[0], p[1]))))
                .min();
            let Some((id, pair)) = best else { break };
            merge_pair(&mut symbols, pair, id);
        }
        out.extend(symbols);
    }

    /// Byte-level encoding with no special-token recognition.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(bytes) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// Encodes text, mapping reserved surface forms to their single ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = self
                .specials
                .iter()
                .enumerate()
                .filter_map(|(i, s)| rest.find(s.as_str()).map(|pos| (pos, i)))
                .min();
            match next {
                Some((pos, i)) => {
                    out.extend(self.encode_bytes(&rest.as_bytes()[..pos]));
                    out.push(256 + i as u32);
                    rest = &rest[pos + self.specials[i].len()..];
                }
                None => {
                    out.extend(self.encode_bytes(rest.as_bytes()));
                    break;
                }
            }
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or_else(|| DataError::Tokenizer(format!("id {id} outside vocabulary")))?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Lossy UTF-8 decoding.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("hrm-bpe 1\nvocab_size {}\n", self.vocab_size());
        for (i, s) in self.specials.iter().enumerate() {
            let _ = writeln!(out, "special {} {s}", 256 + i);
        }
        for (a, b) in &self.merges {
            let _ = writeln!(out, "merge {a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| DataError::Tokenizer(format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "hrm-bpe 1")) => {}
            _ => return Err(bad(0, "expected header `hrm-bpe 1`")),
        }
        let mut vocab = None;
        let mut merges = Vec::new();
        let mut specials = Vec::new();
        for (n, line) in lines {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("vocab_size"), Some(v), None) => {
                    if vocab.is_some() {
                        return Err(bad(n, "duplicate vocab_size"));
                    }
                    vocab = Some(v.parse::<usize>().map_err(|_| bad(n, "bad vocab_size"))?);
                }
                (Some("special"), Some(id), Some(s)) => {
                    let id: u32 = id.parse().map_err(|_| bad(n, "bad special id"))?;
                    specials.push((id, s.to_string()));
                }
                (Some("merge"), Some(a), Some(b)) => {
                    let a = a.parse().map_err(|_| bad(n, "bad merge id"))?;
                    let b = b.parse().map_err(|_| bad(n, "bad merge id"))?;
                    merges.push((a, b));
                }
                (Some(""), None, None) => {}
                _ => return Err(bad(n, "unrecognized record")),
            }
        }
        let tok = Self::from_merges(merges)?;
        let expected: Vec<(u32, String)> =
            tok.specials.iter().enumerate().map(|(i, s)| (256 + i as u32, s.clone())).collect();
        if specials != expected {
            return Err(DataError::Tokenizer("special token table does not match this version".into()));
        }
        if vocab != Some(tok.vocab_size()) {
            return Err(DataError::Tokenizer(format!(
                "vocab_size {vocab:?} disagrees with {} ids",
                tok.vocab_size()
            )));
        }
        Ok(tok)
    }
}
