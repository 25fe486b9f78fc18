//! Copy/reverse instruction task over a tiny symbolic vocabulary.
//!
//! Sequence layout: `TAG s_1 … s_n OP | r_1 … r_n EOT`, where the prefix ends
//! at the bar, `OP` is `COPY` or `REV` and `r` is `s` or its reversal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::objective::{Condition, PackedExample};

pub const PAD: u32 = 0;
pub const EOT: u32 = 1;
pub const TAG: u32 = 2;
pub const COPY: u32 = 3;
pub const REV: u32 = 4;
pub const FIRST_SYMBOL: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyReverseTask {
    pub n_symbols: u32,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CopyReverseTask {
    fn default() -> Self {
        Self {
            n_symbols: 8,
            min_len: 3,
            max_len: 6,
        }
    }
}

impl CopyReverseTask {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_symbols == 0 {
            return Err(DataError::Config("n_symbols must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Config(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        (FIRST_SYMBOL + self.n_symbols) as usize
    }

    pub fn max_seq_len(&self) -> usize {
        2 * self.max_len + 3
    }

    pub fn build(&self, symbols: &[u32], reverse: bool) -> PackedExample {
        let mut ids = Vec::with_capacity(2 * symbols.len() + 3);
        ids.push(TAG);
        ids.extend_from_slice(symbols);
        ids.push(if reverse { REV } else { COPY });
        let prefix_len = ids.len();
        if reverse {
            ids.extend(symbols.iter().rev());
        } else {
            ids.extend_from_slice(symbols);
        }
        ids.push(EOT);
        PackedExample::new(ids, prefix_len, Condition::Direct).expect("prefix within sequence")
    }

    pub fn sample(&self, rng: &mut impl Rng) -> PackedExample {
        let n = rng.random_range(self.min_len..=self.max_len);
        let symbols: Vec<u32> = (0..n)
            .map(|_| FIRST_SYMBOL + rng.random_range(0..self.n_symbols))
            .collect();
        self.build(&symbols, rng.random_bool(0.5))
    }

    /// Endless deterministic stream.
    pub fn stream(&self, seed: u64) -> impl Iterator<Item = PackedExample> {
        let task = *self;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::iter::from_fn(move || Some(task.sample(&mut rng)))
    }

    pub fn dataset(&self, seed: u64, n: usize) -> Vec<PackedExample> {
        self.stream(seed).take(n).collect()
    }
}
