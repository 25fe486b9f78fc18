use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Document, Result};

/// Sampling rule for one dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetRule {
    /// Cap on the whole dataset (one stratum).
    pub cap: Option<usize>,
    /// Cap per task; each task becomes its own stratum.
    pub task_cap: Option<usize>,
    /// Explicit repetition factor, applied after capping.
    pub multiplier: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub seed: u64,
    /// Uncapped strata with fewer documents than this are repeated
    /// `small_multiplier` times.
    pub small_threshold: usize,
    pub small_multiplier: usize,
    pub datasets: BTreeMap<String, DatasetRule>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            small_threshold: 50_000,
            small_multiplier: 10,
            datasets: BTreeMap::new(),
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.small_multiplier == 0 {
            return Err(DataError::Config("small_multiplier must be >= 1".into()));
        }
        for (name, rule) in &self.datasets {
            if rule.multiplier == Some(0) {
                return Err(DataError::Config(format!("{name}: multiplier must be >= 1")));
            }
            if rule.cap.is_some() && rule.task_cap.is_some() {
                return Err(DataError::Config(format!("{name}: set either cap or task_cap, not both")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumStats {
    pub key: String,
    pub available: usize,
    pub kept: usize,
    pub multiplier: usize,
    pub emitted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureStats {
    pub strata: Vec<StratumStats>,
    pub unique_documents: usize,
    pub emitted_documents: usize,
    /// Instruction + response bytes of distinct documents vs. of the stream.
    pub unique_bytes: usize,
    pub emitted_bytes: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn stratum_key(doc: &Document, rule: Option<&DatasetRule>) -> String {
    match rule {
        Some(r) if r.task_cap.is_some() => format!("{}/{}", doc.dataset, doc.task),
        _ => doc.dataset.clone(),
    }
}

/// Capped, upsampled and shuffled document stream. Output depends only on
/// `(docs, spec)`.
pub fn stratified_sample(docs: &[Document], spec: &MixtureSpec) -> Result<(Vec<Document>, MixtureStats)> {
    spec.validate()?;
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        if d.dataset.is_empty() || d.task.is_empty() {
            return Err(DataError::Validation(format!("document {i} lacks dataset/task labels")));
        }
        let rule = spec.datasets.get(&d.dataset);
        strata.entry(stratum_key(d, rule)).or_default().push(i);
    }
    let mut picked = Vec::new();
    let mut stats = Vec::new();
    let mut unique = HashSet::new();
    for (key, members) in &strata {
        let dataset = &docs[members[0]].dataset;
        let rule = spec.datasets.get(dataset);
        let cap = rule.and_then(|r| r.task_cap.or(r.cap));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(key));
        let kept: Vec<usize> = match cap {
            Some(c) if c < members.len() => {
                let mut idx = index::sample(&mut rng, members.len(), c).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| members[i]).collect()
            }
            _ => members.clone(),
        };
        let multiplier = match rule.and_then(|r| r.multiplier) {
            Some(m) => m,
            None if cap.is_none() && members.len() < spec.small_threshold => spec.small_multiplier,
            None => 1,
        };
        for _ in 0..multiplier {
            picked.extend_from_slice(&kept);
        }
        unique.extend(kept.iter().copied());
        stats.push(StratumStats {
            key: key.clone(),
            available: members.len(),
            kept: kept.len(),
            multiplier,
            emitted: kept.len() * multiplier,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    picked.shuffle(&mut rng);
    let size = |i: &usize| docs[*i].instruction.len() + docs[*i].response.len();
    let out_stats = MixtureStats {
        strata: stats,
        unique_documents: unique.len(),
        emitted_documents: picked.len(),
        unique_bytes: unique.iter().map(size).sum(),
        emitted_bytes: picked.iter().map(size).sum(),
    };
    Ok((picked.into_iter().map(|i| docs[i].clone()).collect(), out_stats))
}
