//! n-gram overlap between evaluation samples and a training corpus, and the
//! four-subset significance test on per-sample scores.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ContaminationError {
    #[error("n-gram length must be at least 1")]
    ZeroN,
    #[error("subset is empty")]
    EmptySubset,
    #[error("{scores} scores for {samples} samples")]
    Length { scores: usize, samples: usize },
    #[error("subset index {0} out of range")]
    Index(usize),
}

pub type Result<T> = std::result::Result<T, ContaminationError>;

/// Exact-membership set of every length-`n` window of a token stream.
#[derive(Clone, Debug, Default)]
pub struct NgramIndex {
    n: usize,
    grams: HashSet<Vec<u32>>,
}

impl NgramIndex {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(ContaminationError::ZeroN);
        }
        Ok(Self { n, grams: HashSet::new() })
    }

    /// Adds the windows of one document; windows never span documents.
    pub fn extend(&mut self, tokens: &[u32]) {
        for w in tokens.windows(self.n) {
            if !self.grams.contains(w) {
                self.grams.insert(w.to_vec());
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn contains(&self, gram: &[u32]) -> bool {
        gram.len() == self.n && self.grams.contains(gram)
    }
}

pub fn ngram_index(corpus: &[u32], n: usize) -> Result<NgramIndex> {
    let mut idx = NgramIndex::new(n)?;
    idx.extend(corpus);
    Ok(idx)
}

/// Percentage of sample tokens covered by at least one window that also
/// occurs in the index. Samples shorter than `n` score 0.
pub fn contamination_pct(sample: &[u32], index: &NgramIndex) -> f64 {
    let n = index.n();
    if sample.is_empty() || sample.len() < n {
        return 0.0;
    }
    let mut covered = vec![false; sample.len()];
    for (i, w) in sample.windows(n).enumerate() {
        if index.contains(w) {
            covered[i..i + n].iter_mut().for_each(|c| *c = true);
        }
    }
    100.0 * covered.iter().filter(|&&c| c).count() as f64 / sample.len() as f64
}

pub const CLEAN_BELOW: f64 = 20.0;
pub const DIRTY_FROM: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    Clean,
    NotClean,
    NotDirty,
    Dirty,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Self::Clean, Self::NotClean, Self::NotDirty, Self::Dirty];

    pub fn contains(self, pct: f64) -> bool {
        match self {
            Self::Clean => pct < CLEAN_BELOW,
            Self::NotClean => pct >= CLEAN_BELOW,
            Self::NotDirty => pct < DIRTY_FROM,
            Self::Dirty => pct >= DIRTY_FROM,
        }
    }

    /// Sign of the deviation that counts as evidence of contamination.
    pub fn expected_sign(self) -> f64 {
        match self {
            Self::Clean | Self::NotDirty => -1.0,
            Self::NotClean | Self::Dirty => 1.0,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clean => "Clean",
            Self::NotClean => "Not Clean",
            Self::NotDirty => "Not Dirty",
            Self::Dirty => "Dirty",
        })
    }
}

/// Sample indices per subset, in `Subset::ALL` order.
pub fn partition_subsets(percents: &[f64]) -> [Vec<usize>; 4] {
    Subset::ALL.map(|s| (0..percents.len()).filter(|&i| s.contains(percents[i])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZStat {
    /// Subset mean score.
    pub mean: f64,
    /// Population mean.
    pub mu: f64,
    /// Population standard deviation over `sqrt(k)`.
    pub sigma: f64,
    pub z: f64,
    /// Set when `sigma` is 0; `z` is then reported as 0.
    pub degenerate: bool,
}

pub fn z_statistic(scores: &[f64], subset: &[usize]) -> Result<ZStat> {
    if subset.is_empty() || scores.is_empty() {
        return Err(ContaminationError::EmptySubset);
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= scores.len()) {
        return Err(ContaminationError::Index(bad));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let constant = scores.iter().all(|&s| s == scores[0]);
    let sd = if constant {
        0.0
    } else {
        (scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let k = subset.len() as f64;
    let mean = subset.iter().map(|&i| scores[i]).sum::<f64>() / k;
    let sigma = sd / k.sqrt();
    let degenerate = sigma == 0.0;
    let z = if degenerate { 0.0 } else { (mean - mu) / sigma };
    Ok(ZStat {
        mean,
        mu,
        sigma,
        z,
        degenerate,
    })
}

/// True iff every `|Z| > 2` with Clean and Not Dirty below average and
/// Not Clean and Dirty above. Order follows `Subset::ALL`.
pub fn significance_verdict(z: [f64; 4]) -> bool {
    Subset::ALL
        .iter()
        .zip(z)
        .all(|(s, z)| z.abs() > 2.0 && z * s.expected_sign() > 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub subset: Subset,
    pub k: usize,
    pub avg_contamination: Option<f64>,
    pub stat: Option<ZStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub n: usize,
    pub percents: Vec<f64>,
    pub subsets: Vec<SubsetRecord>,
    /// False whenever a subset is empty.
    pub significant: bool,
}

impl ContaminationReport {
    pub fn new(n: usize, percents: Vec<f64>, scores: &[f64]) -> Result<Self> {
        if percents.len() != scores.len() {
            return Err(ContaminationError::Length {
                scores: scores.len(),
                samples: percents.len(),
            });
        }
        let parts = partition_subsets(&percents);
        let mut subsets = Vec::with_capacity(4);
        for (subset, idx) in Subset::ALL.into_iter().zip(parts) {
            let (avg, stat) = if idx.is_empty() {
                (None, None)
            } else {
                let avg = idx.iter().map(|&i| percents[i]).sum::<f64>() / idx.len() as f64;
                (Some(avg), Some(z_statistic(scores, &idx)?))
            };
            subsets.push(SubsetRecord {
                subset,
                k: idx.len(),
                avg_contamination: avg,
                stat,
            });
        }
        let zs: Option<Vec<f64>> = subsets.iter().map(|r| r.stat.map(|s| s.z)).collect();
        let significant = zs.is_some_and(|z| significance_verdict([z[0], z[1], z[2], z[3]]));
        Ok(Self {
            n,
            percents,
            subsets,
            significant,
        })
    }

    pub fn z_values(&self) -> Option<[f64; 4]> {
        let z: Vec<f64> = self.subsets.iter().map(|r| r.stat.map(|s| s.z)).collect::<Option<_>>()?;
        Some([z[0], z[1], z[2], z[3]])
    }

    /// Tab-separated table: subset, avg contamination %, k, X̄, μ, Z.
    pub fn table(&self) -> String {
        let mut out = format!("# n = {}\nsubset\tavg_contamination_pct\tk\tmean\tmu\tz\n", self.n);
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        for r in &self.subsets {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.subset,
                opt(r.avg_contamination, 1),
                r.k,
                opt(r.stat.map(|s| s.mean), 4),
                opt(r.stat.map(|s| s.mu), 4),
                opt(r.stat.map(|s| s.z), 2),
            );
        }
        let _ = writeln!(out, "# significant\t{}", self.significant);
        out
    }
}

/// Fraction of `trials` in which shuffling `scores` against `percents`
/// still passes the four-subset rule.
pub fn false_trigger_rate(percents: &[f64], scores: &[f64], trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = scores.to_vec();
    let mut hits = 0;
    for _ in 0..trials {
        shuffled.shuffle(&mut rng);
        if ContaminationReport::new(0, percents.to_vec(), &shuffled)?.significant {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}
