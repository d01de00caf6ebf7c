//! Per-position divergence/entropy records along trajectories and the
//! aggregate statistics over them.
//!
//! [`analyze_pair`] walks a reference trajectory, evaluating both
//! policies at every position. Divergence is computed on truncated
//! distributions (matching the sampling configuration), while entropies
//! and ranks use the untruncated distributions each policy returns.
//! Aggregations (histograms, percentile curves, positional profiles,
//! divergence-entropy bins, token frequency tables) are pure functions
//! over immutable record slices; by default they pool tokens across all
//! sequences, with a per-sequence-mean mode available for cross-response
//! aggregation.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{js_divergence, TokenId, TruncationSpec};
use crate::policy::{Policy, PolicyError, Trajectory};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One analyzed token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenShiftRecord {
    pub seq_id: String,
    /// 0-based position within the generated response.
    pub pos: usize,
    pub seq_len: usize,
    /// `pos / seq_len`, in `[0, 1)`. Prompt tokens are excluded.
    pub norm_pos: f64,
    pub sampled: TokenId,
    /// JS divergence of the truncated next-token distributions, in nats.
    pub js: f64,
    /// Entropy of the base policy's untruncated distribution.
    pub base_entropy: f64,
    /// Entropy of the RL policy's untruncated distribution.
    pub rl_entropy: f64,
    pub base_rank_of_sampled: u32,
    pub rl_rank_of_sampled: u32,
}

/// Evaluates both policies at every position of `trajectory` and emits
/// one record per position.
pub fn analyze_pair(
    base: &dyn Policy,
    rl: &dyn Policy,
    trajectory: &Trajectory,
    trunc: &TruncationSpec,
) -> Result<Vec<TokenShiftRecord>, ShiftError> {
    let len = trajectory.len();
    let mut records = Vec::with_capacity(len);
    for t in 0..len {
        let prefix = trajectory.prefix(t);
        let base_full = base.next_dist(prefix)?;
        let rl_full = rl.next_dist(prefix)?;
        let js = js_divergence(&base_full.truncate(trunc), &rl_full.truncate(trunc));
        let sampled = trajectory.tokens[t];
        records.push(TokenShiftRecord {
            seq_id: trajectory.seq_id.clone(),
            pos: t,
            seq_len: len,
            norm_pos: t as f64 / len as f64,
            sampled,
            js,
            base_entropy: base_full.entropy(),
            rl_entropy: rl_full.entropy(),
            base_rank_of_sampled: base_full.rank_of(sampled),
            rl_rank_of_sampled: rl_full.rank_of(sampled),
        });
    }
    Ok(records)
}

/// [`analyze_pair`] over many trajectories, records concatenated in
/// trajectory order.
pub fn analyze_pairs(
    base: &dyn Policy,
    rl: &dyn Policy,
    trajectories: &[Trajectory],
    trunc: &TruncationSpec,
) -> Result<Vec<TokenShiftRecord>, ShiftError> {
    let mut records = Vec::new();
    for trajectory in trajectories {
        records.extend(analyze_pair(base, rl, trajectory, trunc)?);
    }
    Ok(records)
}

/// How values are pooled across multiple responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Every token position contributes one value.
    #[default]
    PooledTokens,
    /// Each sequence contributes the mean of its values.
    PerSequenceMean,
}

/// Extracts the JS values under the chosen aggregation. Sequence order
/// follows first appearance in `records`.
pub fn js_values(records: &[TokenShiftRecord], mode: Aggregation) -> Vec<f64> {
    match mode {
        Aggregation::PooledTokens => records.iter().map(|r| r.js).collect(),
        Aggregation::PerSequenceMean => {
            let mut order: Vec<&str> = Vec::new();
            let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for r in records {
                let entry = sums.entry(&r.seq_id).or_insert_with(|| {
                    order.push(&r.seq_id);
                    (0.0, 0)
                });
                entry.0 += r.js;
                entry.1 += 1;
            }
            order
                .iter()
                .map(|id| {
                    let (sum, n) = sums[id];
                    sum / n as f64
                })
                .collect()
        }
    }
}

/// Histogram bin edges (strictly increasing). Values below the first
/// edge fall into the first bin and values at or above the last edge
/// into the last, so counts always total the number of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub edges: Vec<f64>,
}

impl HistogramSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self, ShiftError> {
        if edges.len() < 2 {
            return Err(ShiftError::InvalidSpec(
                "histogram needs at least two edges".into(),
            ));
        }
        let increasing =
            edges.iter().all(|e| e.is_finite()) && edges.windows(2).all(|w| w[0] < w[1]);
        if !increasing {
            return Err(ShiftError::InvalidSpec(
                "histogram edges must be strictly increasing".into(),
            ));
        }
        Ok(Self { edges })
    }

    /// `n` equal-width bins over `[lo, hi]`.
    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self, ShiftError> {
        if n == 0 || !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(ShiftError::InvalidSpec("need lo < hi and n >= 1".into()));
        }
        let edges = (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .collect();
        Self::new(edges)
    }

    /// `n` log-spaced bins over `[lo, hi]` with `lo > 0`.
    pub fn log10(lo: f64, hi: f64, n: usize) -> Result<Self, ShiftError> {
        if n == 0 || !(lo > 0.0 && lo < hi) {
            return Err(ShiftError::InvalidSpec(
                "log bins need 0 < lo < hi and n >= 1".into(),
            ));
        }
        let (llo, lhi) = (lo.log10(), hi.log10());
        let edges = (0..=n)
            .map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / n as f64))
            .collect();
        Self::new(edges)
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    fn bin_of(&self, v: f64) -> usize {
        let n = self.num_bins();
        match self
            .edges
            .binary_search_by(|e| e.partial_cmp(&v).expect("finite edges"))
        {
            Ok(i) => i.min(n - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 1),
        }
    }
}

/// Counts values per bin; the counts sum to `values.len()` exactly.
pub fn histogram(values: &[f64], spec: &HistogramSpec) -> Vec<u64> {
    let mut counts = vec![0u64; spec.num_bins()];
    for &v in values {
        counts[spec.bin_of(v)] += 1;
    }
    counts
}

/// Binned counts of the per-record JS divergence (pooled tokens).
pub fn js_histogram(records: &[TokenShiftRecord], spec: &HistogramSpec) -> Vec<u64> {
    histogram(&js_values(records, Aggregation::PooledTokens), spec)
}

/// Percentile query points; each must lie strictly inside `(0, 100)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileSpec {
    pub percentiles: Vec<f64>,
}

impl PercentileSpec {
    pub fn new(percentiles: Vec<f64>) -> Result<Self, ShiftError> {
        if percentiles.is_empty() {
            return Err(ShiftError::InvalidSpec("no percentiles requested".into()));
        }
        if percentiles.iter().any(|&p| !(p > 0.0 && p < 100.0)) {
            return Err(ShiftError::InvalidSpec(
                "percentiles must lie strictly inside (0, 100)".into(),
            ));
        }
        Ok(Self { percentiles })
    }

    /// 5, 10, ..., 95, 99.
    pub fn standard() -> Self {
        let mut ps: Vec<f64> = (1..20).map(|i| 5.0 * i as f64).collect();
        ps.push(99.0);
        Self { percentiles: ps }
    }
}

/// Linear interpolation between closest ranks on sorted data.
fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p / 100.0 * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile curve over raw values.
pub fn percentiles(values: &[f64], spec: &PercentileSpec) -> Result<Vec<(f64, f64)>, ShiftError> {
    if values.is_empty() {
        return Err(ShiftError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(spec
        .percentiles
        .iter()
        .map(|&p| (p, percentile_of_sorted(&sorted, p)))
        .collect())
}

/// Percentile curve of the per-record JS divergence (pooled tokens).
pub fn js_percentiles(
    records: &[TokenShiftRecord],
    spec: &PercentileSpec,
) -> Result<Vec<(f64, f64)>, ShiftError> {
    percentiles(&js_values(records, Aggregation::PooledTokens), spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p25: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Statistics of JS divergence within one normalized-position bin.
/// `stats` is `None` for empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub stats: Option<BinStats>,
}

/// Profiles JS divergence against normalized position: `n_bins` equal
/// bins partitioning `[0, 1)`.
pub fn positional_profile(records: &[TokenShiftRecord], n_bins: NonZeroUsize) -> Vec<PositionBin> {
    let n = n_bins.get();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n];
    for r in records {
        let idx = ((r.norm_pos * n as f64) as usize).min(n - 1);
        buckets[idx].push(r.js);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, mut values)| {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            let count = values.len();
            let stats = if values.is_empty() {
                None
            } else {
                values.sort_by(|a, b| a.partial_cmp(b).expect("finite js"));
                let mean = values.iter().sum::<f64>() / count as f64;
                Some(BinStats {
                    mean,
                    median: percentile_of_sorted(&values, 50.0),
                    p5: percentile_of_sorted(&values, 5.0),
                    p25: percentile_of_sorted(&values, 25.0),
                    p75: percentile_of_sorted(&values, 75.0),
                    p95: percentile_of_sorted(&values, 95.0),
                })
            };
            PositionBin {
                lo,
                hi,
                count,
                stats,
            }
        })
        .collect()
}

/// Base/RL entropies of one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySample {
    pub base: f64,
    pub rl: f64,
}

/// Entropy samples split into low- and high-divergence groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyByDivergence {
    pub threshold: f64,
    pub low: Vec<EntropySample>,
    pub high: Vec<EntropySample>,
}

/// Partitions records at a JS threshold: `js > threshold` goes to the
/// high group, everything else (including exact ties) to the low group.
pub fn entropy_by_divergence_bins(
    records: &[TokenShiftRecord],
    threshold: f64,
) -> Result<EntropyByDivergence, ShiftError> {
    if !(threshold > 0.0 && threshold < LN_2) {
        return Err(ShiftError::InvalidSpec(format!(
            "divergence threshold must lie in (0, ln 2), got {threshold}"
        )));
    }
    let mut out = EntropyByDivergence {
        threshold,
        low: Vec::new(),
        high: Vec::new(),
    };
    for r in records {
        let sample = EntropySample {
            base: r.base_entropy,
            rl: r.rl_entropy,
        };
        if r.js > threshold {
            out.high.push(sample);
        } else {
            out.low.push(sample);
        }
    }
    Ok(out)
}

/// Sampled-token statistics for one divergence class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TokenClassStats {
    /// Occurrences of each sampled token within the class.
    pub counts: BTreeMap<TokenId, u64>,
    /// For the most frequent tokens of the class: all JS values observed
    /// for that token across the whole record set (not just in-class),
    /// exposing how context-dependent its divergence is.
    pub js_values: BTreeMap<TokenId, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDivergenceReport {
    pub high_threshold: f64,
    pub low_threshold: f64,
    pub high: TokenClassStats,
    pub low: TokenClassStats,
}

fn top_tokens(counts: &BTreeMap<TokenId, u64>, n: usize) -> Vec<TokenId> {
    let mut by_count: Vec<(&TokenId, &u64)> = counts.iter().collect();
    // Descending count, ties by ascending token id.
    by_count.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    by_count.into_iter().take(n).map(|(t, _)| *t).collect()
}

/// Frequency tables of sampled tokens in the high-divergence
/// (`js > high_thresh`) and low-divergence (`js < low_thresh`) regimes,
/// with full per-token JS distributions for the `top_n` most frequent
/// tokens of each class.
pub fn token_frequency_by_divergence(
    records: &[TokenShiftRecord],
    high_thresh: f64,
    low_thresh: f64,
    top_n: usize,
) -> Result<TokenDivergenceReport, ShiftError> {
    if low_thresh.is_nan() || high_thresh.is_nan() || low_thresh >= high_thresh {
        return Err(ShiftError::InvalidSpec(format!(
            "low threshold {low_thresh} must be below high threshold {high_thresh}"
        )));
    }
    let mut high = TokenClassStats::default();
    let mut low = TokenClassStats::default();
    let mut all_js: BTreeMap<TokenId, Vec<f64>> = BTreeMap::new();
    for r in records {
        all_js.entry(r.sampled).or_default().push(r.js);
        if r.js > high_thresh {
            *high.counts.entry(r.sampled).or_insert(0) += 1;
        }
        if r.js < low_thresh {
            *low.counts.entry(r.sampled).or_insert(0) += 1;
        }
    }
    for token in top_tokens(&high.counts, top_n) {
        high.js_values.insert(token, all_js[&token].clone());
    }
    for token in top_tokens(&low.counts, top_n) {
        low.js_values.insert(token, all_js[&token].clone());
    }
    Ok(TokenDivergenceReport {
        high_threshold: high_thresh,
        low_threshold: low_thresh,
        high,
        low,
    })
}
