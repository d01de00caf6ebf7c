//! Fine-grained mechanics of distribution shifts at divergent positions:
//! candidate-set overlap, rank provenance of promoted tokens, tail
//! promotion, evolution across checkpoints, and the parameter-level gap
//! ratio.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accum::csum;
use crate::dist::{js_divergence, Distribution, TruncationSpec};
use crate::policy::{Policy, PolicyError, Trajectory};
use crate::shift::{percentiles, PercentileSpec, ShiftError};

const LN_2: f64 = std::f64::consts::LN_2;

/// Default JS threshold defining the divergent set.
pub const DIVERGENT_JS_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MechanicsError {
    #[error("no positions qualify at JS threshold {threshold}")]
    NoQualifyingPositions { threshold: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("weight vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: both weight vectors are all-zero")]
    DegenerateInput,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
}

/// Both models' full next-token distributions at one position, plus the
/// truncated-distribution JS divergence used for thresholding.
#[derive(Debug, Clone)]
pub struct PositionPair {
    pub seq_id: String,
    pub pos: usize,
    pub base: Distribution,
    pub rl: Distribution,
    pub js: f64,
}

/// Evaluates both policies along trajectories, keeping the full
/// distributions for mechanics-level analyses.
pub fn collect_pairs(
    base: &dyn Policy,
    rl: &dyn Policy,
    trajectories: &[Trajectory],
    trunc: &TruncationSpec,
) -> Result<Vec<PositionPair>, MechanicsError> {
    let mut pairs = Vec::new();
    for trajectory in trajectories {
        for t in 0..trajectory.len() {
            let prefix = trajectory.prefix(t);
            let base_full = base.next_dist(prefix)?;
            let rl_full = rl.next_dist(prefix)?;
            let js = js_divergence(&base_full.truncate(trunc), &rl_full.truncate(trunc));
            pairs.push(PositionPair {
                seq_id: trajectory.seq_id.clone(),
                pos: t,
                base: base_full,
                rl: rl_full,
                js,
            });
        }
    }
    Ok(pairs)
}

fn qualifying(
    pairs: &[PositionPair],
    js_thresh: f64,
) -> Result<Vec<&PositionPair>, MechanicsError> {
    if !(js_thresh > 0.0 && js_thresh < LN_2) {
        return Err(MechanicsError::InvalidParam(format!(
            "JS threshold must lie in (0, ln 2), got {js_thresh}"
        )));
    }
    let q: Vec<&PositionPair> = pairs.iter().filter(|p| p.js > js_thresh).collect();
    if q.is_empty() {
        return Err(MechanicsError::NoQualifyingPositions {
            threshold: js_thresh,
        });
    }
    Ok(q)
}

/// Mean top-k overlap per k, over positions with `js > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurve {
    pub js_threshold: f64,
    /// `overlaps[k-1]` = mean of `|top_k(base) ∩ top_k(rl)| / k`.
    pub overlaps: Vec<f64>,
    pub positions: usize,
}

/// Fraction of shared tokens between the two models' top-k sets,
/// restricted to divergent positions, for k = 1..=K.
pub fn topk_overlap_curve(
    pairs: &[PositionPair],
    js_thresh: f64,
    k_max: usize,
) -> Result<OverlapCurve, MechanicsError> {
    if k_max == 0 {
        return Err(MechanicsError::InvalidParam("K must be >= 1".into()));
    }
    let q = qualifying(pairs, js_thresh)?;
    let mut overlaps = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let total: f64 = csum(q.iter().map(|p| {
            let a = p.base.top_k_set(k);
            let b = p.rl.top_k_set(k);
            a.intersection(&b).count() as f64 / k as f64
        }));
        overlaps.push(total / q.len() as f64);
    }
    Ok(OverlapCurve {
        js_threshold: js_thresh,
        overlaps,
        positions: q.len(),
    })
}

/// For j = 1..=m, the distribution of the base model's rank of the RL
/// model's j-th ranked token, over divergent positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistograms {
    pub js_threshold: f64,
    pub positions: usize,
    /// `per_j[j-1]` maps base rank (1-based) to count.
    pub per_j: Vec<BTreeMap<u32, u64>>,
}

pub fn base_rank_distribution_of_rl_topk(
    pairs: &[PositionPair],
    js_thresh: f64,
    m: usize,
) -> Result<RankHistograms, MechanicsError> {
    if m == 0 {
        return Err(MechanicsError::InvalidParam("m must be >= 1".into()));
    }
    let q = qualifying(pairs, js_thresh)?;
    if let Some(p) = q.iter().find(|p| (p.rl.vocab_size() as usize) < m) {
        return Err(MechanicsError::InvalidParam(format!(
            "m = {m} exceeds vocabulary size {}",
            p.rl.vocab_size()
        )));
    }
    let mut per_j: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); m];
    for p in &q {
        let ranked = p.rl.ranked_tokens(m);
        for (j, &token) in ranked.iter().enumerate() {
            let base_rank = p.base.rank_of(token);
            *per_j[j].entry(base_rank).or_insert(0) += 1;
        }
    }
    Ok(RankHistograms {
        js_threshold: js_thresh,
        positions: q.len(),
        per_j,
    })
}

/// Tail-promotion summary at divergent positions: how often the RL
/// model's top-1 token was low-probability under the base model, and
/// what RL probability those promoted tokens carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub js_threshold: f64,
    pub positions: usize,
    /// `(tau, fraction of divergent positions with base prob < tau)`.
    pub fraction_below: Vec<(f64, f64)>,
    pub cutoff: f64,
    /// RL probabilities of the RL top-1 tokens whose base probability
    /// fell below `cutoff`.
    pub sub_cutoff_rl_probs: Vec<f64>,
}

pub fn tail_promotion_stats(
    pairs: &[PositionPair],
    js_thresh: f64,
    thresholds: &[f64],
    cutoff: f64,
) -> Result<TailStats, MechanicsError> {
    let ascending_probs = !thresholds.is_empty()
        && thresholds.iter().all(|&t| t > 0.0 && t < 1.0)
        && thresholds.windows(2).all(|w| w[0] < w[1]);
    if !ascending_probs {
        return Err(MechanicsError::InvalidParam(
            "thresholds must be ascending probabilities in (0, 1)".into(),
        ));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(MechanicsError::InvalidParam(format!(
            "cutoff must lie in (0, 1), got {cutoff}"
        )));
    }
    let q = qualifying(pairs, js_thresh)?;
    let base_probs: Vec<(f64, f64)> = q
        .iter()
        .map(|p| {
            let top1 = p.rl.token_at_rank(1);
            (p.base.prob(top1), p.rl.prob(top1))
        })
        .collect();
    let fraction_below = thresholds
        .iter()
        .map(|&tau| {
            let n = base_probs.iter().filter(|(bp, _)| *bp < tau).count();
            (tau, n as f64 / base_probs.len() as f64)
        })
        .collect();
    let sub_cutoff_rl_probs = base_probs
        .iter()
        .filter(|(bp, _)| *bp < cutoff)
        .map(|&(_, rp)| rp)
        .collect();
    Ok(TailStats {
        js_threshold: js_thresh,
        positions: q.len(),
        fraction_below,
        cutoff,
        sub_cutoff_rl_probs,
    })
}

/// Positions whose JS divergence exceeded a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergentSet {
    pub js_threshold: f64,
    pub positions: BTreeSet<(String, usize)>,
}

impl DivergentSet {
    pub fn from_pairs(pairs: &[PositionPair], js_thresh: f64) -> Self {
        Self {
            js_threshold: js_thresh,
            positions: pairs
                .iter()
                .filter(|p| p.js > js_thresh)
                .map(|p| (p.seq_id.clone(), p.pos))
                .collect(),
        }
    }

    /// Jaccard index `|A ∩ B| / |A ∪ B|`; 1 for two empty sets.
    pub fn jaccard(&self, other: &Self) -> f64 {
        jaccard(&self.positions, &other.positions)
    }
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Which reference each checkpoint is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvolutionMode {
    /// Every checkpoint against the earliest policy supplied.
    #[default]
    AgainstBase,
    /// Every checkpoint against its predecessor.
    Consecutive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub index: usize,
    pub js_percentiles: Vec<(f64, f64)>,
    pub divergent_positions: usize,
    pub jaccard_with_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub mode: EvolutionMode,
    pub js_threshold: f64,
    pub checkpoints: Vec<CheckpointStats>,
}

/// Tracks divergence across training checkpoints along fixed reference
/// trajectories: per-checkpoint JS percentiles and the Jaccard index of
/// each checkpoint's divergent set with the final checkpoint's.
pub fn checkpoint_evolution(
    checkpoints: &[&dyn Policy],
    trajectories: &[Trajectory],
    trunc: &TruncationSpec,
    percentile_spec: &PercentileSpec,
    mode: EvolutionMode,
    js_thresh: f64,
) -> Result<EvolutionReport, MechanicsError> {
    if checkpoints.len() < 2 {
        return Err(MechanicsError::InvalidParam(
            "need at least two checkpoints".into(),
        ));
    }
    type CheckpointAccum = (Vec<f64>, BTreeSet<(String, usize)>);
    let mut per_checkpoint: Vec<CheckpointAccum> = Vec::new();
    for (i, ck) in checkpoints.iter().enumerate() {
        let reference: &dyn Policy = match mode {
            EvolutionMode::AgainstBase => checkpoints[0],
            EvolutionMode::Consecutive => checkpoints[i.saturating_sub(1)],
        };
        let mut js_all = Vec::new();
        let mut divergent = BTreeSet::new();
        for trajectory in trajectories {
            for t in 0..trajectory.len() {
                let prefix = trajectory.prefix(t);
                let dr = reference.next_dist(prefix)?;
                let dc = ck.next_dist(prefix)?;
                let js = js_divergence(&dr.truncate(trunc), &dc.truncate(trunc));
                if js > js_thresh {
                    divergent.insert((trajectory.seq_id.clone(), t));
                }
                js_all.push(js);
            }
        }
        per_checkpoint.push((js_all, divergent));
    }
    let final_set = &per_checkpoint.last().expect("non-empty").1;
    let checkpoints_out = per_checkpoint
        .iter()
        .enumerate()
        .map(|(index, (js_all, divergent))| {
            Ok(CheckpointStats {
                index,
                js_percentiles: percentiles(js_all, percentile_spec)?,
                divergent_positions: divergent.len(),
                jaccard_with_final: jaccard(divergent, final_set),
            })
        })
        .collect::<Result<Vec<_>, ShiftError>>()?;
    Ok(EvolutionReport {
        mode,
        js_threshold: js_thresh,
        checkpoints: checkpoints_out,
    })
}

/// Relative gap ratio `sum|w_o - w_t| / (sum|w_o| + sum|w_t|)`, a scalar
/// measure of parameter change in `[0, 1]`.
pub fn weight_gap_ratio(original: &[f64], tuned: &[f64]) -> Result<f64, MechanicsError> {
    if original.len() != tuned.len() {
        return Err(MechanicsError::LengthMismatch(original.len(), tuned.len()));
    }
    let num = csum(
        original
            .iter()
            .zip(tuned.iter())
            .map(|(&o, &t)| (o - t).abs()),
    );
    let denom = csum(original.iter().map(|o| o.abs())) + csum(tuned.iter().map(|t| t.abs()));
    if denom == 0.0 {
        return Err(MechanicsError::DegenerateInput);
    }
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Distribution, TokenId};
    use crate::policy::{Prefix, ToyPolicy, ToyPolicyKind, ToyPolicySpec};
    use crate::rng::DrawStream;

    fn pair(seq: &str, pos: usize, base: &[f64], rl: &[f64], js: f64) -> PositionPair {
        PositionPair {
            seq_id: seq.into(),
            pos,
            base: Distribution::from_weights(base).unwrap(),
            rl: Distribution::from_weights(rl).unwrap(),
            js,
        }
    }

    fn toy(seed: u64) -> ToyPolicy {
        ToyPolicy::new(ToyPolicySpec {
            kind: ToyPolicyKind::TabularMarkov,
            vocab_size: 6,
            order: 1,
            seed,
            temperature: 1.0,
            eos: TokenId(0),
        })
        .unwrap()
    }

    fn toy_trajectories(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<Trajectory> {
        let mut s = DrawStream::new(seed);
        (0..n)
            .map(|i| {
                Trajectory::new(
                    format!("t{i}"),
                    (0..len)
                        .map(|_| TokenId((s.next_u64() % vocab as u64) as u32))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn overlap_identical_distributions() {
        let pairs = vec![pair("s", 0, &[0.5, 0.3, 0.2], &[0.5, 0.3, 0.2], 0.3)];
        let curve = topk_overlap_curve(&pairs, 0.1, 3).unwrap();
        assert_eq!(curve.overlaps, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn overlap_disjoint_supports() {
        let base = Distribution::from_sparse(8, &[(TokenId(0), 0.6), (TokenId(1), 0.4)]).unwrap();
        let rl = Distribution::from_sparse(8, &[(TokenId(4), 0.6), (TokenId(5), 0.4)]).unwrap();
        let pairs = vec![PositionPair {
            seq_id: "s".into(),
            pos: 0,
            base,
            rl,
            js: 0.5,
        }];
        let curve = topk_overlap_curve(&pairs, 0.1, 2).unwrap();
        assert_eq!(curve.overlaps, vec![0.0, 0.0]);
    }

    #[test]
    fn overlap_half_shared_top2() {
        // Top-2 sets {0,1} and {1,2} share exactly one token.
        let pairs = vec![pair("s", 0, &[0.5, 0.4, 0.1], &[0.1, 0.4, 0.5], 0.3)];
        let curve = topk_overlap_curve(&pairs, 0.1, 2).unwrap();
        assert_eq!(curve.overlaps[1], 0.5);
    }

    #[test]
    fn overlap_at_full_vocab_is_one() {
        let pairs = vec![pair("s", 0, &[0.5, 0.3, 0.2], &[0.1, 0.2, 0.7], 0.3)];
        let curve = topk_overlap_curve(&pairs, 0.1, 3).unwrap();
        assert_eq!(curve.overlaps[2], 1.0);
    }

    #[test]
    fn overlap_requires_qualifying_positions() {
        let pairs = vec![pair("s", 0, &[1.0], &[1.0], 0.0)];
        assert!(matches!(
            topk_overlap_curve(&pairs, 0.1, 2).unwrap_err(),
            MechanicsError::NoQualifyingPositions { .. }
        ));
    }

    #[test]
    fn rank_histograms_identical_models() {
        let pairs = vec![
            pair("s", 0, &[0.5, 0.3, 0.2], &[0.5, 0.3, 0.2], 0.3),
            pair("s", 1, &[0.2, 0.5, 0.3], &[0.2, 0.5, 0.3], 0.3),
        ];
        let h = base_rank_distribution_of_rl_topk(&pairs, 0.1, 3).unwrap();
        for (j, hist) in h.per_j.iter().enumerate() {
            assert_eq!(hist[&(j as u32 + 1)], 2);
            assert_eq!(hist.values().sum::<u64>(), h.positions as u64);
        }
    }

    #[test]
    fn rank_histogram_top1_is_base_second() {
        // RL top-1 (token 1) is ranked second by base everywhere.
        let pairs = vec![
            pair("s", 0, &[0.6, 0.4], &[0.3, 0.7], 0.3),
            pair("s", 1, &[0.7, 0.3], &[0.2, 0.8], 0.3),
        ];
        let h = base_rank_distribution_of_rl_topk(&pairs, 0.1, 1).unwrap();
        assert_eq!(h.per_j[0][&2], 2);
    }

    #[test]
    fn rank_histograms_match_brute_force() {
        let base = toy(21);
        let rl = toy(22);
        let trajectories = toy_trajectories(4, 12, 6, 77);
        let pairs = collect_pairs(&base, &rl, &trajectories, &TruncationSpec::none()).unwrap();
        let thresh = 0.02;
        let m = 3;
        let h = base_rank_distribution_of_rl_topk(&pairs, thresh, m).unwrap();

        // Brute force: dense recount via next_dist calls.
        let mut expected: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); m];
        let mut count = 0;
        for traj in &trajectories {
            for t in 0..traj.len() {
                let prefix = Prefix::new(&traj.seq_id, &traj.tokens[..t]);
                let db = base.next_dist(prefix).unwrap();
                let dr = rl.next_dist(prefix).unwrap();
                if js_divergence(&db, &dr) > thresh {
                    count += 1;
                    for j in 1..=m {
                        let token = dr.token_at_rank(j);
                        *expected[j - 1].entry(db.rank_of(token)).or_insert(0) += 1;
                    }
                }
            }
        }
        assert_eq!(h.positions, count);
        assert_eq!(h.per_j, expected);
    }

    #[test]
    fn tail_stats_base_confident() {
        // Identical models whose top-1 prob is always >= 0.5: no token
        // falls below small thresholds.
        let pairs = vec![
            pair("s", 0, &[0.6, 0.4], &[0.6, 0.4], 0.3),
            pair("s", 1, &[0.7, 0.3], &[0.7, 0.3], 0.3),
        ];
        let stats = tail_promotion_stats(&pairs, 0.1, &[0.01, 0.1, 0.5], 0.01).unwrap();
        assert_eq!(stats.fraction_below[0].1, 0.0);
        assert_eq!(stats.fraction_below[1].1, 0.0);
        assert_eq!(stats.fraction_below[2].1, 0.0);
        assert!(stats.sub_cutoff_rl_probs.is_empty());
    }

    #[test]
    fn tail_stats_promoted_tail_token() {
        // RL promotes a base-prob-0.001 token at every divergent position.
        let pairs = vec![
            pair("s", 0, &[0.999, 0.001], &[0.05, 0.95], 0.4),
            pair("s", 1, &[0.999, 0.001], &[0.1, 0.9], 0.4),
        ];
        let stats = tail_promotion_stats(&pairs, 0.1, &[0.01, 0.5], 0.01).unwrap();
        assert_eq!(stats.fraction_below[0].1, 1.0);
        assert_eq!(stats.sub_cutoff_rl_probs, vec![0.95, 0.9]);
    }

    #[test]
    fn tail_stats_match_brute_force() {
        let base = toy(31);
        let rl = toy(32);
        let trajectories = toy_trajectories(4, 10, 6, 99);
        let pairs = collect_pairs(&base, &rl, &trajectories, &TruncationSpec::none()).unwrap();
        let thresh = 0.02;
        let taus = [0.05, 0.2, 0.8];
        let stats = tail_promotion_stats(&pairs, thresh, &taus, 0.05).unwrap();

        let mut n = 0usize;
        let mut below = [0usize; 3];
        for p in &pairs {
            if p.js > thresh {
                n += 1;
                let top1 = p.rl.token_at_rank(1);
                for (count, &tau) in below.iter_mut().zip(&taus) {
                    if p.base.prob(top1) < tau {
                        *count += 1;
                    }
                }
            }
        }
        assert_eq!(stats.positions, n);
        for i in 0..3 {
            assert_eq!(stats.fraction_below[i].1, below[i] as f64 / n as f64);
        }
    }

    #[test]
    fn jaccard_cases() {
        let a: BTreeSet<u32> = [1, 2].into();
        let b: BTreeSet<u32> = [2, 3].into();
        assert_eq!(jaccard(&a, &b), 1.0 / 3.0);
        assert_eq!(jaccard(&a, &a), 1.0);
        let empty: BTreeSet<u32> = BTreeSet::new();
        assert_eq!(jaccard(&empty, &empty), 1.0);
        assert_eq!(jaccard(&a, &empty), 0.0);
        // Symmetry.
        assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
    }

    #[test]
    fn evolution_base_and_final_checkpoints() {
        let base = toy(41);
        let mid = toy(42);
        let fin = toy(43);
        let trajectories = toy_trajectories(3, 8, 6, 11);
        let spec = PercentileSpec::new(vec![50.0, 95.0]).unwrap();
        let report = checkpoint_evolution(
            &[&base, &mid, &fin],
            &trajectories,
            &TruncationSpec::none(),
            &spec,
            EvolutionMode::AgainstBase,
            0.02,
        )
        .unwrap();
        // Checkpoint 0 is the base itself: zero divergence everywhere,
        // and Jaccard 0 against a non-empty final set.
        let first = &report.checkpoints[0];
        assert!(first.js_percentiles.iter().all(|&(_, v)| v == 0.0));
        assert_eq!(first.divergent_positions, 0);
        let last = &report.checkpoints[2];
        assert!(last.divergent_positions > 0);
        assert_eq!(first.jaccard_with_final, 0.0);
        // Final checkpoint against itself.
        assert_eq!(last.jaccard_with_final, 1.0);
    }

    #[test]
    fn weight_gap_cases() {
        assert_eq!(weight_gap_ratio(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(weight_gap_ratio(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(), 1.0);
        assert!((weight_gap_ratio(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            weight_gap_ratio(&[0.0], &[0.0]).unwrap_err(),
            MechanicsError::DegenerateInput
        ));
        assert!(matches!(
            weight_gap_ratio(&[1.0], &[1.0, 2.0]).unwrap_err(),
            MechanicsError::LengthMismatch(1, 2)
        ));
    }
}
