//! Exact sequence-level laws on tiny instances and verification of the
//! chain-rule decompositions and `epsilon * E[N0]` divergence bounds.
//!
//! Everything works on the fixed horizon `t_max` with EOS absorbed: once
//! EOS is generated the process deterministically emits EOS thereafter,
//! so every sequence has length exactly `t_max` and steps past the
//! stopping time contribute zero divergence. Laws are enumerated as
//! exact products of conditionals; prefix marginals are accumulated
//! forward with compensated summation. Feasibility is guarded at 1e7
//! virtual sequences — above that the operations refuse rather than
//! subsample, since exactness is the point.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::accum::CompensatedSum;
use crate::cross::{MixedPolicy, SwitchingRule};
use crate::dist::{skew_js_divergence, TokenId};
use crate::policy::{GenerationLimits, Policy, PolicyError, Prefix, TruncatedPolicy};

const ENUMERATION_GUARD: f64 = 1e7;
const SKEW_HYPOTHESIS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("instance too large: {vocab_size}^{t_max} exceeds {ENUMERATION_GUARD:e} sequences")]
    InstanceTooLarge { vocab_size: u32, t_max: usize },
    #[error("sequence KL undefined: sequence {0:?} has positive P-mass but zero Q-mass")]
    AbsoluteContinuityViolation(Vec<u32>),
    #[error("laws live on different sequence spaces")]
    MismatchedSpaces,
    #[error(
        "skew-JS hypothesis violated at {} non-switch histories (first: {:?}, skew {:.6} > epsilon)",
        .violations.len(),
        .violations[0].prefix,
        .violations[0].skew_js
    )]
    HypothesisViolated {
        violations: Vec<HypothesisViolation>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Exact distribution over EOS-absorbed sequences of length `t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLaw {
    t_max: usize,
    eos: TokenId,
    probs: BTreeMap<Vec<TokenId>, f64>,
}

impl SequenceLaw {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    /// Sequences in lexicographic order with their probabilities.
    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], f64)> {
        self.probs.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    pub fn total(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for &p in self.probs.values() {
            acc.add(p);
        }
        acc.value()
    }

    /// Checks the law invariants: unit total mass within 1e-12, fixed
    /// length, EOS absorption.
    pub fn validate(&self) -> Result<(), BoundsError> {
        if (self.total() - 1.0).abs() > 1e-12 {
            return Err(BoundsError::InvalidConfig(format!(
                "law mass {} differs from 1 by more than 1e-12",
                self.total()
            )));
        }
        for seq in self.probs.keys() {
            if seq.len() != self.t_max || !is_absorbed(seq, self.eos) {
                return Err(BoundsError::InvalidConfig(format!(
                    "sequence {seq:?} is not EOS-absorbed at length {}",
                    self.t_max
                )));
            }
        }
        Ok(())
    }

    /// Builds the empirical law of observed generations: each sequence is
    /// EOS-padded to the horizon and weighted `1 / runs.len()`.
    pub fn empirical(
        limits: &GenerationLimits,
        runs: impl IntoIterator<Item = Vec<TokenId>>,
    ) -> Self {
        let mut counts: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
        let mut n = 0u64;
        for tokens in runs {
            let mut seq = tokens;
            seq.resize(limits.t_max, limits.eos);
            *counts.entry(seq).or_insert(0) += 1;
            n += 1;
        }
        let probs = counts
            .into_iter()
            .map(|(seq, c)| (seq, c as f64 / n as f64))
            .collect();
        Self {
            t_max: limits.t_max,
            eos: limits.eos,
            probs,
        }
    }

    /// Total variation distance: half the L1 distance over the union of
    /// supports.
    pub fn total_variation(&self, other: &Self) -> Result<f64, BoundsError> {
        if self.t_max != other.t_max || self.eos != other.eos {
            return Err(BoundsError::MismatchedSpaces);
        }
        let mut acc = CompensatedSum::new();
        for (seq, p) in self.iter() {
            acc.add((p - other.prob(seq)).abs());
        }
        for (seq, q) in other.iter() {
            if self.prob(seq) == 0.0 {
                acc.add(q);
            }
        }
        Ok(0.5 * acc.value())
    }
}

fn is_absorbed(seq: &[TokenId], eos: TokenId) -> bool {
    match seq.iter().position(|&t| t == eos) {
        None => true,
        Some(i) => seq[i..].iter().all(|&t| t == eos),
    }
}

fn check_guard(vocab_size: u32, t_max: usize) -> Result<(), BoundsError> {
    if (vocab_size as f64).powi(t_max as i32) > ENUMERATION_GUARD {
        return Err(BoundsError::InstanceTooLarge { vocab_size, t_max });
    }
    Ok(())
}

/// Exact product-of-conditionals law of `policy` on the absorbed
/// horizon. The policy must answer every reachable prefix (queried with
/// an empty sequence id).
pub fn enumerate_law(
    policy: &dyn Policy,
    limits: &GenerationLimits,
) -> Result<SequenceLaw, BoundsError> {
    check_guard(policy.vocab_size(), limits.t_max)?;
    limits.validate(policy.vocab_size())?;
    let mut probs = BTreeMap::new();
    let mut prefix: Vec<TokenId> = Vec::with_capacity(limits.t_max);
    enumerate_rec(policy, limits, &mut prefix, 1.0, &mut probs)?;
    Ok(SequenceLaw {
        t_max: limits.t_max,
        eos: limits.eos,
        probs,
    })
}

fn enumerate_rec(
    policy: &dyn Policy,
    limits: &GenerationLimits,
    prefix: &mut Vec<TokenId>,
    mass: f64,
    out: &mut BTreeMap<Vec<TokenId>, f64>,
) -> Result<(), BoundsError> {
    if prefix.last() == Some(&limits.eos) || prefix.len() == limits.t_max {
        let mut seq = prefix.clone();
        seq.resize(limits.t_max, limits.eos);
        let previous = out.insert(seq, mass);
        debug_assert!(previous.is_none(), "absorbed sequences are unique");
        return Ok(());
    }
    let dist = policy.next_dist(Prefix::new("", prefix))?;
    for (token, p) in dist.iter() {
        prefix.push(token);
        enumerate_rec(policy, limits, prefix, mass * p, out)?;
        prefix.pop();
    }
    Ok(())
}

/// Sequence-level KL divergence `sum P log(P/Q)`. Requires
/// `support(P) ⊆ support(Q)`.
pub fn sequence_kl(p: &SequenceLaw, q: &SequenceLaw) -> Result<f64, BoundsError> {
    if p.t_max != q.t_max || p.eos != q.eos {
        return Err(BoundsError::MismatchedSpaces);
    }
    let mut acc = CompensatedSum::new();
    for (seq, pp) in p.iter() {
        let qp = q.prob(seq);
        if qp == 0.0 {
            return Err(BoundsError::AbsoluteContinuityViolation(
                seq.iter().map(|t| t.0).collect(),
            ));
        }
        acc.add(pp * (pp / qp).ln());
    }
    Ok(acc.value())
}

/// Sequence-level JS divergence `0.5 KL(P||M) + 0.5 KL(Q||M)` with
/// `M = 0.5 (P + Q)`.
pub fn sequence_js(p: &SequenceLaw, q: &SequenceLaw) -> Result<f64, BoundsError> {
    if p.t_max != q.t_max || p.eos != q.eos {
        return Err(BoundsError::MismatchedSpaces);
    }
    let mut acc = CompensatedSum::new();
    for (seq, pp) in p.iter() {
        let m = 0.5 * (pp + q.prob(seq));
        acc.add(0.5 * pp * (pp / m).ln());
    }
    for (seq, qp) in q.iter() {
        let m = 0.5 * (p.prob(seq) + qp);
        acc.add(0.5 * qp * (qp / m).ln());
    }
    Ok(acc.value())
}

/// Probability that a generated (absorbed) sequence satisfies `pred`.
pub fn success_probability(law: &SequenceLaw, pred: impl Fn(&[TokenId]) -> bool) -> f64 {
    let mut acc = CompensatedSum::new();
    for (seq, p) in law.iter() {
        if pred(seq) {
            acc.add(p);
        }
    }
    acc.value()
}

/// Both sides of the KL chain rule, computed independently: the left by
/// enumerating both laws, the right by prefix-marginal-weighted
/// per-step KL terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainRuleReport {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

pub fn verify_kl_chain_rule(
    p_policy: &dyn Policy,
    q_policy: &dyn Policy,
    limits: &GenerationLimits,
) -> Result<ChainRuleReport, BoundsError> {
    same_space(p_policy, q_policy)?;
    let lhs = sequence_kl(
        &enumerate_law(p_policy, limits)?,
        &enumerate_law(q_policy, limits)?,
    )?;

    // Right side: forward walk of P's prefix marginals. Absorbed
    // prefixes are dropped: past the stopping time both policies are
    // point masses on EOS and contribute zero.
    let mut rhs = CompensatedSum::new();
    let mut frontier: BTreeMap<Vec<TokenId>, f64> = BTreeMap::from([(Vec::new(), 1.0)]);
    for _ in 0..limits.t_max {
        let mut next: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
        for (h, mass) in frontier {
            let prefix = Prefix::new("", &h);
            let pt = p_policy.next_dist(prefix)?;
            let qt = q_policy.next_dist(prefix)?;
            let step_kl = crate::dist::kl_divergence(&pt, &qt).map_err(|_| {
                BoundsError::AbsoluteContinuityViolation(h.iter().map(|t| t.0).collect())
            })?;
            rhs.add(mass * step_kl);
            for (token, p) in pt.iter() {
                if token == limits.eos {
                    continue;
                }
                let mut child = h.clone();
                child.push(token);
                *next.entry(child).or_insert(0.0) += mass * p;
            }
        }
        frontier = next;
    }
    let rhs = rhs.value();
    Ok(ChainRuleReport {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

/// Report for the sequence-level KL bound
/// `KL(P_mix || P_int) <= epsilon * E_mix[N0]` under a per-step KL
/// switching rule, with the effective per-step KL `kappa_bar` satisfying
/// `KL = kappa_bar * E[N0]` exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlBoundReport {
    pub epsilon: f64,
    pub kl_mix_int: f64,
    pub expected_n0_mix: f64,
    pub bound: f64,
    pub kappa_bar: f64,
    pub identity_gap: f64,
    pub holds: bool,
}

pub fn verify_kl_eps_bound(
    primary: &dyn Policy,
    intervention: &dyn Policy,
    epsilon: f64,
    limits: &GenerationLimits,
    rule_trunc: crate::dist::TruncationSpec,
) -> Result<KlBoundReport, BoundsError> {
    same_space(primary, intervention)?;
    check_guard(primary.vocab_size(), limits.t_max)?;
    let rule = SwitchingRule::kl(epsilon, rule_trunc);
    let mixed = MixedPolicy::new(primary, intervention, rule.clone())
        .map_err(|e| BoundsError::InvalidConfig(e.to_string()))?;
    let p_mix = enumerate_law(&mixed, limits)?;
    let p_int = enumerate_law(
        &TruncatedPolicy::new(intervention, rule.trunc.clone()),
        limits,
    )?;
    let kl_mix_int = sequence_kl(&p_mix, &p_int)?;

    // Forward walk of P_mix marginals, accumulating E[N0] and the
    // effective per-step KL over non-intervention steps.
    let mut e_n0 = CompensatedSum::new();
    let mut kappa_num = CompensatedSum::new();
    let mut frontier: BTreeMap<Vec<TokenId>, f64> = BTreeMap::from([(Vec::new(), 1.0)]);
    for _ in 0..limits.t_max {
        let mut next: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
        for (h, mass) in frontier {
            let step = mixed.step(Prefix::new("", &h))?;
            if !step.above_threshold {
                e_n0.add(mass);
                kappa_num.add(mass * step.divergence);
            }
            let dist = if step.above_threshold {
                step.intervention
            } else {
                step.primary
            };
            for (token, p) in dist.iter() {
                if token == limits.eos {
                    continue;
                }
                let mut child = h.clone();
                child.push(token);
                *next.entry(child).or_insert(0.0) += mass * p;
            }
        }
        frontier = next;
    }
    let expected_n0_mix = e_n0.value();
    let kappa_bar = if expected_n0_mix > 0.0 {
        kappa_num.value() / expected_n0_mix
    } else {
        0.0
    };
    let bound = epsilon * expected_n0_mix;
    Ok(KlBoundReport {
        epsilon,
        kl_mix_int,
        expected_n0_mix,
        bound,
        kappa_bar,
        identity_gap: (kl_mix_int - kappa_bar * expected_n0_mix).abs(),
        holds: kl_mix_int <= bound + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaEntry {
    pub prefix: Vec<u32>,
    pub alpha: f64,
}

/// Both sides of the JS decomposition via skew JS, computed
/// independently, plus the history-dependent skew weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JsDecompReport {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
    pub alpha_table: Vec<AlphaEntry>,
}

pub fn verify_js_decomposition(
    p_policy: &dyn Policy,
    q_policy: &dyn Policy,
    limits: &GenerationLimits,
) -> Result<JsDecompReport, BoundsError> {
    same_space(p_policy, q_policy)?;
    let lhs = sequence_js(
        &enumerate_law(p_policy, limits)?,
        &enumerate_law(q_policy, limits)?,
    )?;

    // Joint forward walk of (P, Q) prefix marginals. At each reachable
    // history the skew weight is alpha = P_<t(h) / (P_<t(h) + Q_<t(h))
    // and the mixture marginal weight is (P_<t(h) + Q_<t(h)) / 2.
    let mut rhs = CompensatedSum::new();
    let mut alpha_table = Vec::new();
    let mut frontier: BTreeMap<Vec<TokenId>, (f64, f64)> =
        BTreeMap::from([(Vec::new(), (1.0, 1.0))]);
    for _ in 0..limits.t_max {
        let mut next: BTreeMap<Vec<TokenId>, (f64, f64)> = BTreeMap::new();
        for (h, (pm, qm)) in frontier {
            let prefix = Prefix::new("", &h);
            let pt = p_policy.next_dist(prefix)?;
            let qt = q_policy.next_dist(prefix)?;
            let alpha = pm / (pm + qm);
            let m_mass = 0.5 * (pm + qm);
            rhs.add(m_mass * skew_js_divergence(&pt, &qt, alpha));
            alpha_table.push(AlphaEntry {
                prefix: h.iter().map(|t| t.0).collect(),
                alpha,
            });
            for token in merged_support(&pt, &qt) {
                if token == limits.eos {
                    continue;
                }
                let child_pm = pm * pt.prob(token);
                let child_qm = qm * qt.prob(token);
                if child_pm > 0.0 || child_qm > 0.0 {
                    let mut child = h.clone();
                    child.push(token);
                    let entry = next.entry(child).or_insert((0.0, 0.0));
                    entry.0 += child_pm;
                    entry.1 += child_qm;
                }
            }
        }
        frontier = next;
    }
    let rhs = rhs.value();
    Ok(JsDecompReport {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
        alpha_table,
    })
}

/// A non-switch history whose skew-JS divergence exceeds epsilon,
/// falsifying the hypothesis of the sequence-level JS bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisViolation {
    pub prefix: Vec<u32>,
    pub alpha: f64,
    pub skew_js: f64,
    pub plain_js: f64,
}

/// Report for the sequence-level JS bound
/// `JS(P_mix || P_int) <= epsilon * E_M[N0]` with `M` the equal mixture
/// of the two laws, under the skew-JS hypothesis at non-switch
/// histories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JsBoundReport {
    pub epsilon: f64,
    pub js_mix_int: f64,
    pub expected_n0_m: f64,
    pub expected_n0_mix: f64,
    pub expected_n0_int: f64,
    pub bound: f64,
    pub j_bar: f64,
    pub identity_gap: f64,
    pub holds: bool,
}

/// Verifies the JS-case bound for a plain-JS switching rule.
///
/// The proposition's hypothesis is stated on the skew-JS divergence with
/// marginal-dependent weights, which a plain JS threshold does not
/// automatically satisfy. The hypothesis is therefore checked at every
/// reachable non-switch history; offending histories are reported via
/// [`BoundsError::HypothesisViolated`] instead of silently assuming the
/// bound.
pub fn verify_js_eps_bound(
    primary: &dyn Policy,
    intervention: &dyn Policy,
    epsilon: f64,
    limits: &GenerationLimits,
    rule_trunc: crate::dist::TruncationSpec,
) -> Result<JsBoundReport, BoundsError> {
    same_space(primary, intervention)?;
    check_guard(primary.vocab_size(), limits.t_max)?;
    let rule = SwitchingRule::js(epsilon, rule_trunc);
    let mixed = MixedPolicy::new(primary, intervention, rule.clone())
        .map_err(|e| BoundsError::InvalidConfig(e.to_string()))?;
    let p_mix = enumerate_law(&mixed, limits)?;
    let p_int = enumerate_law(
        &TruncatedPolicy::new(intervention, rule.trunc.clone()),
        limits,
    )?;
    let js_mix_int = sequence_js(&p_mix, &p_int)?;

    // Joint forward walk of (P_mix, P_int) prefix marginals.
    let mut violations = Vec::new();
    let mut e_n0_m = CompensatedSum::new();
    let mut e_n0_mix = CompensatedSum::new();
    let mut e_n0_int = CompensatedSum::new();
    let mut jbar_num = CompensatedSum::new();
    let mut frontier: BTreeMap<Vec<TokenId>, (f64, f64)> =
        BTreeMap::from([(Vec::new(), (1.0, 1.0))]);
    for _ in 0..limits.t_max {
        let mut next: BTreeMap<Vec<TokenId>, (f64, f64)> = BTreeMap::new();
        for (h, (mm, im)) in frontier {
            let step = mixed.step(Prefix::new("", &h))?;
            let alpha = mm / (mm + im);
            let m_mass = 0.5 * (mm + im);
            if !step.above_threshold {
                let skew = skew_js_divergence(&step.primary, &step.intervention, alpha);
                e_n0_m.add(m_mass);
                e_n0_mix.add(mm);
                e_n0_int.add(im);
                jbar_num.add(m_mass * skew);
                if skew > epsilon + SKEW_HYPOTHESIS_TOL {
                    violations.push(HypothesisViolation {
                        prefix: h.iter().map(|t| t.0).collect(),
                        alpha,
                        skew_js: skew,
                        plain_js: step.divergence,
                    });
                }
            }
            let mix_dist = if step.above_threshold {
                step.intervention.clone()
            } else {
                step.primary.clone()
            };
            for token in merged_support(&mix_dist, &step.intervention) {
                if token == limits.eos {
                    continue;
                }
                let child_mm = mm * mix_dist.prob(token);
                let child_im = im * step.intervention.prob(token);
                if child_mm > 0.0 || child_im > 0.0 {
                    let mut child = h.clone();
                    child.push(token);
                    let entry = next.entry(child).or_insert((0.0, 0.0));
                    entry.0 += child_mm;
                    entry.1 += child_im;
                }
            }
        }
        frontier = next;
    }
    if !violations.is_empty() {
        return Err(BoundsError::HypothesisViolated { violations });
    }
    let expected_n0_m = e_n0_m.value();
    let j_bar = if expected_n0_m > 0.0 {
        jbar_num.value() / expected_n0_m
    } else {
        0.0
    };
    let bound = epsilon * expected_n0_m;
    Ok(JsBoundReport {
        epsilon,
        js_mix_int,
        expected_n0_m,
        expected_n0_mix: e_n0_mix.value(),
        expected_n0_int: e_n0_int.value(),
        bound,
        j_bar,
        identity_gap: (js_mix_int - j_bar * expected_n0_m).abs(),
        holds: js_mix_int <= bound + 1e-12,
    })
}

fn merged_support(a: &crate::dist::Distribution, b: &crate::dist::Distribution) -> Vec<TokenId> {
    let mut tokens: Vec<TokenId> = a
        .support()
        .iter()
        .chain(b.support().iter())
        .copied()
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    tokens
}

fn same_space(a: &dyn Policy, b: &dyn Policy) -> Result<(), BoundsError> {
    if a.vocab_size() != b.vocab_size() {
        return Err(BoundsError::MismatchedSpaces);
    }
    Ok(())
}
