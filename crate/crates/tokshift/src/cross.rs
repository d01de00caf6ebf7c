//! Mixed-policy generation with divergence-threshold switching.
//!
//! Generation runs under a primary policy by default; at positions where
//! the divergence between the primary and intervention policies exceeds
//! a threshold (and an optional intervention budget is not exhausted),
//! the next token is sampled from the intervention policy instead.
//! Forward cross-sampling uses the base model as primary with the RL
//! model intervening; reverse swaps the roles. The switching rule is
//! symmetric in the two policies when JS-based, so forward and reverse
//! runs take identical switch decisions at identical prefixes.
//!
//! Sampling is inverse-CDF over descending-rank order from one shared
//! uniform stream, which makes traces reproducible byte for byte and
//! lets a switch step draw a coupled token from both distributions with
//! one variate: the swap is "effective" when the two mapped tokens
//! differ, and an identity swap otherwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{js_divergence, kl_divergence, Distribution, TokenId, TruncationSpec};
use crate::policy::{GenerationLimits, Policy, PolicyError, Prefix};
use crate::rng::{fold_key, DrawStream};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum CrossError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("policy error at position {pos}: {source}")]
    Provider {
        pos: usize,
        source: PolicyError,
        /// Everything generated before the failure.
        partial: Box<CrossSampleTrace>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Divergence used by the switching rule. Experiments switch on JS; the
/// KL variant exists for the sequence-level KL bound, whose hypothesis
/// is a per-step KL threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchMetric {
    #[default]
    Js,
    Kl,
}

/// Intervene when the divergence of the truncated next-token
/// distributions strictly exceeds `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingRule {
    pub metric: SwitchMetric,
    pub epsilon: f64,
    pub trunc: TruncationSpec,
}

impl SwitchingRule {
    pub fn js(epsilon: f64, trunc: TruncationSpec) -> Self {
        Self {
            metric: SwitchMetric::Js,
            epsilon,
            trunc,
        }
    }

    pub fn kl(epsilon: f64, trunc: TruncationSpec) -> Self {
        Self {
            metric: SwitchMetric::Kl,
            epsilon,
            trunc,
        }
    }

    pub fn validate(&self) -> Result<(), CrossError> {
        self.trunc
            .validate()
            .map_err(|e| CrossError::InvalidConfig(e.to_string()))?;
        let bounded = match self.metric {
            SwitchMetric::Js => self.epsilon <= LN_2,
            SwitchMetric::Kl => true,
        };
        if !(self.epsilon >= 0.0 && bounded) {
            return Err(CrossError::InvalidConfig(format!(
                "epsilon must lie in [0, ln 2] for the JS rule (got {})",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Divergence of the (already truncated) distribution pair. A KL
    /// undefined by absolute continuity counts as infinite, hence always
    /// above threshold.
    pub fn divergence(&self, primary: &Distribution, intervention: &Distribution) -> f64 {
        match self.metric {
            SwitchMetric::Js => js_divergence(primary, intervention),
            SwitchMetric::Kl => kl_divergence(primary, intervention).unwrap_or(f64::INFINITY),
        }
    }
}

/// One evaluated generation step of the mixed policy.
#[derive(Debug, Clone)]
pub struct StepChoice {
    /// Truncated primary next-token distribution.
    pub primary: Distribution,
    /// Truncated intervention next-token distribution.
    pub intervention: Distribution,
    pub divergence: f64,
    /// Whether the rule fires (before budget considerations).
    pub above_threshold: bool,
}

/// The mixed policy: emits the truncated intervention distribution at
/// switch steps and the truncated primary distribution elsewhere.
///
/// With a budget `k`, switching stops after `k` interventions; the
/// switch history of a prefix is recomputed deterministically, so the
/// budgeted mixed policy is still a pure function of the prefix.
pub struct MixedPolicy<'a> {
    primary: &'a dyn Policy,
    intervention: &'a dyn Policy,
    rule: SwitchingRule,
    budget: Option<u64>,
}

impl<'a> MixedPolicy<'a> {
    pub fn new(
        primary: &'a dyn Policy,
        intervention: &'a dyn Policy,
        rule: SwitchingRule,
    ) -> Result<Self, CrossError> {
        rule.validate()?;
        if primary.vocab_size() != intervention.vocab_size() {
            return Err(CrossError::InvalidConfig(format!(
                "policies must share a vocabulary: {} vs {}",
                primary.vocab_size(),
                intervention.vocab_size()
            )));
        }
        Ok(Self {
            primary,
            intervention,
            rule,
            budget: None,
        })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn rule(&self) -> &SwitchingRule {
        &self.rule
    }

    /// Evaluates one step: both truncated distributions and the rule.
    pub fn step(&self, prefix: Prefix<'_>) -> Result<StepChoice, PolicyError> {
        let primary = self.primary.next_dist(prefix)?.truncate(&self.rule.trunc);
        let intervention = self
            .intervention
            .next_dist(prefix)?
            .truncate(&self.rule.trunc);
        let divergence = self.rule.divergence(&primary, &intervention);
        Ok(StepChoice {
            above_threshold: divergence > self.rule.epsilon,
            primary,
            intervention,
            divergence,
        })
    }

    /// Interventions already spent along `tokens` (budget bookkeeping
    /// replays the switch history sequentially).
    fn used_budget(&self, prefix: Prefix<'_>, budget: u64) -> Result<u64, PolicyError> {
        let mut used = 0u64;
        for t in 0..prefix.tokens.len() {
            if used >= budget {
                break;
            }
            let step = self.step(Prefix::new(prefix.seq_id, &prefix.tokens[..t]))?;
            if step.above_threshold {
                used += 1;
            }
        }
        Ok(used)
    }

    /// The mixed next-token distribution and whether this step switched.
    pub fn next_with_flag(&self, prefix: Prefix<'_>) -> Result<(Distribution, bool), PolicyError> {
        let budget_left = match self.budget {
            None => true,
            Some(k) => self.used_budget(prefix, k)? < k,
        };
        let step = self.step(prefix)?;
        let switched = step.above_threshold && budget_left;
        Ok(if switched {
            (step.intervention, true)
        } else {
            (step.primary, false)
        })
    }
}

impl Policy for MixedPolicy<'_> {
    fn vocab_size(&self) -> u32 {
        self.primary.vocab_size()
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        Ok(self.next_with_flag(prefix)?.0)
    }
}

/// Inverse-CDF draw over descending-rank order (ties by ascending id):
/// deterministic given the uniform variate.
pub fn sample_inverse_cdf(d: &Distribution, u: f64) -> TokenId {
    let ranked = d.ranked_tokens(d.support().len());
    let mut acc = 0.0;
    for &token in &ranked {
        acc += d.prob(token);
        if u < acc {
            return token;
        }
    }
    *ranked.last().expect("non-empty support")
}

#[derive(Clone)]
pub struct CrossSampleConfig<'a> {
    pub primary: &'a dyn Policy,
    pub intervention: &'a dyn Policy,
    pub rule: SwitchingRule,
    /// `None` = unlimited interventions.
    pub budget: Option<u64>,
    pub limits: GenerationLimits,
    pub seed: u64,
    pub seq_id: String,
    /// Prompt tokens prepended to every policy query (not part of the
    /// generated output).
    pub prompt: Vec<TokenId>,
}

/// One recorded intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    /// 0-based generation position.
    pub pos: usize,
    /// Token the primary policy would have produced under the shared
    /// uniform draw (the coupled counterfactual).
    pub primary_token: TokenId,
    /// Token actually emitted, sampled from the intervention policy.
    pub intervention_token: TokenId,
    /// Divergence that triggered the switch.
    pub js: f64,
}

impl Intervention {
    /// An identity swap replaces a token with itself.
    pub fn is_identity(&self) -> bool {
        self.primary_token == self.intervention_token
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Eos,
    TMax,
}

/// Full log of one mixed-policy generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSampleTrace {
    pub seq_id: String,
    pub tokens: Vec<TokenId>,
    pub interventions: Vec<Intervention>,
    /// Interventions excluding identity swaps.
    pub effective_count: u64,
    pub total_count: u64,
    pub terminated_by: Termination,
}

impl CrossSampleTrace {
    fn empty(seq_id: &str) -> Self {
        Self {
            seq_id: seq_id.to_string(),
            tokens: Vec::new(),
            interventions: Vec::new(),
            effective_count: 0,
            total_count: 0,
            terminated_by: Termination::TMax,
        }
    }
}

fn validate_generation(
    primary: &dyn Policy,
    intervention: &dyn Policy,
    rule: &SwitchingRule,
    limits: &GenerationLimits,
) -> Result<(), CrossError> {
    rule.validate()?;
    if primary.vocab_size() != intervention.vocab_size() {
        return Err(CrossError::InvalidConfig(format!(
            "policies must share a vocabulary: {} vs {}",
            primary.vocab_size(),
            intervention.vocab_size()
        )));
    }
    limits
        .validate(primary.vocab_size())
        .map_err(|e| CrossError::InvalidConfig(e.to_string()))?;
    Ok(())
}

/// Generates one sequence under the budgeted mixed policy.
///
/// Every step draws one shared uniform; at a switch step that variate is
/// mapped through the inverse CDF of both distributions, recording the
/// coupled primary token alongside the emitted intervention token so
/// identity swaps can be excluded from the effective count.
pub fn cross_sample_generate(cfg: &CrossSampleConfig<'_>) -> Result<CrossSampleTrace, CrossError> {
    validate_generation(cfg.primary, cfg.intervention, &cfg.rule, &cfg.limits)?;
    let mixed = MixedPolicy::new(cfg.primary, cfg.intervention, cfg.rule.clone())?;

    let mut trace = CrossSampleTrace::empty(&cfg.seq_id);
    let mut stream = DrawStream::new(cfg.seed);
    let mut context = cfg.prompt.clone();
    for t in 0..cfg.limits.t_max {
        let prefix = Prefix::new(&cfg.seq_id, &context);
        let step = match mixed.step(prefix) {
            Ok(step) => step,
            Err(source) => {
                return Err(CrossError::Provider {
                    pos: t,
                    source,
                    partial: Box::new(trace),
                })
            }
        };
        let budget_left = cfg.budget.is_none_or(|k| trace.total_count < k);
        let switched = step.above_threshold && budget_left;
        let u = stream.next_unit();
        let token = if switched {
            let intervention_token = sample_inverse_cdf(&step.intervention, u);
            let primary_token = sample_inverse_cdf(&step.primary, u);
            let event = Intervention {
                pos: t,
                primary_token,
                intervention_token,
                js: step.divergence,
            };
            trace.total_count += 1;
            if !event.is_identity() {
                trace.effective_count += 1;
            }
            trace.interventions.push(event);
            intervention_token
        } else {
            sample_inverse_cdf(&step.primary, u)
        };
        trace.tokens.push(token);
        context.push(token);
        if token == cfg.limits.eos {
            trace.terminated_by = Termination::Eos;
            return Ok(trace);
        }
    }
    trace.terminated_by = Termination::TMax;
    Ok(trace)
}

/// A plain seeded generation under a single policy, consuming one
/// uniform per step exactly like [`cross_sample_generate`]: a budget-0
/// cross-sample and a plain sample agree seed for seed, byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRun {
    pub seq_id: String,
    pub tokens: Vec<TokenId>,
    pub terminated_by: Termination,
}

pub fn sample_policy(
    policy: &dyn Policy,
    trunc: &TruncationSpec,
    limits: &GenerationLimits,
    seed: u64,
    seq_id: &str,
    prompt: &[TokenId],
) -> Result<SampleRun, CrossError> {
    trunc
        .validate()
        .map_err(|e| CrossError::InvalidConfig(e.to_string()))?;
    limits
        .validate(policy.vocab_size())
        .map_err(|e| CrossError::InvalidConfig(e.to_string()))?;
    let mut stream = DrawStream::new(seed);
    let mut context = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut terminated_by = Termination::TMax;
    for _ in 0..limits.t_max {
        let dist = policy
            .next_dist(Prefix::new(seq_id, &context))?
            .truncate(trunc);
        let token = sample_inverse_cdf(&dist, stream.next_unit());
        tokens.push(token);
        context.push(token);
        if token == limits.eos {
            terminated_by = Termination::Eos;
            break;
        }
    }
    Ok(SampleRun {
        seq_id: seq_id.to_string(),
        tokens,
        terminated_by,
    })
}

/// Built-in success predicates, nameable from the CLI:
/// `contains-token:ID`, `ends-with:ID`, `contains-at-least:ID:N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessPredicate {
    ContainsToken(TokenId),
    /// Matches when the final generated token equals the given id
    /// (including a terminal EOS, which is part of the output).
    EndsWith(TokenId),
    ContainsAtLeast(TokenId, usize),
}

impl SuccessPredicate {
    pub fn eval(&self, tokens: &[TokenId]) -> bool {
        match *self {
            SuccessPredicate::ContainsToken(t) => tokens.contains(&t),
            SuccessPredicate::EndsWith(t) => tokens.last() == Some(&t),
            SuccessPredicate::ContainsAtLeast(t, n) => {
                tokens.iter().filter(|&&x| x == t).count() >= n
            }
        }
    }
}

impl std::str::FromStr for SuccessPredicate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse_id = |p: &str| {
            p.parse::<u32>()
                .map(TokenId)
                .map_err(|_| format!("invalid token id {p:?} in predicate {s:?}"))
        };
        match parts.as_slice() {
            ["contains-token", id] => Ok(SuccessPredicate::ContainsToken(parse_id(id)?)),
            ["ends-with", id] => Ok(SuccessPredicate::EndsWith(parse_id(id)?)),
            ["contains-at-least", id, n] => {
                let n = n
                    .parse::<usize>()
                    .map_err(|_| format!("invalid count {n:?} in predicate {s:?}"))?;
                Ok(SuccessPredicate::ContainsAtLeast(parse_id(id)?, n))
            }
            _ => Err(format!(
                "unknown predicate {s:?} (expected contains-token:ID, ends-with:ID, or contains-at-least:ID:N)"
            )),
        }
    }
}

/// Success/intervention statistics at one budget point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: u64,
    pub success_rate: f64,
    pub mean_effective: f64,
    pub mean_total: f64,
    /// Mean of per-sequence `effective_count / len` percentages.
    pub mean_effective_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSweep {
    pub n_samples: usize,
    pub points: Vec<BudgetPoint>,
}

/// Runs `n_samples` budgeted generations per budget point. Every budget
/// point re-seeds each sample deterministically from `(cfg.seed, sample
/// index)` — common random numbers across budget points, so identical
/// primary/intervention policies yield an exactly flat curve. After
/// budget exhaustion generation continues under the primary policy.
pub fn budget_sweep(
    cfg: &CrossSampleConfig<'_>,
    budgets: &[u64],
    n_samples: usize,
    predicate: &SuccessPredicate,
) -> Result<BudgetSweep, CrossError> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(CrossError::InvalidConfig(
            "budgets must be a non-empty, non-decreasing list".into(),
        ));
    }
    if n_samples == 0 {
        return Err(CrossError::InvalidConfig("n_samples must be >= 1".into()));
    }
    use rayon::prelude::*;
    let mut points = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let traces: Vec<CrossSampleTrace> = (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let mut sample_cfg = cfg.clone();
                sample_cfg.budget = Some(budget);
                sample_cfg.seed = fold_key(&[cfg.seed, i as u64]);
                sample_cfg.seq_id = format!("{}-k{budget}-s{i}", cfg.seq_id);
                cross_sample_generate(&sample_cfg)
            })
            .collect::<Result<_, _>>()?;
        let n = traces.len() as f64;
        let successes = traces.iter().filter(|t| predicate.eval(&t.tokens)).count();
        let eff: f64 = traces.iter().map(|t| t.effective_count as f64).sum();
        let tot: f64 = traces.iter().map(|t| t.total_count as f64).sum();
        let eff_pct: f64 = traces
            .iter()
            .map(|t| 100.0 * t.effective_count as f64 / t.tokens.len().max(1) as f64)
            .sum();
        points.push(BudgetPoint {
            budget,
            success_rate: successes as f64 / n,
            mean_effective: eff / n,
            mean_total: tot / n,
            mean_effective_pct: eff_pct / n,
        });
    }
    Ok(BudgetSweep { n_samples, points })
}

/// Frequency table over `(primary token -> intervention token)`
/// replacement pairs, identity swaps excluded.
pub fn replacement_pair_histogram(
    traces: &[CrossSampleTrace],
) -> BTreeMap<(TokenId, TokenId), u64> {
    let mut table = BTreeMap::new();
    for trace in traces {
        for iv in &trace.interventions {
            if !iv.is_identity() {
                *table
                    .entry((iv.primary_token, iv.intervention_token))
                    .or_insert(0) += 1;
            }
        }
    }
    table
}
