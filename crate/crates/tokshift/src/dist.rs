//! Exact probability-vector arithmetic over sparse token distributions.
//!
//! A [`Distribution`] is a finite probability measure over token ids,
//! stored as sorted `(token, prob)` pairs so that truncated top-k logprob
//! dumps are represented losslessly. All divergences use natural log
//! (nats); the Jensen-Shannon divergence is bounded by `ln 2`. Every sum
//! is compensated, keeping relative error near 1e-16 up to vocabularies
//! of 1e5 tokens.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accum::CompensatedSum;

/// Index into a vocabulary of size `V`; valid ids satisfy `id < V`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("all weights are zero; a distribution needs at least one positive entry")]
    AllZeroMass,
    #[error("negative weight {weight} at token {token}")]
    NegativeWeight { token: TokenId, weight: f64 },
    #[error("non-finite weight at token {token}")]
    NonFiniteWeight { token: TokenId },
    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: u32 },
    #[error("duplicate token {token} in support")]
    DuplicateToken { token: TokenId },
    #[error("KL divergence undefined: token {token} has positive p-mass but zero q-mass")]
    AbsoluteContinuityViolation { token: TokenId },
    #[error("invalid truncation spec: {0}")]
    InvalidTruncation(String),
}

/// Nucleus truncation parameters: keep the smallest high-probability
/// prefix whose cumulative mass reaches `top_p`, optionally capped at
/// `top_k` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

impl TruncationSpec {
    pub fn top_p(top_p: f64) -> Self {
        Self { top_p, top_k: None }
    }

    /// Identity truncation (`top_p = 1`, no `top_k`).
    pub fn none() -> Self {
        Self::top_p(1.0)
    }

    pub fn validate(&self) -> Result<(), DistError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DistError::InvalidTruncation(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == Some(0) {
            return Err(DistError::InvalidTruncation("top_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.top_p >= 1.0 && self.top_k.is_none()
    }
}

impl Default for TruncationSpec {
    fn default() -> Self {
        Self::none()
    }
}

/// A probability distribution over a vocabulary of `vocab_size` tokens,
/// stored sparsely on its support.
///
/// Invariants maintained by construction:
/// - support ids are unique, strictly sorted, and `< vocab_size`,
/// - every retained probability is strictly positive,
/// - probabilities sum to 1 within 1e-12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    vocab_size: u32,
    support: Vec<TokenId>,
    probs: Vec<f64>,
}

impl Distribution {
    /// Normalizes a dense weight vector over the vocabulary `0..len`.
    /// Zero-mass tokens are dropped from the support.
    pub fn from_weights(weights: &[f64]) -> Result<Self, DistError> {
        let pairs: Vec<(TokenId, f64)> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (TokenId(i as u32), w))
            .collect();
        Self::from_sparse(weights.len() as u32, &pairs)
    }

    /// Normalizes sparse `(token, weight)` pairs over a vocabulary of
    /// `vocab_size` tokens.
    pub fn from_sparse(vocab_size: u32, pairs: &[(TokenId, f64)]) -> Result<Self, DistError> {
        let mut entries: Vec<(TokenId, f64)> = Vec::with_capacity(pairs.len());
        for &(token, w) in pairs {
            if !w.is_finite() {
                return Err(DistError::NonFiniteWeight { token });
            }
            if w < 0.0 {
                return Err(DistError::NegativeWeight { token, weight: w });
            }
            if token.0 >= vocab_size {
                return Err(DistError::TokenOutOfRange { token, vocab_size });
            }
            if w > 0.0 {
                entries.push((token, w));
            }
        }
        entries.sort_by_key(|&(t, _)| t);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(DistError::DuplicateToken { token: pair[0].0 });
            }
        }
        if entries.is_empty() {
            return Err(DistError::AllZeroMass);
        }
        let mut total = CompensatedSum::new();
        for &(_, w) in &entries {
            total.add(w);
        }
        let total = total.value();
        let (support, probs): (Vec<_>, Vec<_>) = entries
            .into_iter()
            .map(|(t, w)| (t, if total == 1.0 { w } else { w / total }))
            .unzip();
        Ok(Self {
            vocab_size,
            support,
            probs,
        })
    }

    /// Builds a distribution from `(token, natural-log-prob)` pairs,
    /// renormalizing the stored mass.
    pub fn from_logprobs(vocab_size: u32, pairs: &[(TokenId, f64)]) -> Result<Self, DistError> {
        let weights: Vec<(TokenId, f64)> = pairs.iter().map(|&(t, lp)| (t, lp.exp())).collect();
        Self::from_sparse(vocab_size, &weights)
    }

    /// Point mass on a single token.
    pub fn point_mass(vocab_size: u32, token: TokenId) -> Result<Self, DistError> {
        Self::from_sparse(vocab_size, &[(token, 1.0)])
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Support tokens in ascending id order.
    pub fn support(&self) -> &[TokenId] {
        &self.support
    }

    /// Probabilities aligned with [`Self::support`].
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    /// Probability of `token`; 0 for tokens outside the support.
    pub fn prob(&self, token: TokenId) -> f64 {
        match self.support.binary_search(&token) {
            Ok(i) => self.probs[i],
            Err(_) => 0.0,
        }
    }

    /// Support indices ordered by rank: descending probability, ties
    /// broken by ascending token id.
    fn rank_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.support.len()).collect();
        order.sort_by(|&a, &b| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .expect("probabilities are finite")
                .then(self.support[a].cmp(&self.support[b]))
        });
        order
    }

    /// Nucleus truncation: keeps the smallest rank-order prefix whose
    /// cumulative mass first reaches `top_p` (the crossing token is
    /// included), optionally capped at `top_k` tokens, then renormalizes.
    ///
    /// With `top_p = 1` and no `top_k` this is the identity.
    pub fn truncate(&self, spec: &TruncationSpec) -> Self {
        let order = self.rank_order();
        let mut keep = order.len();
        let mut cum = CompensatedSum::new();
        for (n, &i) in order.iter().enumerate() {
            cum.add(self.probs[i]);
            if cum.value() >= spec.top_p {
                keep = n + 1;
                break;
            }
        }
        if let Some(k) = spec.top_k {
            keep = keep.min(k.max(1));
        }
        if keep >= order.len() {
            return self.clone();
        }
        let mut kept: Vec<(TokenId, f64)> = order[..keep]
            .iter()
            .map(|&i| (self.support[i], self.probs[i]))
            .collect();
        kept.sort_by_key(|&(t, _)| t);
        let mut total = CompensatedSum::new();
        for &(_, p) in &kept {
            total.add(p);
        }
        let total = total.value();
        let (support, probs) = kept.into_iter().map(|(t, p)| (t, p / total)).unzip();
        Self {
            vocab_size: self.vocab_size,
            support,
            probs,
        }
    }

    /// Shannon entropy `-sum p ln p` in nats; in `[0, ln V]`.
    pub fn entropy(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for &p in &self.probs {
            acc.add(-p * p.ln());
        }
        acc.value()
    }

    /// 1-based rank of `token` under the full-vocabulary ordering:
    /// support tokens by descending probability (ties by ascending id),
    /// then off-support tokens by ascending id.
    ///
    /// For a fixed distribution this is a bijection onto `1..=V`.
    pub fn rank_of(&self, token: TokenId) -> u32 {
        debug_assert!(token.0 < self.vocab_size);
        match self.support.binary_search(&token) {
            Ok(i) => {
                let p = self.probs[i];
                let mut rank = 1u32;
                for (j, &q) in self.probs.iter().enumerate() {
                    if q > p || (q == p && self.support[j] < token) {
                        rank += 1;
                    }
                }
                rank
            }
            Err(insert_at) => {
                // Off-support tokens come after the whole support, in id order.
                let support_before = insert_at as u32;
                let off_support_before = token.0 - support_before;
                self.support.len() as u32 + off_support_before + 1
            }
        }
    }

    /// Tokens at ranks `1..=k` in rank order. When the support is smaller
    /// than `k`, pads deterministically with off-support ids ascending.
    /// `k` is capped at the vocabulary size.
    pub fn ranked_tokens(&self, k: usize) -> Vec<TokenId> {
        let k = k.min(self.vocab_size as usize);
        let order = self.rank_order();
        let mut out: Vec<TokenId> = order.iter().take(k).map(|&i| self.support[i]).collect();
        if out.len() < k {
            let in_support: BTreeSet<TokenId> = self.support.iter().copied().collect();
            for id in 0..self.vocab_size {
                if out.len() == k {
                    break;
                }
                let t = TokenId(id);
                if !in_support.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// Token at 1-based rank `r` (must satisfy `1 <= r <= V`).
    pub fn token_at_rank(&self, r: usize) -> TokenId {
        *self
            .ranked_tokens(r)
            .last()
            .expect("rank within vocabulary")
    }

    /// The `k` highest-ranked tokens as a set.
    pub fn top_k_set(&self, k: usize) -> BTreeSet<TokenId> {
        self.ranked_tokens(k).into_iter().collect()
    }

    /// Total mass (diagnostic; 1 within 1e-12 by construction).
    pub fn total_mass(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for &p in &self.probs {
            acc.add(p);
        }
        acc.value()
    }
}

/// Merge-iterates two sparse supports, yielding `(token, p, q)` over the
/// union with zeros where a side lacks the token.
fn merged<'a>(
    p: &'a Distribution,
    q: &'a Distribution,
) -> impl Iterator<Item = (TokenId, f64, f64)> + 'a {
    let mut i = 0;
    let mut j = 0;
    std::iter::from_fn(move || {
        let pi = p.support.get(i);
        let qj = q.support.get(j);
        match (pi, qj) {
            (Some(&a), Some(&b)) => {
                if a < b {
                    i += 1;
                    Some((a, p.probs[i - 1], 0.0))
                } else if b < a {
                    j += 1;
                    Some((b, 0.0, q.probs[j - 1]))
                } else {
                    i += 1;
                    j += 1;
                    Some((a, p.probs[i - 1], q.probs[j - 1]))
                }
            }
            (Some(&a), None) => {
                i += 1;
                Some((a, p.probs[i - 1], 0.0))
            }
            (None, Some(&b)) => {
                j += 1;
                Some((b, 0.0, q.probs[j - 1]))
            }
            (None, None) => None,
        }
    })
}

/// Jensen-Shannon divergence `0.5 KL(p||M) + 0.5 KL(q||M)` with
/// `M = 0.5 (p + q)`, in nats. Symmetric, bounded by `ln 2`, and
/// well-defined for arbitrary supports (off-support mass is 0 with the
/// `0 ln 0 = 0` convention).
pub fn js_divergence(p: &Distribution, q: &Distribution) -> f64 {
    debug_assert_eq!(p.vocab_size, q.vocab_size);
    let mut acc = CompensatedSum::new();
    for (_, a, b) in merged(p, q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc.add(0.5 * a * (a / m).ln());
        }
        if b > 0.0 {
            acc.add(0.5 * b * (b / m).ln());
        }
    }
    acc.value()
}

/// Kullback-Leibler divergence `sum p ln(p/q)` in nats. Requires
/// `support(p) ⊆ support(q)`; otherwise the divergence is undefined and
/// an [`DistError::AbsoluteContinuityViolation`] is returned.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, DistError> {
    debug_assert_eq!(p.vocab_size, q.vocab_size);
    let mut acc = CompensatedSum::new();
    for (token, a, b) in merged(p, q) {
        if a > 0.0 {
            if b == 0.0 {
                return Err(DistError::AbsoluteContinuityViolation { token });
            }
            acc.add(a * (a / b).ln());
        }
    }
    Ok(acc.value())
}

/// Skew Jensen-Shannon divergence
/// `alpha KL(p||m) + (1-alpha) KL(q||m)` with `m = alpha p + (1-alpha) q`.
/// Reduces to [`js_divergence`] at `alpha = 1/2` and vanishes at
/// `alpha = 0` and `alpha = 1`.
pub fn skew_js_divergence(p: &Distribution, q: &Distribution, alpha: f64) -> f64 {
    debug_assert_eq!(p.vocab_size, q.vocab_size);
    debug_assert!((0.0..=1.0).contains(&alpha));
    if alpha <= 0.0 || alpha >= 1.0 {
        return 0.0;
    }
    let beta = 1.0 - alpha;
    let mut acc = CompensatedSum::new();
    for (_, a, b) in merged(p, q) {
        let m = alpha * a + beta * b;
        if a > 0.0 {
            acc.add(alpha * a * (a / m).ln());
        }
        if b > 0.0 {
            acc.add(beta * b * (b / m).ln());
        }
    }
    acc.value()
}
