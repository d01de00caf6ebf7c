//! Next-token policy abstraction.
//!
//! A [`Policy`] maps a prefix (prompt plus generated-so-far tokens) to a
//! conditional next-token [`Distribution`]. Implementations must be
//! deterministic: the same prefix always yields the identical
//! distribution. All implementations here are immutable after
//! construction and safe to share across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{DistError, Distribution, TokenId, TruncationSpec};

pub mod dump;
pub mod toy;

pub use dump::{load_dump, DumpMeta, DumpRecord, LogprobDump, ReplayPolicy, ReplaySide};
pub use toy::{ToyPolicy, ToyPolicyKind, ToyPolicySpec};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy spec: {0}")]
    SpecInvalid(String),
    #[error("prefix not recorded: sequence {seq_id:?} at position {pos}")]
    PrefixNotRecorded { seq_id: String, pos: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Borrowed view of a generation prefix.
///
/// `seq_id` names the generation stream the prefix belongs to; replay
/// policies resolve queries through it, while synthetic policies ignore
/// it and condition on `tokens` alone.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'a> {
    pub seq_id: &'a str,
    pub tokens: &'a [TokenId],
}

impl<'a> Prefix<'a> {
    pub fn new(seq_id: &'a str, tokens: &'a [TokenId]) -> Self {
        Self { seq_id, tokens }
    }
}

/// Generation stopping parameters: generation ends at the first EOS
/// token or after `t_max` tokens, whichever comes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub t_max: usize,
    pub eos: TokenId,
}

impl GenerationLimits {
    pub fn new(t_max: usize, eos: TokenId) -> Self {
        Self { t_max, eos }
    }

    pub fn validate(&self, vocab_size: u32) -> Result<(), PolicyError> {
        if self.t_max == 0 {
            return Err(PolicyError::SpecInvalid("t_max must be >= 1".into()));
        }
        if self.eos.0 >= vocab_size {
            return Err(PolicyError::SpecInvalid(format!(
                "eos token {} out of range for vocabulary of size {}",
                self.eos, vocab_size
            )));
        }
        Ok(())
    }
}

/// A conditional next-token distribution provider.
pub trait Policy: Send + Sync {
    fn vocab_size(&self) -> u32;

    /// The next-token distribution given a prefix. Deterministic: equal
    /// prefixes yield identical distributions.
    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn vocab_size(&self) -> u32 {
        (**self).vocab_size()
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        (**self).next_dist(prefix)
    }
}

/// A recorded (or generated) token sequence used as a reference path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seq_id: String,
    pub tokens: Vec<TokenId>,
}

impl Trajectory {
    pub fn new(seq_id: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        Self {
            seq_id: seq_id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prefix before position `t` (the first `t` tokens).
    pub fn prefix(&self, t: usize) -> Prefix<'_> {
        Prefix::new(&self.seq_id, &self.tokens[..t])
    }
}

/// Wraps a policy so that every emitted distribution is truncated.
pub struct TruncatedPolicy<P> {
    inner: P,
    spec: TruncationSpec,
}

impl<P: Policy> TruncatedPolicy<P> {
    pub fn new(inner: P, spec: TruncationSpec) -> Self {
        Self { inner, spec }
    }
}

impl<P: Policy> Policy for TruncatedPolicy<P> {
    fn vocab_size(&self) -> u32 {
        self.inner.vocab_size()
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        Ok(self.inner.next_dist(prefix)?.truncate(&self.spec))
    }
}

/// Policy defined by a closure over the prefix tokens. Handy for
/// constructed environments in tests and examples.
pub struct FnPolicy<F> {
    vocab_size: u32,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&[TokenId]) -> Result<Distribution, PolicyError> + Send + Sync,
{
    pub fn new(vocab_size: u32, f: F) -> Self {
        Self { vocab_size, f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&[TokenId]) -> Result<Distribution, PolicyError> + Send + Sync,
{
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        (self.f)(prefix.tokens)
    }
}

/// Pointwise convex combination of two policies:
/// `(1 - lambda) * a + lambda * b`, renormalized on the merged support.
///
/// Useful as a stand-in family of training checkpoints interpolating
/// from `a` (lambda = 0) to `b` (lambda = 1).
pub struct BlendPolicy<A, B> {
    a: A,
    b: B,
    lambda: f64,
}

impl<A: Policy, B: Policy> BlendPolicy<A, B> {
    pub fn new(a: A, b: B, lambda: f64) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(PolicyError::SpecInvalid(format!(
                "blend weight must lie in [0, 1], got {lambda}"
            )));
        }
        if a.vocab_size() != b.vocab_size() {
            return Err(PolicyError::SpecInvalid(
                "blended policies must share a vocabulary".into(),
            ));
        }
        Ok(Self { a, b, lambda })
    }
}

impl<A: Policy, B: Policy> Policy for BlendPolicy<A, B> {
    fn vocab_size(&self) -> u32 {
        self.a.vocab_size()
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        let da = self.a.next_dist(prefix)?;
        let db = self.b.next_dist(prefix)?;
        let mut weights: std::collections::BTreeMap<TokenId, f64> =
            std::collections::BTreeMap::new();
        for (t, p) in da.iter() {
            *weights.entry(t).or_insert(0.0) += (1.0 - self.lambda) * p;
        }
        for (t, p) in db.iter() {
            *weights.entry(t).or_insert(0.0) += self.lambda * p;
        }
        let pairs: Vec<(TokenId, f64)> = weights.into_iter().collect();
        Ok(Distribution::from_sparse(self.vocab_size(), &pairs)?)
    }
}
