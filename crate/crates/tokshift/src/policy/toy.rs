//! Seeded toy sequence models for exact, desk-scale verification.
//!
//! Parameters are derived on the fly from a counter-based generator keyed
//! by `(seed, kind, effective context)`, so a policy is a pure function of
//! its spec: two builds with the same spec agree bit for bit and need no
//! mutable state.

use serde::{Deserialize, Serialize};

use crate::dist::{Distribution, TokenId};
use crate::rng::{fold_key, keyed_unit};

use super::{Policy, PolicyError, Prefix};

pub const MAX_VOCAB: u32 = 64;
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyPolicyKind {
    /// Per-context categorical table with uniform-random weights.
    TabularMarkov,
    /// Per-context Gaussian logits passed through a tempered softmax.
    SoftmaxNgram,
}

impl std::str::FromStr for ToyPolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabular-markov" | "tabular" | "markov" => Ok(Self::TabularMarkov),
            "softmax-ngram" | "softmax" | "ngram" => Ok(Self::SoftmaxNgram),
            other => Err(format!(
                "unknown toy policy kind {other:?} (expected tabular-markov or softmax-ngram)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicySpec {
    pub kind: ToyPolicyKind,
    pub vocab_size: u32,
    /// Context length: the next-token distribution depends on at most
    /// the last `order` tokens.
    pub order: usize,
    pub seed: u64,
    pub temperature: f64,
    pub eos: TokenId,
}

impl ToyPolicySpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size < 2 || self.vocab_size > MAX_VOCAB {
            return Err(PolicyError::SpecInvalid(format!(
                "vocab_size must lie in 2..={MAX_VOCAB}, got {}",
                self.vocab_size
            )));
        }
        if self.order > MAX_ORDER {
            return Err(PolicyError::SpecInvalid(format!(
                "order must be <= {MAX_ORDER}, got {}",
                self.order
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::SpecInvalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.eos.0 >= self.vocab_size {
            return Err(PolicyError::SpecInvalid(format!(
                "eos token {} out of range for vocabulary of size {}",
                self.eos, self.vocab_size
            )));
        }
        Ok(())
    }
}

impl Default for ToyPolicySpec {
    fn default() -> Self {
        Self {
            kind: ToyPolicyKind::TabularMarkov,
            vocab_size: 4,
            order: 1,
            seed: 0,
            temperature: 1.0,
            eos: TokenId(0),
        }
    }
}

/// Deterministic toy policy backed by counter-based parameter derivation.
pub struct ToyPolicy {
    spec: ToyPolicySpec,
}

impl ToyPolicy {
    pub fn new(spec: ToyPolicySpec) -> Result<Self, PolicyError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ToyPolicySpec {
        &self.spec
    }

    fn context_key(&self, tokens: &[TokenId]) -> u64 {
        let start = tokens.len().saturating_sub(self.spec.order);
        let ctx = &tokens[start..];
        let kind_tag = match self.spec.kind {
            ToyPolicyKind::TabularMarkov => 1,
            ToyPolicyKind::SoftmaxNgram => 2,
        };
        let mut parts = Vec::with_capacity(ctx.len() + 2);
        parts.push(self.spec.seed);
        parts.push(kind_tag);
        parts.extend(ctx.iter().map(|t| t.0 as u64 + 1));
        fold_key(&parts)
    }
}

impl Policy for ToyPolicy {
    fn vocab_size(&self) -> u32 {
        self.spec.vocab_size
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        let key = self.context_key(prefix.tokens);
        let v = self.spec.vocab_size as usize;
        let tau = self.spec.temperature;
        let weights: Vec<f64> = match self.spec.kind {
            ToyPolicyKind::TabularMarkov => (0..v)
                // keyed_unit is in (0, 1), so w^(1/tau) stays positive and
                // flattens to uniform as tau grows.
                .map(|t| keyed_unit(key, t as u64).powf(1.0 / tau))
                .collect(),
            ToyPolicyKind::SoftmaxNgram => {
                let logits: Vec<f64> = (0..v)
                    .map(|t| {
                        // Box-Muller on two counter draws: standard normal logit.
                        let u1 = keyed_unit(key, 2 * t as u64);
                        let u2 = keyed_unit(key, 2 * t as u64 + 1);
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.iter().map(|z| ((z - max) / tau).exp()).collect()
            }
        };
        Ok(Distribution::from_weights(&weights)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::kl_divergence;
    use crate::rng::DrawStream;

    fn spec(kind: ToyPolicyKind, seed: u64) -> ToyPolicySpec {
        ToyPolicySpec {
            kind,
            vocab_size: 8,
            order: 2,
            seed,
            temperature: 1.0,
            eos: TokenId(0),
        }
    }

    fn random_prefixes(n: usize, vocab: u32, max_len: usize, seed: u64) -> Vec<Vec<TokenId>> {
        let mut s = DrawStream::new(seed);
        (0..n)
            .map(|_| {
                let len = (s.next_u64() % (max_len as u64 + 1)) as usize;
                (0..len)
                    .map(|_| TokenId((s.next_u64() % vocab as u64) as u32))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn same_spec_builds_identical_policies() {
        for kind in [ToyPolicyKind::TabularMarkov, ToyPolicyKind::SoftmaxNgram] {
            let a = ToyPolicy::new(spec(kind, 11)).unwrap();
            let b = ToyPolicy::new(spec(kind, 11)).unwrap();
            for tokens in random_prefixes(100, 8, 6, 3) {
                let pa = a.next_dist(Prefix::new("x", &tokens)).unwrap();
                let pb = b.next_dist(Prefix::new("x", &tokens)).unwrap();
                assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn single_seed_bit_changes_some_distribution() {
        let a = ToyPolicy::new(spec(ToyPolicyKind::TabularMarkov, 11)).unwrap();
        let b = ToyPolicy::new(spec(ToyPolicyKind::TabularMarkov, 11 ^ 1)).unwrap();
        let differs = random_prefixes(100, 8, 6, 5).iter().any(|tokens| {
            let pa = a.next_dist(Prefix::new("x", tokens)).unwrap();
            let pb = b.next_dist(Prefix::new("x", tokens)).unwrap();
            pa != pb
        });
        assert!(differs);
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        for kind in [ToyPolicyKind::TabularMarkov, ToyPolicyKind::SoftmaxNgram] {
            let mut s = spec(kind, 3);
            s.temperature = 1e6;
            let p = ToyPolicy::new(s).unwrap();
            let d = p.next_dist(Prefix::new("x", &[TokenId(1)])).unwrap();
            let uniform = Distribution::from_weights(&[1.0; 8]).unwrap();
            assert!(kl_divergence(&d, &uniform).unwrap() < 1e-3);
        }
    }

    #[test]
    fn stationary_in_last_order_tokens() {
        let p = ToyPolicy::new(spec(ToyPolicyKind::SoftmaxNgram, 9)).unwrap();
        let a = [TokenId(1), TokenId(2), TokenId(3), TokenId(4)];
        let b = [TokenId(7), TokenId(6), TokenId(3), TokenId(4)];
        // Equal suffixes of length `order` => identical distributions.
        let da = p.next_dist(Prefix::new("x", &a)).unwrap();
        let db = p.next_dist(Prefix::new("y", &b)).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = spec(ToyPolicyKind::TabularMarkov, 0);
        s.vocab_size = 65;
        assert!(ToyPolicy::new(s).is_err());

        let mut s = spec(ToyPolicyKind::TabularMarkov, 0);
        s.temperature = 0.0;
        assert!(ToyPolicy::new(s).is_err());

        let mut s = spec(ToyPolicyKind::TabularMarkov, 0);
        s.eos = TokenId(8);
        assert!(ToyPolicy::new(s).is_err());

        let mut s = spec(ToyPolicyKind::TabularMarkov, 0);
        s.order = 5;
        assert!(ToyPolicy::new(s).is_err());
    }
}
