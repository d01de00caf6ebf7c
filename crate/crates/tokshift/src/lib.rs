//! # tokshift
//!
//! Quantifies token-level distributional shifts between two next-token
//! policies (for example a base LLM and its RL-finetuned counterpart),
//! generates under budgeted mixed policies that switch on a divergence
//! threshold, verifies sequence-level divergence bounds by exact
//! enumeration on tiny instances, and computes divergence-weighted
//! advantage signals.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`dist`] — exact probability-vector arithmetic: normalization,
//!   top-p truncation, KL / JS / skew-JS divergences, entropy, ranks.
//! - [`policy`] — the [`policy::Policy`] abstraction over conditional
//!   next-token distributions, with seeded toy models, replay of
//!   logprob dumps, and small combinators.
//! - [`shift`] — per-position divergence/entropy records along
//!   trajectories and the aggregate statistics over them.
//! - [`mechanics`] — candidate-set overlap, rank provenance, tail
//!   promotion, checkpoint evolution, and the weight gap ratio.
//! - [`cross`] — mixed-policy generation with a divergence-threshold
//!   switching rule, intervention budgets, and budget sweeps.
//! - [`bounds`] — exact enumeration of sequence laws on tiny instances
//!   and verification of the chain-rule decompositions and the
//!   `epsilon * E[N0]` divergence bounds.
//! - [`rl`] — group-normalized advantages, clipped per-token surrogate
//!   terms, the k3 KL estimator, and sigmoid divergence weights.
//! - [`report`] — deterministic JSON/CSV emission helpers.
//! - [`cli`] — the command-line entry point wrapping all of the above.
//!
//! Every operation is deterministic given its inputs and seeds; see the
//! `examples/` directory for one runnable walkthrough per capability.

pub mod bounds;
pub mod cli;
pub mod cross;
pub mod dist;
pub mod mechanics;
pub mod policy;
pub mod report;
pub mod rl;
pub mod rng;
pub mod shift;

mod accum;

pub use dist::{Distribution, TokenId, TruncationSpec};
pub use policy::{GenerationLimits, Policy, Prefix, Trajectory};
