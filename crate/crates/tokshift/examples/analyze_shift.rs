//! Per-token distribution shift analysis between two policies.
//!
//! Builds a seeded toy policy pair standing in for a base model and its
//! fine-tuned counterpart, generates reference trajectories from the
//! "tuned" side, and walks them with both policies to produce one record
//! per position: JS divergence (on the truncated distributions used for
//! sampling), entropies, and ranks of the sampled token. Then prints the
//! aggregate views: divergence histogram, percentile curve, positional
//! profile, divergence-entropy split, and token frequency tables.
//!
//! Run with: cargo run --example analyze_shift

use std::num::NonZeroUsize;

use tokshift::cross::sample_policy;
use tokshift::dist::{TokenId, TruncationSpec};
use tokshift::policy::{GenerationLimits, ToyPolicy, ToyPolicyKind, ToyPolicySpec, Trajectory};
use tokshift::rng::fold_key;
use tokshift::shift::{
    analyze_pairs, entropy_by_divergence_bins, js_histogram, js_percentiles, positional_profile,
    token_frequency_by_divergence, HistogramSpec, PercentileSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 42;
    let vocab_size = 12;
    let spec = |s| ToyPolicySpec {
        kind: ToyPolicyKind::SoftmaxNgram,
        vocab_size,
        order: 2,
        seed: s,
        temperature: 1.0,
        eos: TokenId(0),
    };
    let base = ToyPolicy::new(spec(fold_key(&[seed, 1])))?;
    let tuned = ToyPolicy::new(spec(fold_key(&[seed, 2])))?;

    // Sample 32 reference trajectories from the tuned policy under the
    // same nucleus configuration used for the divergence computation.
    let trunc = TruncationSpec::top_p(0.9);
    let limits = GenerationLimits::new(48, TokenId(0));
    let trajectories: Vec<Trajectory> = (0..32)
        .map(|i| {
            let seq_id = format!("demo-{i}");
            let run = sample_policy(
                &tuned,
                &trunc,
                &limits,
                fold_key(&[seed, 3, i]),
                &seq_id,
                &[],
            )?;
            Ok::<_, tokshift::cross::CrossError>(Trajectory::new(seq_id, run.tokens))
        })
        .collect::<Result<_, _>>()?;

    let records = analyze_pairs(&base, &tuned, &trajectories, &trunc)?;
    println!(
        "analyzed {} positions across {} trajectories\n",
        records.len(),
        trajectories.len()
    );

    let hist_spec = HistogramSpec::linear(0.0, std::f64::consts::LN_2, 10)?;
    let counts = js_histogram(&records, &hist_spec);
    println!("JS divergence histogram (linear bins over [0, ln 2]):");
    let max = counts.iter().copied().max().unwrap_or(1).max(1);
    for (i, &c) in counts.iter().enumerate() {
        let bar = "#".repeat((c as usize * 40).div_ceil(max as usize).min(40));
        println!(
            "  [{:.3}, {:.3})  {:>5}  {}",
            hist_spec.edges[i],
            hist_spec.edges[i + 1],
            c,
            bar
        );
    }

    let pct_spec = PercentileSpec::new(vec![25.0, 50.0, 75.0, 90.0, 95.0, 99.0])?;
    println!("\nJS percentiles:");
    for (p, v) in js_percentiles(&records, &pct_spec)? {
        println!("  p{p:<4} {v:.6}");
    }

    println!("\nJS by normalized position (8 bins):");
    for bin in positional_profile(&records, NonZeroUsize::new(8).unwrap()) {
        match bin.stats {
            Some(stats) => println!(
                "  [{:.3}, {:.3})  n={:<4} mean={:.4} median={:.4} p95={:.4}",
                bin.lo, bin.hi, bin.count, stats.mean, stats.median, stats.p95
            ),
            None => println!("  [{:.3}, {:.3})  (empty)", bin.lo, bin.hi),
        }
    }

    let bins = entropy_by_divergence_bins(&records, 0.1)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    println!(
        "\ndivergence-entropy split at JS 0.1: {} low / {} high",
        bins.low.len(),
        bins.high.len()
    );
    println!(
        "  low-divergence  mean entropies: base {:.4}, tuned {:.4}",
        mean(&bins.low.iter().map(|s| s.base).collect::<Vec<_>>()),
        mean(&bins.low.iter().map(|s| s.rl).collect::<Vec<_>>()),
    );
    if !bins.high.is_empty() {
        println!(
            "  high-divergence mean entropies: base {:.4}, tuned {:.4}",
            mean(&bins.high.iter().map(|s| s.base).collect::<Vec<_>>()),
            mean(&bins.high.iter().map(|s| s.rl).collect::<Vec<_>>()),
        );
    }

    let tokens = token_frequency_by_divergence(&records, 0.1, 0.01, 5)?;
    println!("\nmost frequent tokens in high-divergence contexts (JS > 0.1):");
    for (token, count) in tokens
        .high
        .js_values
        .keys()
        .map(|t| (*t, tokens.high.counts[t]))
    {
        let all = &tokens.high.js_values[&token];
        println!(
            "  token {token:<3} x{count:<3}  JS over all {} occurrences: min {:.4}, max {:.4}",
            all.len(),
            all.iter().cloned().fold(f64::INFINITY, f64::min),
            all.iter().cloned().fold(0.0, f64::max),
        );
    }
    Ok(())
}
