//! Fine-grained mechanics at divergent positions: does the tuned policy
//! introduce new candidate tokens, or reorder the ones the base policy
//! already considered plausible?
//!
//! Computes, over positions whose JS divergence exceeds a threshold:
//! top-k candidate-set overlap, the base-model ranks of the tuned
//! model's top tokens, tail-promotion statistics (how often the tuned
//! top-1 was low-probability under base), the evolution of the divergent
//! set across a family of interpolated checkpoints, and the weight-level
//! gap ratio.
//!
//! Run with: cargo run --example shift_mechanics

use tokshift::cross::sample_policy;
use tokshift::dist::{TokenId, TruncationSpec};
use tokshift::mechanics::{
    base_rank_distribution_of_rl_topk, checkpoint_evolution, collect_pairs, tail_promotion_stats,
    topk_overlap_curve, weight_gap_ratio, EvolutionMode,
};
use tokshift::policy::{
    BlendPolicy, GenerationLimits, Policy, ToyPolicy, ToyPolicyKind, ToyPolicySpec, Trajectory,
};
use tokshift::rng::{fold_key, DrawStream};
use tokshift::shift::PercentileSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 21;
    let spec = |s| ToyPolicySpec {
        kind: ToyPolicyKind::SoftmaxNgram,
        vocab_size: 16,
        order: 1,
        seed: s,
        temperature: 1.0,
        eos: TokenId(0),
    };
    let base = ToyPolicy::new(spec(fold_key(&[seed, 1])))?;
    let tuned = ToyPolicy::new(spec(fold_key(&[seed, 2])))?;

    let trunc = TruncationSpec::none();
    let limits = GenerationLimits::new(40, TokenId(0));
    let trajectories: Vec<Trajectory> = (0..24)
        .map(|i| {
            let seq_id = format!("mech-{i}");
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
    let pairs = collect_pairs(&base, &tuned, &trajectories, &trunc)?;
    let threshold = 0.1;

    let overlap = topk_overlap_curve(&pairs, threshold, 6)?;
    println!(
        "top-k overlap at {} divergent positions (JS > {threshold}):",
        overlap.positions
    );
    for (k, v) in overlap.overlaps.iter().enumerate() {
        println!("  k={:<2} mean overlap {:.3}", k + 1, v);
    }

    let ranks = base_rank_distribution_of_rl_topk(&pairs, threshold, 3)?;
    println!("\nbase-model rank of the tuned model's top-j tokens:");
    for (j, hist) in ranks.per_j.iter().enumerate() {
        let within3: u64 = hist.iter().filter(|(&r, _)| r <= 3).map(|(_, &c)| c).sum();
        let total: u64 = hist.values().sum();
        print!("  j={}: ", j + 1);
        for (rank, count) in hist.iter().take(5) {
            print!("rank{rank}:{count} ");
        }
        println!(
            "... ({:.0}% within base top-3)",
            100.0 * within3 as f64 / total as f64
        );
    }

    let tail = tail_promotion_stats(&pairs, threshold, &[0.001, 0.01, 0.05, 0.2], 0.01)?;
    println!("\ntail promotion (tuned top-1 under the base distribution):");
    for (tau, frac) in &tail.fraction_below {
        println!(
            "  base prob < {tau:<6}: {:.1}% of divergent positions",
            frac * 100.0
        );
    }
    println!(
        "  {} promoted from below {}; their tuned probabilities: {:?}",
        tail.sub_cutoff_rl_probs.len(),
        tail.cutoff,
        tail.sub_cutoff_rl_probs
            .iter()
            .map(|p| (p * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );

    // Training evolution stand-in: checkpoints interpolating base -> tuned.
    let n_checkpoints = 6;
    let blends: Vec<BlendPolicy<&ToyPolicy, &ToyPolicy>> = (0..n_checkpoints)
        .map(|i| BlendPolicy::new(&base, &tuned, i as f64 / (n_checkpoints - 1) as f64))
        .collect::<Result<_, _>>()?;
    let checkpoints: Vec<&dyn Policy> = blends.iter().map(|b| b as &dyn Policy).collect();
    let evolution = checkpoint_evolution(
        &checkpoints,
        &trajectories,
        &trunc,
        &PercentileSpec::new(vec![50.0, 95.0, 99.0])?,
        EvolutionMode::AgainstBase,
        threshold,
    )?;
    println!("\ndivergence evolution across interpolated checkpoints:");
    for c in &evolution.checkpoints {
        let p95 = c.js_percentiles.iter().find(|(p, _)| *p == 95.0).unwrap().1;
        println!(
            "  checkpoint {}: p95 JS {:.4}, divergent set {:>3}, Jaccard with final {:.3}",
            c.index, p95, c.divergent_positions, c.jaccard_with_final
        );
    }

    // Weight-level view: a sparse tuned update against a broad one.
    let mut s = DrawStream::new(9);
    let original: Vec<f64> = (0..4096).map(|_| s.next_unit() * 2.0 - 1.0).collect();
    let mut sparse = original.clone();
    for i in (0..sparse.len()).step_by(97) {
        sparse[i] += 0.05;
    }
    let broad: Vec<f64> = original.iter().map(|w| w + 0.02).collect();
    println!(
        "\nweight gap ratio: sparse update {:.5}, broad update {:.5}",
        weight_gap_ratio(&original, &sparse)?,
        weight_gap_ratio(&original, &broad)?
    );
    Ok(())
}
