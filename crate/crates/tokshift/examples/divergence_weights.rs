//! Divergence-weighted advantage signals.
//!
//! Shows the pieces of the weighted objective: group-normalized
//! advantages over a reward group, per-token KL estimated with the k3
//! estimator from probability ratios, sigmoid weights that boost high-
//! or low-divergence tokens depending on the sign of alpha, the
//! asymmetrically clipped per-token surrogate, and the linear ramp
//! schedule for alpha.
//!
//! Run with: cargo run --example divergence_weights

use tokshift::rl::{
    alpha_schedule, dapo_batch_objective, dapo_token_objective, divergence_weighted_advantage,
    dynamic_sampling_admissible, group_advantage, k3_kl_estimate, sigmoid_weight, AlphaSchedule,
    ClipParams, WeightingParams,
};
use tokshift::rng::DrawStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Sequence-level rewards for a group of 8 sampled responses.
    let rewards = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    let correct = rewards.iter().filter(|&&r| r > 0.5).count();
    println!(
        "reward group {:?}: admissible={}",
        rewards,
        dynamic_sampling_admissible(correct, rewards.len())
    );
    let advantages = group_advantage(&rewards)?;
    println!("group-normalized advantages: {advantages:.3?}\n");

    // Per-token probability ratios (new policy / old policy) for one
    // response; k3 turns each into a single-sample KL estimate.
    let mut s = DrawStream::new(5);
    let ratios: Vec<f64> = (0..10).map(|_| (s.next_unit() * 2.0 - 1.0).exp()).collect();
    let kls: Vec<f64> = ratios
        .iter()
        .map(|&r| k3_kl_estimate(r))
        .collect::<Result<_, _>>()?;
    println!("token  ratio    k3-KL     w(high)  w(low)");
    let high_boost = WeightingParams { s: 0.3, alpha: 8.0 };
    let low_boost = WeightingParams {
        s: 0.3,
        alpha: -8.0,
    };
    for (i, (&r, &kl)) in ratios.iter().zip(&kls).enumerate() {
        println!(
            "  {i:<4} {r:<8.4} {kl:<9.6} {:<8.4} {:<8.4}",
            sigmoid_weight(kl, &high_boost),
            sigmoid_weight(kl, &low_boost)
        );
    }

    // Weighted advantages: every token of this response carries the
    // sequence advantage, modulated by its divergence weight.
    let seq_advantage = advantages[0];
    let per_token = vec![seq_advantage; kls.len()];
    let weighted = divergence_weighted_advantage(&per_token, &kls, &high_boost)?;
    println!("\nhigh-KL boost on advantage {seq_advantage:.3}: {weighted:.4?}");

    // Clipped per-token surrogate terms and their token-level average.
    let clip = ClipParams::new(0.2, 0.28)?;
    let terms: Vec<f64> = ratios
        .iter()
        .zip(&weighted)
        .map(|(&r, &a)| dapo_token_objective(r, a, &clip))
        .collect();
    println!("clipped surrogate terms: {terms:.4?}");
    println!(
        "token-level batch objective: {:.6}",
        dapo_batch_objective(&[terms])?
    );

    // Alpha ramps used to phase weighting in during training.
    let ramp_up = AlphaSchedule {
        start_step: 100,
        end_step: 200,
        end_value: 50.0,
    };
    let ramp_down = AlphaSchedule {
        start_step: 150,
        end_step: 250,
        end_value: -50.0,
    };
    println!("\nalpha schedules (step: ramp-up, ramp-down):");
    for step in [0, 100, 150, 200, 250, 300] {
        println!(
            "  {:>4}: {:>6.1}  {:>6.1}",
            step,
            alpha_schedule(step, &ramp_up)?,
            alpha_schedule(step, &ramp_down)?
        );
    }
    Ok(())
}
