//! Budgeted cross-sampling between two policies.
//!
//! Generation runs under a primary policy; where the JS divergence of
//! the two next-token distributions exceeds a threshold, the token is
//! sampled from the intervention policy instead, up to an intervention
//! budget. Forward mode treats the base policy as primary with the
//! tuned policy intervening; reverse swaps the roles. Budget sweeps
//! report how a success predicate responds as interventions are allowed.
//!
//! Run with: cargo run --example cross_sampling

use tokshift::cross::{
    budget_sweep, cross_sample_generate, replacement_pair_histogram, CrossSampleConfig,
    SuccessPredicate, SwitchingRule,
};
use tokshift::dist::{TokenId, TruncationSpec};
use tokshift::policy::{GenerationLimits, ToyPolicy, ToyPolicyKind, ToyPolicySpec};
use tokshift::rng::fold_key;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 7;
    let spec = |s| ToyPolicySpec {
        kind: ToyPolicyKind::TabularMarkov,
        vocab_size: 8,
        order: 1,
        seed: s,
        temperature: 1.0,
        eos: TokenId(0),
    };
    let base = ToyPolicy::new(spec(fold_key(&[seed, 1])))?;
    let tuned = ToyPolicy::new(spec(fold_key(&[seed, 2])))?;

    let rule = SwitchingRule::js(0.05, TruncationSpec::top_p(0.95));
    let limits = GenerationLimits::new(24, TokenId(0));

    // A single unbudgeted forward generation, with its intervention log.
    let cfg = CrossSampleConfig {
        primary: &base,
        intervention: &tuned,
        rule: rule.clone(),
        budget: None,
        limits: limits.clone(),
        seed: fold_key(&[seed, 10]),
        seq_id: "forward-demo".into(),
        prompt: vec![],
    };
    let trace = cross_sample_generate(&cfg)?;
    println!(
        "forward generation: {} tokens, terminated by {:?}",
        trace.tokens.len(),
        trace.terminated_by
    );
    println!(
        "  interventions: {} total, {} effective (identity swaps excluded)",
        trace.total_count, trace.effective_count
    );
    for iv in trace.interventions.iter().take(6) {
        println!(
            "  pos {:>2}: JS {:.4}, primary would draw {} -> intervention drew {}{}",
            iv.pos,
            iv.js,
            iv.primary_token,
            iv.intervention_token,
            if iv.is_identity() { " (identity)" } else { "" }
        );
    }

    // Replacement pairs across many runs.
    let traces: Vec<_> = (0..200)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = fold_key(&[seed, 20, i]);
            c.seq_id = format!("fwd-{i}");
            cross_sample_generate(&c)
        })
        .collect::<Result<_, _>>()?;
    let pairs = replacement_pair_histogram(&traces);
    println!("\ntop replacement pairs over 200 forward runs:");
    let mut sorted: Vec<_> = pairs.iter().collect();
    sorted.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (&(from, to), count) in sorted.into_iter().take(8) {
        println!("  {from} -> {to}: {count}");
    }

    // Budget sweeps in both directions. Success here: the sequence
    // terminates with EOS inside the token limit.
    let predicate = SuccessPredicate::EndsWith(TokenId(0));
    let budgets = [0, 1, 2, 4, 8, 16];
    println!("\nbudget sweep (success = generation ends with EOS):");
    println!(
        "  {:>6}  {:>9}  {:>9}  {:>10}  {:>8}",
        "budget", "fwd rate", "rev rate", "fwd eff", "fwd eff%"
    );
    let reverse_cfg = CrossSampleConfig {
        primary: &tuned,
        intervention: &base,
        rule,
        budget: None,
        limits,
        seed: cfg.seed,
        seq_id: "reverse-demo".into(),
        prompt: vec![],
    };
    let forward = budget_sweep(&cfg, &budgets, 500, &predicate)?;
    let reverse = budget_sweep(&reverse_cfg, &budgets, 500, &predicate)?;
    for (f, r) in forward.points.iter().zip(&reverse.points) {
        println!(
            "  {:>6}  {:>9.3}  {:>9.3}  {:>10.2}  {:>7.2}%",
            f.budget, f.success_rate, r.success_rate, f.mean_effective, f.mean_effective_pct
        );
    }
    Ok(())
}
