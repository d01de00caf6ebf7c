//! The mixed-policy sampler agrees with its measure-theoretic law.
//!
//! On a tiny instance the sequence law of the unbudgeted mixed policy
//! can be enumerated exactly; the empirical distribution of seeded
//! sampler runs converges to it, and with budget 0 the sampler
//! reproduces the plain primary-policy sampler seed for seed. This ties
//! the generation loop to the definitions used by the bound verifiers.
//!
//! Run with: cargo run --example exact_sampler_law

use tokshift::bounds::{enumerate_law, SequenceLaw};
use tokshift::cross::{
    cross_sample_generate, sample_policy, CrossSampleConfig, MixedPolicy, SwitchingRule,
};
use tokshift::dist::{TokenId, TruncationSpec};
use tokshift::policy::{GenerationLimits, ToyPolicy, ToyPolicyKind, ToyPolicySpec};
use tokshift::rng::fold_key;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 3;
    let spec = |s| ToyPolicySpec {
        kind: ToyPolicyKind::TabularMarkov,
        vocab_size: 3,
        order: 1,
        seed: s,
        temperature: 1.0,
        eos: TokenId(0),
    };
    let primary = ToyPolicy::new(spec(fold_key(&[seed, 1])))?;
    let intervention = ToyPolicy::new(spec(fold_key(&[seed, 2])))?;
    let limits = GenerationLimits::new(3, TokenId(0));
    let rule = SwitchingRule::js(0.05, TruncationSpec::none());

    // Exact law by enumeration over the EOS-absorbed horizon.
    let mixed = MixedPolicy::new(&primary, &intervention, rule.clone())?;
    let law = enumerate_law(&mixed, &limits)?;
    println!(
        "enumerated mixed law: {} sequences, total mass {:.15}",
        law.len(),
        law.total()
    );

    // Empirical law from seeded sampler runs.
    let n = 200_000usize;
    let runs: Vec<Vec<TokenId>> = (0..n)
        .map(|i| {
            let cfg = CrossSampleConfig {
                primary: &primary,
                intervention: &intervention,
                rule: rule.clone(),
                budget: None,
                limits: limits.clone(),
                seed: fold_key(&[17, i as u64]),
                seq_id: format!("law-{i}"),
                prompt: vec![],
            };
            cross_sample_generate(&cfg).map(|t| t.tokens)
        })
        .collect::<Result<_, _>>()?;
    let empirical = SequenceLaw::empirical(&limits, runs);
    println!(
        "empirical law from {n} runs: total variation {:.6}",
        empirical.total_variation(&law)?
    );

    println!("\nper-sequence comparison (exact vs empirical):");
    for (sequence, p) in law.iter() {
        let tokens: Vec<u32> = sequence.iter().map(|t| t.0).collect();
        println!("  {tokens:?}  {p:.6}  {:.6}", empirical.prob(sequence));
    }

    // Budget 0 never intervenes: identical to the plain primary sampler.
    let mut identical = true;
    for i in 0..1000u64 {
        let s = fold_key(&[23, i]);
        let cfg = CrossSampleConfig {
            primary: &primary,
            intervention: &intervention,
            rule: rule.clone(),
            budget: Some(0),
            limits: limits.clone(),
            seed: s,
            seq_id: "b0".into(),
            prompt: vec![],
        };
        let budgeted = cross_sample_generate(&cfg)?;
        let plain = sample_policy(&primary, &rule.trunc, &limits, s, "b0", &[])?;
        identical &= budgeted.tokens == plain.tokens;
    }
    println!("\nbudget-0 equals plain primary sampling over 1000 seeds: {identical}");
    Ok(())
}
