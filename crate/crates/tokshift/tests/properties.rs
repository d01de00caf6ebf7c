//! Randomized property suites for the numeric core.

use proptest::prelude::*;

use tokshift::bounds::enumerate_law;
use tokshift::cross::{cross_sample_generate, CrossSampleConfig, SwitchingRule};
use tokshift::dist::{
    js_divergence, kl_divergence, skew_js_divergence, Distribution, TokenId, TruncationSpec,
};
use tokshift::policy::{GenerationLimits, ToyPolicy, ToyPolicyKind, ToyPolicySpec};

const LN_2: f64 = std::f64::consts::LN_2;

/// Two weight vectors over a shared vocabulary, each with at least one
/// positive entry.
fn weight_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|v| {
        let weights = prop::collection::vec(0.0..1.0f64, v);
        (weights.clone(), weights).prop_filter("needs positive mass", |(a, b)| {
            a.iter().any(|&x| x > 0.0) && b.iter().any(|&x| x > 0.0)
        })
    })
}

fn dense_weights() -> impl Strategy<Value = Vec<f64>> {
    (2usize..12).prop_flat_map(|v| prop::collection::vec(1e-3..1.0f64, v))
}

proptest! {
    #[test]
    fn js_is_symmetric_and_bounded((a, b) in weight_pair()) {
        let p = Distribution::from_weights(&a).unwrap();
        let q = Distribution::from_weights(&b).unwrap();
        let js = js_divergence(&p, &q);
        prop_assert!((js - js_divergence(&q, &p)).abs() <= 1e-12);
        prop_assert!(js >= -1e-12);
        prop_assert!(js <= LN_2 + 1e-12);
    }

    #[test]
    fn skew_js_at_half_is_js((a, b) in weight_pair()) {
        let p = Distribution::from_weights(&a).unwrap();
        let q = Distribution::from_weights(&b).unwrap();
        prop_assert!((skew_js_divergence(&p, &q, 0.5) - js_divergence(&p, &q)).abs() <= 1e-12);
    }

    #[test]
    fn kl_nonnegative_and_definite(a in dense_weights(), b in dense_weights()) {
        // Same-length dense pairs; KL is defined and non-negative, zero
        // only for (numerically) identical distributions.
        let n = a.len().min(b.len());
        let p = Distribution::from_weights(&a[..n]).unwrap();
        let q = Distribution::from_weights(&b[..n]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap() == 0.0);
        // Pinsker: separated distributions have strictly positive KL.
        let tv: f64 = 0.5 * p.support().iter()
            .map(|&t| (p.prob(t) - q.prob(t)).abs())
            .sum::<f64>();
        if tv > 1e-3 {
            prop_assert!(kl > 2.0 * tv * tv - 1e-12);
        }
    }

    #[test]
    fn top_p_one_is_identity(a in dense_weights()) {
        let p = Distribution::from_weights(&a).unwrap();
        prop_assert_eq!(p.truncate(&TruncationSpec::none()), p.clone());
    }

    #[test]
    fn nucleus_is_smallest_covering_prefix(a in dense_weights(), top_p in 0.05..1.0f64) {
        let p = Distribution::from_weights(&a).unwrap();
        let spec = TruncationSpec::top_p(top_p);
        let t = p.truncate(&spec);
        // Retained tokens are a subset of the original support.
        for &tok in t.support() {
            prop_assert!(p.prob(tok) > 0.0);
        }
        // Their original mass reaches top_p...
        let retained_mass: f64 = t.support().iter().map(|&tok| p.prob(tok)).sum();
        prop_assert!(retained_mass >= top_p - 1e-9);
        // ...and dropping the weakest retained token would not.
        if t.support().len() > 1 {
            let ranked = p.ranked_tokens(t.support().len());
            let without_last: f64 = ranked[..ranked.len() - 1]
                .iter()
                .map(|&tok| p.prob(tok))
                .sum();
            prop_assert!(without_last < top_p + 1e-9);
        }
        // Renormalized.
        prop_assert!((t.total_mass() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rank_is_bijection_onto_vocab(a in dense_weights()) {
        let p = Distribution::from_weights(&a).unwrap();
        let v = p.vocab_size();
        let mut ranks: Vec<u32> = (0..v).map(|i| p.rank_of(TokenId(i))).collect();
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=v).collect::<Vec<u32>>());
    }

    #[test]
    fn top_k_set_has_expected_size(a in dense_weights(), k in 1usize..20) {
        let p = Distribution::from_weights(&a).unwrap();
        let set = p.top_k_set(k);
        prop_assert_eq!(set.len(), k.min(p.vocab_size() as usize));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn budget_and_threshold_laws(
        seed in 0u64..1_000_000,
        budget in 0u64..6,
        epsilon in 0.0..LN_2,
    ) {
        let mk = |s| ToyPolicy::new(ToyPolicySpec {
            kind: ToyPolicyKind::TabularMarkov,
            vocab_size: 5,
            order: 1,
            seed: s,
            temperature: 1.0,
            eos: TokenId(0),
        }).unwrap();
        let a = mk(seed);
        let b = mk(seed ^ 0xffff);
        let cfg = CrossSampleConfig {
            primary: &a,
            intervention: &b,
            rule: SwitchingRule::js(epsilon, TruncationSpec::none()),
            budget: Some(budget),
            limits: GenerationLimits::new(8, TokenId(0)),
            seed,
            seq_id: "prop".into(),
            prompt: vec![],
        };
        let trace = cross_sample_generate(&cfg).unwrap();
        prop_assert!(trace.total_count <= budget);
        prop_assert!(trace.effective_count <= trace.total_count);
        for iv in &trace.interventions {
            prop_assert!(iv.js > epsilon);
        }
        // Same configuration, same bytes.
        let again = cross_sample_generate(&cfg).unwrap();
        prop_assert_eq!(
            serde_json::to_vec(&trace).unwrap(),
            serde_json::to_vec(&again).unwrap()
        );
    }

    #[test]
    fn enumerated_laws_are_normalized_and_absorbed(seed in 0u64..1_000_000) {
        let p = ToyPolicy::new(ToyPolicySpec {
            kind: ToyPolicyKind::SoftmaxNgram,
            vocab_size: 3,
            order: 1,
            seed,
            temperature: 1.0,
            eos: TokenId(0),
        }).unwrap();
        let law = enumerate_law(&p, &GenerationLimits::new(4, TokenId(0))).unwrap();
        prop_assert!(law.validate().is_ok());
        prop_assert!((law.total() - 1.0).abs() <= 1e-12);
    }
}
