//! Logprob dump round trip: record, write, load, replay, analyze.
//!
//! Real deployments dump per-position top-k logprobs for two models
//! along sampled trajectories; this toolkit replays such dumps as
//! policies defined on the recorded paths. The example synthesizes a
//! dump from a toy pair (standing in for the inference engine), writes
//! the newline-delimited JSON file, loads it back with full validation,
//! and runs the shift analysis on the replayed policies.
//!
//! Run with: cargo run --example replay_dump

use tokshift::cross::sample_policy;
use tokshift::dist::{TokenId, TruncationSpec};
use tokshift::policy::{
    load_dump, DumpMeta, DumpRecord, GenerationLimits, LogprobDump, Policy, ToyPolicy,
    ToyPolicyKind, ToyPolicySpec,
};
use tokshift::rng::fold_key;
use tokshift::shift::analyze_pairs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 11;
    let vocab_size = 10;
    let top_k = 5;
    let spec = |s| ToyPolicySpec {
        kind: ToyPolicyKind::SoftmaxNgram,
        vocab_size,
        order: 1,
        seed: s,
        temperature: 1.0,
        eos: TokenId(0),
    };
    let model_a = ToyPolicy::new(spec(fold_key(&[seed, 1])))?;
    let model_b = ToyPolicy::new(spec(fold_key(&[seed, 2])))?;

    // Record: sample 4 trajectories from model B and store both models'
    // top-k logprobs at every position.
    let limits = GenerationLimits::new(16, TokenId(0));
    let mut records = Vec::new();
    for i in 0..4u64 {
        let seq_id = format!("rec-{i}");
        let run = sample_policy(
            &model_b,
            &TruncationSpec::none(),
            &limits,
            fold_key(&[seed, 3, i]),
            &seq_id,
            &[],
        )?;
        for pos in 0..run.tokens.len() {
            let prefix = tokshift::policy::Prefix::new(&seq_id, &run.tokens[..pos]);
            let tops = [&model_a, &model_b].map(|m| {
                let d = m.next_dist(prefix).expect("toy policies are total");
                d.ranked_tokens(top_k)
                    .into_iter()
                    .map(|t| (t, d.prob(t).ln()))
                    .collect::<Vec<_>>()
            });
            records.push((
                seq_id.clone(),
                DumpRecord {
                    pos,
                    sampled: run.tokens[pos],
                    a_top: tops[0].clone(),
                    b_top: tops[1].clone(),
                },
            ));
        }
    }
    let dump = LogprobDump::from_records(
        DumpMeta {
            vocab_size,
            a_name: "toy-base".into(),
            b_name: "toy-tuned".into(),
            top_p: 1.0,
            temperature: 1.0,
        },
        records,
    )?;

    // Write and reload through the on-disk format.
    let dir = std::env::temp_dir().join("tokshift-replay-demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("dump.ndjson");
    dump.write(std::fs::File::create(&path)?)?;
    println!(
        "wrote {} positions to {}",
        dump.num_positions(),
        path.display()
    );

    let loaded = load_dump(&path)?;
    println!(
        "loaded dump: models {:?} vs {:?}, {} sequences, {} positions",
        loaded.meta.a_name,
        loaded.meta.b_name,
        loaded.num_sequences(),
        loaded.num_positions()
    );

    // Replay policies reproduce the stored mass (renormalized top-k).
    let (a, b) = loaded.as_policies();
    let trajectories = loaded.trajectories();
    let first = &trajectories[0];
    let stored = &loaded.records(&first.seq_id).unwrap()[0].a_top;
    let replayed = a.next_dist(first.prefix(0))?;
    let z: f64 = stored.iter().map(|&(_, lp)| lp.exp()).sum();
    println!("\nposition 0 of {}, model A:", first.seq_id);
    for &(token, lp) in stored.iter().take(3) {
        println!(
            "  token {token}: stored logprob {lp:.4} -> replayed prob {:.6} (stored/Z {:.6})",
            replayed.prob(token),
            lp.exp() / z
        );
    }

    // Off the recorded path, replay refuses rather than guessing.
    let wrong = [TokenId(9); 2];
    let err = b
        .next_dist(tokshift::policy::Prefix::new(&first.seq_id, &wrong))
        .unwrap_err();
    println!("\noff-trajectory query: {err}");

    // Shift analysis runs on replayed policies exactly as on live ones;
    // entropies here are truncated-support entropies (top-k renormalized).
    let shift_records = analyze_pairs(&a, &b, &trajectories, &TruncationSpec::top_p(0.9))?;
    let divergent = shift_records.iter().filter(|r| r.js > 0.1).count();
    println!(
        "\nanalysis over the dump: {} positions, {} with JS > 0.1",
        shift_records.len(),
        divergent
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
