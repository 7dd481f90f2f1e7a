// Scratch harness for sizing the synthetic-learning experiments.
// Usage: tune <mode> [lr] [epochs] [seed]

use std::time::Instant;

use poet::dataio::{self, HighlightMode, SynthConfig};
use poet::decoder::DecodeMode;
use poet::encoder::Variant;
use poet::metrics;
use poet::training::{self, TrainConfig};

const WORDS: &[&str] = &[
    "beige", "black", "blue", "brown", "coral", "cotton", "cream", "denim", "floral", "green",
    "grey", "indigo", "ivory", "khaki", "lace", "linen", "magenta", "maroon", "mint", "navy",
    "olive", "orange", "peach", "pink", "plum", "purple", "red", "rose", "silk", "silver",
];

fn synth_cfg(alphabet_n: usize, sig: f64) -> SynthConfig {
    SynthConfig {
        n_f: 4,
        n_p: 3,
        d_f: 16,
        d_p: 8,
        part_names: vec!["hem".into(), "collar".into(), "sleeve".into()],
        aspect_alphabet: WORDS[..alphabet_n].iter().map(|s| s.to_string()).collect(),
        signature_scale: sig,
        ..SynthConfig::default()
    }
}

fn train_cfg(lr: f64, epochs: usize, seed: u64, variant: Variant) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        seed,
        variant,
        batch_size: 8,
        d_pf: 24,
        d_a: 12,
        d_w: 16,
        ..TrainConfig::default()
    }
}

fn score(
    out: &training::TrainOutput,
    variant: Variant,
    samples: &[dataio::VideoSample],
) -> (f64, f64) {
    let corpus = training::generate_corpus(
        &out.params,
        &out.cfg,
        variant,
        &out.vocab,
        samples,
        DecodeMode::Greedy,
        30,
    )
    .unwrap();
    let r = metrics::evaluate(&corpus);
    (r.bleu1, r.aspect_capture)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("c3");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let alphabet_n: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(12);
    let sig: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    match mode {
        "c3" => {
            let cfg = synth_cfg(alphabet_n, sig);
            let pool = dataio::synth_generate(42, 250, &cfg).unwrap();
            let (train_set, test_set) = pool.split_at(200);
            let t0 = Instant::now();
            let tc = train_cfg(lr, epochs, seed, Variant::Poet);
            let out = training::train(train_set, &[], &tc, None).unwrap();
            let train_time = t0.elapsed();
            let (train_bleu, train_cap) = score(&out, Variant::Poet, train_set);
            let (test_bleu, test_cap) = score(&out, Variant::Poet, test_set);
            println!(
                "c3 lr={lr} epochs={epochs} seed={seed}: train bleu {train_bleu:.4} cap {train_cap:.4} | test bleu {test_bleu:.4} cap {test_cap:.4} | {train_time:?} | loss {:.4} -> {:.4}",
                out.curve[0],
                out.curve.last().unwrap()
            );
        }
        "c4" => {
            let cfg = synth_cfg(alphabet_n, sig);
            let pool = dataio::synth_generate(42, 250, &cfg).unwrap();
            let (train_set, test_set) = pool.split_at(200);
            for s in [seed, seed + 1, seed + 2] {
                let t0 = Instant::now();
                let poet = training::train(train_set, &[], &train_cfg(lr, epochs, s, Variant::Poet), None)
                    .unwrap();
                let nokl = training::train(
                    train_set,
                    &[],
                    &train_cfg(lr, epochs, s, Variant::PoetMinusKl),
                    None,
                )
                .unwrap();
                let (pb, pc) = score(&poet, Variant::Poet, test_set);
                let (nb, nc) = score(&nokl, Variant::PoetMinusKl, test_set);
                println!(
                    "c4 seed {s}: poet bleu {pb:.4} cap {pc:.4} | -KL bleu {nb:.4} cap {nc:.4} | gap {:.4} | {:?}",
                    pc - nc,
                    t0.elapsed()
                );
            }
        }
        "c5" => {
            let cfg = SynthConfig {
                highlight_mode: HighlightMode::Spike,
                relevant_prob: 0.0,
                spike_mean: 6.0,
                ..synth_cfg(alphabet_n, sig)
            };
            let pool = dataio::synth_generate(77, 150, &cfg).unwrap();
            let (train_set, test_set) = pool.split_at(120);
            for s in [seed, seed + 1, seed + 2] {
                let t0 = Instant::now();
                let sti = training::train(
                    train_set,
                    &[],
                    &train_cfg(lr, epochs, s, Variant::PoetMinusKl),
                    None,
                )
                .unwrap();
                let gcn = training::train(
                    train_set,
                    &[],
                    &train_cfg(lr, epochs, s, Variant::GcnMinusKl),
                    None,
                )
                .unwrap();
                let (sb, _) = score(&sti, Variant::PoetMinusKl, test_set);
                let (gb, _) = score(&gcn, Variant::GcnMinusKl, test_set);
                println!(
                    "c5 seed {s}: sti bleu {sb:.4} | gcn bleu {gb:.4} | sti>=gcn {} | {:?}",
                    sb >= gb,
                    t0.elapsed()
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
