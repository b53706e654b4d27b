//! Generates a corpus, trains the base policy and reports greedy solve rates
//! on held-out tasks.
//!
//! cargo run --release --example pretrain_base -- [n_examples] [epochs] [out.bin]

use std::path::PathBuf;
use std::time::Instant;

use evolve::dsl::{evaluate_text, gen_task};
use evolve::policy::{greedy_decode, snapshot::save_weights, ReasoningState, DEFAULT_MAX_NEW_TOKENS};
use evolve::pretrain::{gen_corpus, pretrain, CorpusConfig, PretrainConfig};

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = args.get(3).map(PathBuf::from);
    let lr = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let t = Instant::now();
    let corpus = gen_corpus(&CorpusConfig { n, ..Default::default() })?;
    let tokens: usize = corpus.iter().map(|e| e.tokens.len()).sum();
    println!("corpus: {n} examples, {tokens} tokens ({:.1}s)", t.elapsed().as_secs_f64());

    let cfg = PretrainConfig { epochs, lr, ..Default::default() };
    let t = Instant::now();
    let (model, curve) = pretrain(&corpus, &cfg, |p| {
        if p.step % 20 == 0 {
            println!("step {:5} loss {:.4} ({:.0}s)", p.step, p.loss, t.elapsed().as_secs_f64());
        }
    })?;
    println!("final loss {:.4} ({:.1}s)", curve.last().unwrap().loss, t.elapsed().as_secs_f64());

    let mut rates = serde_json::Map::new();
    for d in 1..=4u8 {
        let mut solved = 0;
        for seed in 0..100u64 {
            let task = gen_task(seed, d)?;
            let th = greedy_decode(&model, &ReasoningState::new(task.clone()), None, DEFAULT_MAX_NEW_TOKENS)?;
            if evaluate_text(&th.text, &task).solved() {
                solved += 1;
            }
        }
        println!("difficulty {d}: greedy solves {solved}/100");
        rates.insert(format!("greedy_d{d}"), solved.into());
    }
    if let Some(path) = out {
        let meta = serde_json::json!({
            "corpus_n": n, "epochs": epochs, "lr": lr, "seed": cfg.seed,
            "final_loss": curve.last().unwrap().loss, "heldout": rates,
        });
        let sum = save_weights(&model, &path, meta)?;
        println!("saved {} ({sum})", path.display());
    }
    Ok(())
}
