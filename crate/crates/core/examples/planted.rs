//! Runs detection on planted Hawkes scenarios and prints AP for the full EM,
//! a single E-step, and k-means on the pretrained embeddings.
//!
//! Usage: `cargo run --release --example planted -- [seeds] [strength] [loops]`

use std::time::Instant;

use coordet::em_engine::LoopSetting;
use coordet::hawkes_synth::make_planted_scenario;
use coordet::pipeline::{
    build_graph, detect, evaluate_scores, kmeans_baseline, prepare, pretrain, reveal_labels, RunConfig,
};

fn main() -> coordet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let strength: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let loops: Option<LoopSetting> = args.get(3).and_then(|s| s.parse().ok());
    let (mut full, mut only_e, mut base) = (0.0, 0.0, 0.0);
    let (mut semi, mut unsup_rest) = (0.0, 0.0);
    for seed in 0..seeds {
        let start = Instant::now();
        let (_, data) = make_planted_scenario(80, 20, strength, seed)?;
        let mut cfg = RunConfig::compact().with_seed(seed);
        if let Some(l) = loops {
            cfg.em.loops = l;
        }
        let truth = data.labels.clone().expect("planted labels");
        let prep = prepare(&data, &cfg)?;
        let (params, report) = pretrain(&data, &prep, &cfg)?;
        let graph = build_graph(&data, cfg.filter)?;
        let vig = detect(&prep, &graph, &params, &cfg, None)?;
        let mut ecfg = cfg.clone();
        ecfg.em.estep_only = true;
        let vig_e = detect(&prep, &graph, &params, &ecfg, None)?;
        let km = kmeans_baseline(&params, &cfg, None)?;
        let revealed = reveal_labels(&truth, 0.1, seed)?;
        let semi_run = detect(&prep, &graph, &params, &cfg, Some(&revealed))?;
        let rest = |s: &[f64]| evaluate_scores(s, &truth, Some(&revealed), 0.5).map(|m| m.ap);
        let (d, e) = (rest(&semi_run.result.scores)?, rest(&vig.result.scores)?);
        semi += d;
        unsup_rest += e;
        let ap = |s: &[f64]| evaluate_scores(s, &truth, None, 0.5).map(|m| m.ap);
        let (a, b, c) = (ap(&vig.result.scores)?, ap(&vig_e.result.scores)?, ap(&km.scores)?);
        println!(
            "seed {seed}: full {a:.3} ({} loops) estep {b:.3} kmeans {c:.3} semi {d:.3} vs {e:.3}  (pretrain epochs {}, {:.1}s)",
            vig.chosen_loops,
            report.history.len(),
            start.elapsed().as_secs_f64()
        );
        full += a;
        only_e += b;
        base += c;
    }
    let n = seeds as f64;
    println!(
        "mean: full {:.3} estep {:.3} kmeans {:.3} semi {:.3} vs {:.3}",
        full / n,
        only_e / n,
        base / n,
        semi / n,
        unsup_rest / n
    );
    Ok(())
}
