//! Suppression calibration over seeded toy corpora. For each seed prints the
//! instruction-only ungrounded rate, then for each eta the dual-stream rate,
//! the number of scenes where dual-stream did worse than instruction-only,
//! and the mean gate.
//!
//!     cargo run --release -p iecd2-core --example calibrate [n_seeds]

use iecd2_core::backends::{generate_corpus, StreamRole, ToyBackend, ToyCorpusSpec, ToyScene};
use iecd2_core::decoder::{decode, decode_single_stream, DecoderConfig, PromptPair};

fn rate(scene: &ToyScene, tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().filter(|t| !scene.is_grounded(**t)).count() as f64 / tokens.len() as f64
}

fn main() -> iecd2_core::Result<()> {
    let n_seeds: u64 = std::env::args().nth(1).map_or(10, |s| s.parse().expect("seed count"));
    let prompts = PromptPair::from_registry("caption", None)?;
    println!("seed | instruction-only | eta | dual | scenes worse | mean g");
    for seed in 0..n_seeds {
        let scenes = generate_corpus(&ToyCorpusSpec { seed, ..Default::default() })?;
        let backend = ToyBackend::new(scenes.clone())?;
        let mut config = DecoderConfig::default();
        config.stop_tokens.insert(0);
        let single: Vec<f64> = scenes
            .iter()
            .map(|s| {
                let (t, _) = decode_single_stream(
                    &backend,
                    StreamRole::Instruction,
                    &prompts.instruction_prompt,
                    &s.scene_id,
                    &config,
                )?;
                Ok(rate(s, &t))
            })
            .collect::<iecd2_core::Result<_>>()?;
        let single_mean = single.iter().sum::<f64>() / scenes.len() as f64;
        for eta in [-2.0, -3.0, -5.0] {
            config.eta = eta;
            let (mut total, mut worse, mut gates) = (0.0, 0, 0.0);
            for (s, r) in scenes.iter().zip(&single) {
                let (t, trace) = decode(&backend, &prompts, &s.scene_id, &config)?;
                let d = rate(s, &t);
                total += d;
                worse += usize::from(d > *r);
                gates += trace.mean_gate();
            }
            let n = scenes.len() as f64;
            println!(
                "{seed} | {single_mean:.4} | {eta} | {:.4} | {worse} | {:.3}",
                total / n,
                gates / n
            );
        }
    }
    Ok(())
}
