//! Trains the three variants on a synthetic two-archetype corpus and prints
//! their MRR under online adaptation.
//!
//! `cargo run --release -p qac-core --example synthetic_demo`

use std::time::Instant;

use qac_core::complete::BeamConfig;
use qac_core::eval::{evaluate_model, EvalConfig, EvalContext};
use qac_core::model::{ModelConfig, Variant};
use qac_core::synthetic::{generate, SyntheticConfig};
use qac_core::train::{train_with_progress, tune_online_lr, AdadeltaConfig, TrainConfig};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SyntheticConfig {
        seed: env("SEED", 0),
        ..Default::default()
    })?;
    let train_cfg = TrainConfig {
        epochs: env("EPOCHS", 6),
        adam_lr: env("ADAM_LR", 1e-2),
        batch_size: env("BATCH", 16),
        seed: env("SEED", 0),
        ..Default::default()
    };
    let ctx = EvalContext::new(&corpus.split.train);
    for variant in [Variant::Unadapted, Variant::Concat, Variant::Factor] {
        let start = Instant::now();
        let model_cfg = ModelConfig {
            variant,
            embed_dim: env("EMBED", 16),
            hidden_dim: 64,
            user_dim: 8,
            rank: 4,
            ..Default::default()
        };
        let model = train_with_progress(&train_cfg, &model_cfg, &corpus.split, |m| {
            println!(
                "  {variant:?} epoch {} nll {:.4} valid ppl {:?}",
                m.epoch, m.train_nll, m.valid_perplexity
            );
        })?;
        let tuned = tune_online_lr(
            &model.params,
            &model.users,
            &model.vocab,
            &[0.0, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0],
            &corpus.split.valid,
            AdadeltaConfig::default(),
        )?;
        let cfg = EvalConfig {
            beam: BeamConfig {
                max_completion_chars: 30,
                ..Default::default()
            },
            online: AdadeltaConfig {
                lr: tuned.best_lr,
                ..Default::default()
            },
            ..Default::default()
        };
        let (result, _) = evaluate_model(
            &ctx,
            &model.params,
            &model.users,
            &model.vocab,
            &corpus.split.test,
            &cfg,
        )?;
        println!(
            "{variant:?}: lr {} tune {:?}\n   {result:?} ({:.1}s)",
            tuned.best_lr,
            tuned.perplexities,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
