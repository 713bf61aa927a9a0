//! Generates a desk corpus, pretrains the image encoder, fine-tunes the model and reports test metrics
//! for each input variant.
//!
//! `cargo run --release --example train_and_evaluate -- [seed] [epochs]`

use std::time::Instant;

use m3pt::data::Split;
use m3pt::datagen::{generate, CorpusSpec};
use m3pt::eval::evaluate_split;
use m3pt::die::{pretrain_die, DieOptions};
use m3pt::training::{train, TrainOptions};
use m3pt::{ModelConfig, Variant};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dataset = generate(&CorpusSpec::desk().with_seed(seed))?;
    let mut cfg = ModelConfig::desk().with_seed(seed);
    if let Some(epochs) = args.next() {
        cfg.epochs = epochs.parse()?;
    }
    let (die, _) = pretrain_die(&dataset, &cfg, &DieOptions::default())?;
    let opts = TrainOptions {
        die: Some(&die),
        ..TrainOptions::default()
    };
    for variant in [Variant::Full, Variant::TextOnly, Variant::ImageOnly] {
        let start = Instant::now();
        let (model, state) = train(&dataset, &cfg.clone().with_variant(variant), &opts)?;
        let report = evaluate_split(&model, &dataset, Split::Test, cfg.pi)?;
        println!(
            "{variant:?}: best epoch {} (val F1-e {:.4}), test F1-e {:.4}, mAP {:.4}, {:.1}s",
            state.best_epoch,
            state.best_val_f1e(),
            report.f1_e,
            report.map,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
