//! Pretrains the domain-adaptive image encoder on a desk corpus and reports
//! how often an image's nearest tag is one it depicts, before and after.
//!
//! `cargo run --release --example pretrain_die -- [seed] [epochs]`

use std::time::Instant;

use m3pt::data::Split;
use m3pt::datagen::{generate, CorpusSpec};
use m3pt::die::{pretrain_die, pretrain_items, retrieval_recall_at_1, DieModel, DieOptions};
use m3pt::model::ModelShape;
use m3pt::ModelConfig;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dataset = generate(&CorpusSpec::desk().with_seed(seed))?;
    let mut cfg = ModelConfig::desk().with_seed(seed);
    if let Some(epochs) = args.next() {
        cfg.die_epochs = epochs.parse()?;
    }
    let probe: Vec<_> = {
        let mut held_out = dataset.clone();
        held_out.pretrain.retain(|p| {
            let i = dataset.pois.iter().position(|q| q.poi_id == p.poi_id).expect("known POI");
            dataset.splits[i] == Split::Test
        });
        for s in held_out.splits.iter_mut() {
            *s = if *s == Split::Test { Split::Train } else { Split::Val };
        }
        pretrain_items(&held_out)
    };
    let untrained = DieModel::new(cfg.clone(), ModelShape::of(&dataset))?;
    println!(
        "test-image recall@1 before: {:.3}",
        retrieval_recall_at_1(&untrained, &dataset, &probe)?
    );
    let start = Instant::now();
    let (die, steps) = pretrain_die(&dataset, &cfg, &DieOptions::default())?;
    let window = |s: &[m3pt::die::DieStep]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    let w = steps.len().min(10);
    println!(
        "{} steps in {:.1}s, L_DIE {:.3} -> {:.3}",
        steps.len(),
        start.elapsed().as_secs_f64(),
        window(&steps[..w]),
        window(&steps[steps.len() - w..])
    );
    println!("test-image recall@1 after: {:.3}", retrieval_recall_at_1(&die, &dataset, &probe)?);
    Ok(())
}
