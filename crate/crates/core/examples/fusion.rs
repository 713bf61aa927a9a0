//! Walks one POI through text-image fusion with a freshly initialised desk
//! model: per-embedding cluster proximities, the pooled descriptor block,
//! and the content embedding each variant produces.
//!
//! `cargo run --release --example fusion`

use m3pt::autograd::Graph;
use m3pt::datagen::{generate, CorpusSpec};
use m3pt::model::{M3pt, ModelShape};
use m3pt::{ModelConfig, Variant};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> anyhow::Result<()> {
    let dataset = generate(&CorpusSpec::desk())?;
    let mut model = M3pt::new(ModelConfig::desk(), ModelShape::of(&dataset))?;
    let poi = model.encode_poi(&dataset, 0)?;
    println!("POI 0: {} texts, {} images", poi.texts.len(), poi.images.len());

    let bank = model.fusion.text.bank();
    for (i, tokens) in poi.texts.iter().take(3).enumerate() {
        let emb = model.text.encode_text(&model.store, tokens)?;
        let alpha = bank.cluster_assign(&model.store, &emb)?;
        let pretty: Vec<String> = alpha.iter().map(|a| format!("{a:.3}")).collect();
        println!("text {i}: cluster proximities [{}]", pretty.join(", "));
    }

    let mut g = Graph::new(&model.store);
    let embs = poi
        .texts
        .iter()
        .map(|t| model.text.forward(&mut g, t))
        .collect::<Result<Vec<_>, _>>()?;
    let pooled = model.fusion.text.pool(&mut g, &embs)?;
    let (d, k) = g.shape(pooled);
    println!("pooled text descriptors: {d}x{k}");

    for variant in [Variant::Full, Variant::TextOnly, Variant::ImageOnly] {
        model.config.variant = variant;
        let c = model.content_embedding(&poi)?;
        println!("{variant:>5}: |c| = {:.4}, dim {}", norm(&c), c.len());
    }
    Ok(())
}
