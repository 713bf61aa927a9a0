//! Trains a desk model, tags a few test POIs and scores a tag phrase that is
//! not in the vocabulary, which works because tags go through the same
//! encoder as texts.
//!
//! `cargo run --release --example tagging -- [epochs]`

use m3pt::data::Split;
use m3pt::datagen::{generate, CorpusSpec};
use m3pt::matcher::rank_topk;
use m3pt::training::{train, TrainOptions};
use m3pt::ModelConfig;

fn main() -> anyhow::Result<()> {
    let dataset = generate(&CorpusSpec::desk())?;
    let mut cfg = ModelConfig::desk();
    if let Some(epochs) = std::env::args().nth(1) {
        cfg.epochs = epochs.parse()?;
    }
    let (model, _) = train(&dataset, &cfg, &TrainOptions::default())?;
    let tag_matrix = model.tag_matrix(&dataset.tags)?;
    let name = |t: usize| dataset.tags.tag(t).unwrap_or("?");

    for &i in dataset.indices(Split::Test).iter().take(3) {
        let poi = &dataset.pois[i];
        let encoded = model.encode_poi(&dataset, i)?;
        let ranked = model.predict_tags(&encoded, &tag_matrix, cfg.pi)?;
        let gold: Vec<&str> = poi.gold_tags.iter().map(|&t| name(t)).collect();
        println!("{} gold {gold:?}", poi.poi_id);
        for p in rank_topk(&ranked, 5)? {
            let mark = if p.accepted { "+" } else { " " };
            println!("  {mark} {:.3} {}", p.score, name(p.tag));
        }

        // An unseen phrase made of the first gold tag's words plus a filler.
        let phrase = format!("{} spot", name(poi.gold_tags[0]));
        let tokens = dataset.tokens.encode(&phrase, cfg.max_seq_len);
        let tag = model.text.encode_text(&model.store, &tokens)?;
        let content = model.content_embedding(&encoded)?;
        let score = model.matcher.match_poi_tag(&model.store, &content, &tag)?;
        println!("  open-set \"{phrase}\": {score:.3}");
    }
    Ok(())
}
