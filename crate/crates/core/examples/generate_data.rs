//! Generates the desk corpus and the two full-size corpus shapes, saves one
//! to disk, reloads it and prints the statistics each run produced.
//!
//! `cargo run --release --example generate_data -- [out_dir]`

use m3pt::data::{corpus_stats, Dataset, Split};
use m3pt::datagen::{generate, generate_corpus, CorpusSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let tmp = tempfile::tempdir()?;
    let dir = out.as_deref().unwrap_or(tmp.path());

    let written = generate_corpus(&CorpusSpec::desk(), dir)?;
    let loaded = Dataset::load(dir)?;
    assert_eq!(written.pois, loaded.pois);
    println!("desk corpus in {}", dir.display());
    println!("  {}", corpus_stats(&loaded.pois, loaded.tags.len()));
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split:?}: {} POIs", loaded.indices(split).len());
    }
    println!("  pretraining pairs: {}", loaded.pretrain.len());

    let poi = &loaded.pois[0];
    println!("\nfirst POI {} ({}), gold tags:", poi.poi_id, poi.category);
    for &t in &poi.gold_tags {
        println!("  {}", loaded.tags.tag(t).unwrap_or("?"));
    }
    for text in poi.texts().take(3) {
        println!("  text: {text}");
    }

    for (name, spec) in [("mptd2", CorpusSpec::mptd2()), ("mptd1", CorpusSpec::mptd1())] {
        let ds = generate(&spec)?;
        println!("\n{name}: {}", corpus_stats(&ds.pois, ds.tags.len()));
    }
    Ok(())
}
