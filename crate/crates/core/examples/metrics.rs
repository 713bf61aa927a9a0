//! Computes every evaluation metric for a handful of hand-written
//! predictions, showing how thresholded and ranked outputs feed them.
//!
//! `cargo run --example metrics`

use m3pt::matcher::rank_predictions;
use m3pt::metrics::{EvalInstance, EvalReport};

fn main() -> anyhow::Result<()> {
    let tags = ["beach", "museum", "night market", "hiking", "family"];
    // Gold tag ids and match scores for three POIs.
    let pois: [(&[usize], [f64; 5]); 3] = [
        (&[0, 4], [0.92, 0.10, 0.05, 0.40, 0.61]),
        (&[1], [0.20, 0.55, 0.58, 0.05, 0.30]),
        (&[2, 3], [0.05, 0.15, 0.81, 0.45, 0.22]),
    ];
    let pi = 0.5;
    let mut instances = Vec::new();
    for (gold, scores) in &pois {
        let ranked = rank_predictions(scores, pi)?;
        let mut accepted: Vec<usize> = ranked.iter().filter(|p| p.accepted).map(|p| p.tag).collect();
        accepted.sort_unstable();
        let names: Vec<&str> = accepted.iter().map(|&t| tags[t]).collect();
        let gold_names: Vec<&str> = gold.iter().map(|&t| tags[t]).collect();
        println!("gold {gold_names:?} accepted {names:?}");
        instances.push(EvalInstance {
            gold: gold.to_vec(),
            accepted,
            ranking: ranked.iter().map(|p| p.tag).collect(),
        });
    }
    let report = EvalReport::compute(&instances, tags.len())?;
    println!("\n{report}");
    for r in report.records() {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}
