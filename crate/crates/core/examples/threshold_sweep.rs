//! Trains once and sweeps the acceptance threshold over 0.1..0.9, printing
//! the plot-ready table. Pass `tau1` to retrain per temperature instead.
//!
//! `cargo run --release --example threshold_sweep -- [pi|tau1] [epochs]`

use m3pt::datagen::{generate, CorpusSpec};
use m3pt::sweep::{default_pi_grid, default_tau1_grid, run_sweep, SweepParam};
use m3pt::training::TrainOptions;
use m3pt::ModelConfig;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let parameter: SweepParam = args.next().as_deref().unwrap_or("pi").parse()?;
    let mut cfg = ModelConfig::desk();
    if let Some(epochs) = args.next() {
        cfg.epochs = epochs.parse()?;
    }
    let grid = match parameter {
        SweepParam::Pi => default_pi_grid(),
        SweepParam::Tau1 => default_tau1_grid(),
    };
    let dataset = generate(&CorpusSpec::desk())?;
    let table = run_sweep(parameter, &grid, &dataset, &cfg, &TrainOptions::default())?;
    table.write_tsv(&mut std::io::stdout().lock())?;
    if let Some(best) = table.best() {
        println!("best {parameter} = {} (F1-e {:.4})", best.value, best.report.f1_e);
    }
    if parameter == SweepParam::Pi {
        println!("interior maximum: {}", table.has_interior_maximum());
    }
    Ok(())
}
