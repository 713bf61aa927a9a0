use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use m3pt::checkpoint::load_checkpoint;
use m3pt::data::{corpus_stats, Dataset, Split};
use m3pt::datagen::{generate_corpus, CorpusSpec};
use m3pt::die::{pretrain_die, DieModel, DieOptions};
use m3pt::eval::{evaluate_split, run_eval, tag_records, write_tags};
use m3pt::sweep::{default_pi_grid, default_tau1_grid, run_sweep, SweepParam};
use m3pt::training::{train, TrainOptions};
use m3pt::{ModelConfig, Variant};

#[derive(Parser)]
#[command(name = "m3pt", version, about = "Multi-modal POI tagging at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// TOML model config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Dataset directory to read.
    #[arg(long, global = true, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    /// Output directory (or file, for `tag` and `sweep`).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "D")]
    dim: Option<usize>,
    #[arg(long, global = true, value_name = "K")]
    clusters: Option<usize>,
    #[arg(long, global = true, value_name = "H")]
    hidden: Option<usize>,
    #[arg(long, global = true, value_name = "X")]
    tau1: Option<f64>,
    #[arg(long, global = true, value_name = "X")]
    tau2: Option<f64>,
    #[arg(long, global = true, value_name = "X")]
    pi: Option<f64>,
    #[arg(long, global = true, value_name = "X")]
    alpha: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, global = true, value_name = "X")]
    lr_start: Option<f64>,
    #[arg(long, global = true, value_name = "X")]
    lr_end: Option<f64>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Corpus shape for `gen-data`.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Text,
    Image,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::Text => Variant::TextOnly,
            VariantArg::Image => Variant::ImageOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Mptd1,
    Mptd2,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into --out.
    GenData,
    /// Pretrain the image encoder on --data-dir; checkpoint into --out.
    PretrainDie,
    /// Train on --data-dir; best checkpoint and log into --out.
    Train {
        /// Pretrained image-encoder checkpoint to start from.
        #[arg(long, value_name = "PATH")]
        die: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of --data-dir.
    Eval {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Score every tag for every test POI as JSON lines.
    Tag {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Sweep tau1 (retraining per point) or pi (one model) and print a table.
    Sweep {
        #[arg(long, value_parser = ["tau1", "pi"])]
        param: String,
        /// Comma-separated grid; defaults to 0.1..0.9 for pi and
        /// 0.04..0.20 for tau1.
        #[arg(long, value_delimiter = ',', value_name = "X,X,...")]
        grid: Vec<f64>,
        #[arg(long, value_name = "PATH")]
        die: Option<PathBuf>,
    },
}

impl Flags {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let base = toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", path.display()))?;
                let mut merged = toml::Table::try_from(ModelConfig::desk())?;
                merged.extend(base);
                ModelConfig::from_toml_str(&toml::to_string(&merged)?)?
            }
            None => ModelConfig::desk(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v.into(); })*};
        }
        set!(seed, dim, clusters, hidden, tau1, tau2, pi, alpha, epochs, lr_start, lr_end, variant);
        Ok(cfg.validate()?)
    }

    fn corpus_spec(&self) -> CorpusSpec {
        let spec = match self.profile {
            Profile::Mptd1 => CorpusSpec::mptd1(),
            Profile::Mptd2 => CorpusSpec::mptd2(),
            Profile::Desk => CorpusSpec::desk(),
        };
        spec.with_seed(self.seed.unwrap_or(0))
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().context("--data-dir is required")
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir()?;
        Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
    }
}

fn load_die(path: Option<&Path>) -> Result<Option<DieModel>> {
    path.map(|p| DieModel::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let f = &cli.flags;
    match &cli.command {
        Command::GenData => {
            let out = f.out_dir()?;
            let ds = generate_corpus(&f.corpus_spec(), out)?;
            println!("{}", corpus_stats(&ds.pois, ds.tags.len()));
        }
        Command::PretrainDie => {
            let (cfg, ds, out) = (f.model_config()?, f.dataset()?, f.out_dir()?);
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let log = out.join("die_log.txt");
            let (die, steps) = pretrain_die(&ds, &cfg, &DieOptions { log_path: Some(&log) })?;
            die.save(out, steps.len() as u64)?;
            if let Some(last) = steps.last() {
                println!("{}", last.log_line());
            }
        }
        Command::Train { die } => {
            let (cfg, ds, out) = (f.model_config()?, f.dataset()?, f.out_dir()?);
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let die = load_die(die.as_deref())?;
            let log = out.join("train_log.txt");
            let opts = TrainOptions {
                die: die.as_ref(),
                log_path: Some(&log),
                checkpoint_dir: Some(out),
            };
            let (model, state) = train(&ds, &cfg, &opts)?;
            let report = evaluate_split(&model, &ds, Split::Test, cfg.pi)?;
            println!("best epoch {} (val F1-e {:.4})", state.best_epoch, state.best_val_f1e());
            print!("{report}");
        }
        Command::Eval { model } => {
            let variant = f.variant.map(Variant::from);
            let report = run_eval(model, f.data_dir()?, variant, f.pi, f.out.as_deref())?;
            print!("{report}");
        }
        Command::Tag { model } => {
            let ds = f.dataset()?;
            let (m, _) = load_checkpoint(model)?;
            let records = tag_records(&m, &ds, Split::Test, f.pi.unwrap_or(m.config.pi))?;
            let mut out = output(f.out.as_deref())?;
            write_tags(&mut out, &records)?;
            out.flush()?;
        }
        Command::Sweep { param, grid, die } => {
            let parameter: SweepParam = param.parse()?;
            let grid = match (grid.is_empty(), parameter) {
                (false, _) => grid.clone(),
                (true, SweepParam::Pi) => default_pi_grid(),
                (true, SweepParam::Tau1) => default_tau1_grid(),
            };
            if grid.is_empty() {
                bail!("empty grid");
            }
            let (cfg, ds) = (f.model_config()?, f.dataset()?);
            let die = load_die(die.as_deref())?;
            let opts = TrainOptions {
                die: die.as_ref(),
                ..TrainOptions::default()
            };
            let table = run_sweep(parameter, &grid, &ds, &cfg, &opts)?;
            let mut out = output(f.out.as_deref())?;
            table.write_tsv(&mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}
