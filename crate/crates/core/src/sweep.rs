//! Hyperparameter sweeps producing one metric row per grid point.
//!
//! A `tau1` sweep retrains the model for every value. A `pi` sweep trains
//! once and only re-thresholds the same scores, since the threshold is an
//! inference-time setting.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{report_from_scores, score_split};
use crate::metrics::EvalReport;
use crate::model::M3pt;
use crate::training::{train, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Tau1,
    Pi,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau1" => Ok(Self::Tau1),
            "pi" => Ok(Self::Pi),
            other => Err(Error::UnknownParam(other.to_string())),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tau1 => "tau1",
            Self::Pi => "pi",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
}

const COLUMNS: [&str; 8] = ["f1_e", "p_e", "r_e", "macro_f1", "map", "hamming", "one_error", "ranking_loss"];

impl SweepTable {
    pub fn f1e_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.report.f1_e).collect()
    }

    /// Grid value with the highest F1-e; the first one on ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.report.f1_e >= r.report.f1_e => Some(b),
                _ => Some(r),
            })
    }

    /// True when the F1-e maximum lies strictly inside the grid and
    /// strictly exceeds both endpoint values.
    pub fn has_interior_maximum(&self) -> bool {
        let curve = self.f1e_curve();
        let n = curve.len();
        if n < 3 {
            return false;
        }
        let peak = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let inside = curve[1..n - 1].iter().any(|&v| v == peak);
        inside && peak > curve[0] && peak > curve[n - 1]
    }

    /// Tab-separated table with a header line; one row per grid point in
    /// grid order.
    pub fn write_tsv<W: Write>(&self, out: &mut W) -> Result<()> {
        let io = |e| Error::io("<sweep table>", e);
        writeln!(out, "{}\t{}", self.parameter, COLUMNS.join("\t")).map_err(io)?;
        for r in &self.rows {
            let m = &r.report;
            let vals = [m.f1_e, m.p_e, m.r_e, m.macro_f1, m.map, m.hamming, m.one_error, m.ranking_loss];
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{}\t{}", r.value, cells.join("\t")).map_err(io)?;
        }
        Ok(())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if let Some(v) = grid.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("grid value {v} is not finite")));
    }
    Ok(())
}

/// Re-thresholds one model's test scores at every `π` in `grid`.
pub fn pi_sweep(model: &M3pt, dataset: &Dataset, grid: &[f64]) -> Result<SweepTable> {
    check_grid(grid)?;
    let (indices, scores) = score_split(model, dataset, Split::Test)?;
    let rows = grid
        .iter()
        .map(|&pi| {
            if !(0.0..=1.0).contains(&pi) {
                return Err(Error::InvalidArgument(format!("pi {pi} outside [0,1]")));
            }
            Ok(SweepRow {
                value: pi,
                report: report_from_scores(dataset, &indices, &scores, pi)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        parameter: SweepParam::Pi,
        rows,
    })
}

/// Trains one model per `τ₁` in `grid` and evaluates each on the test split
/// at the base threshold.
pub fn tau1_sweep(dataset: &Dataset, base: &ModelConfig, grid: &[f64], opts: &TrainOptions) -> Result<SweepTable> {
    check_grid(grid)?;
    let rows = grid
        .iter()
        .map(|&tau1| {
            let cfg = ModelConfig { tau1, ..base.clone() };
            let (model, _) = train(dataset, &cfg, opts)?;
            let (indices, scores) = score_split(&model, dataset, Split::Test)?;
            Ok(SweepRow {
                value: tau1,
                report: report_from_scores(dataset, &indices, &scores, cfg.pi)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        parameter: SweepParam::Tau1,
        rows,
    })
}

/// Runs either sweep from scratch; the `π` sweep trains its single model
/// with `base`.
pub fn run_sweep(
    parameter: SweepParam,
    grid: &[f64],
    dataset: &Dataset,
    base: &ModelConfig,
    opts: &TrainOptions,
) -> Result<SweepTable> {
    match parameter {
        SweepParam::Tau1 => tau1_sweep(dataset, base, grid, opts),
        SweepParam::Pi => {
            check_grid(grid)?;
            let (model, _) = train(dataset, base, opts)?;
            pi_sweep(&model, dataset, grid)
        }
    }
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_pi_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

pub fn default_tau1_grid() -> Vec<f64> {
    vec![0.04, 0.08, 0.12, 0.16, 0.20]
}
