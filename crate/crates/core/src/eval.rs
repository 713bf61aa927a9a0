//! Scoring a dataset split with a trained model and writing the `eval` and
//! `tag` outputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::load_checkpoint;
use crate::config::Variant;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::matcher::{rank_predictions, write_tag_records, TagRecord};
use crate::metrics::{EvalInstance, EvalReport};
use crate::model::{EncodedPoi, M3pt};
use crate::params::Tensor;

/// Match scores of every tag (index = tag id) for each encoded POI.
pub fn score_encoded(model: &M3pt, pois: &[EncodedPoi], tag_matrix: &Tensor) -> Result<Vec<Vec<f64>>> {
    pois.iter().map(|p| model.score_tags(p, tag_matrix)).collect()
}

pub fn encode_split(model: &M3pt, dataset: &Dataset, indices: &[usize]) -> Result<Vec<EncodedPoi>> {
    indices.iter().map(|&i| model.encode_poi(dataset, i)).collect()
}

/// Thresholds and ranks scores into metric inputs.
pub fn instances_from_scores(golds: &[&[usize]], scores: &[Vec<f64>], pi: f64) -> Result<Vec<EvalInstance>> {
    golds
        .iter()
        .zip(scores)
        .map(|(gold, s)| {
            let ranked = rank_predictions(s, pi)?;
            let mut accepted: Vec<usize> = ranked.iter().filter(|p| p.accepted).map(|p| p.tag).collect();
            accepted.sort_unstable();
            Ok(EvalInstance {
                gold: gold.to_vec(),
                accepted,
                ranking: ranked.iter().map(|p| p.tag).collect(),
            })
        })
        .collect()
}

/// Scores of every POI in `split`, in dataset order.
pub fn score_split(model: &M3pt, dataset: &Dataset, split: Split) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let indices = dataset.indices(split);
    let encoded = encode_split(model, dataset, &indices)?;
    let tag_matrix = model.tag_matrix(&dataset.tags)?;
    Ok((indices.clone(), score_encoded(model, &encoded, &tag_matrix)?))
}

/// Full report for `split` at threshold `pi`.
pub fn evaluate_split(model: &M3pt, dataset: &Dataset, split: Split, pi: f64) -> Result<EvalReport> {
    let (indices, scores) = score_split(model, dataset, split)?;
    report_from_scores(dataset, &indices, &scores, pi)
}

pub fn report_from_scores(dataset: &Dataset, indices: &[usize], scores: &[Vec<f64>], pi: f64) -> Result<EvalReport> {
    let golds: Vec<&[usize]> = indices.iter().map(|&i| dataset.pois[i].gold_tags.as_slice()).collect();
    EvalReport::compute(&instances_from_scores(&golds, scores, pi)?, dataset.tags.len())
}

/// Writes `report.txt` and `metrics.jsonl` into `out`.
pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let txt = out.join("report.txt");
    fs::write(&txt, report.to_string()).map_err(|e| Error::io(&txt, e))?;
    let jsonl = out.join("metrics.jsonl");
    let mut buf = Vec::new();
    for r in report.records() {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    fs::write(&jsonl, buf).map_err(|e| Error::io(&jsonl, e))
}

/// Loads a checkpoint and a dataset, evaluates the test split and writes
/// the report into `out` when given.
pub fn run_eval(
    model_dir: &Path,
    data_dir: &Path,
    variant: Option<Variant>,
    pi: Option<f64>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let (mut model, _) = load_checkpoint(model_dir)?;
    if let Some(v) = variant {
        model.config.variant = v;
    }
    let dataset = Dataset::load(data_dir)?;
    let pi = pi.unwrap_or(model.config.pi);
    let report = evaluate_split(&model, &dataset, Split::Test, pi)?;
    if let Some(out) = out {
        write_report(&report, out)?;
    }
    Ok(report)
}

/// Every tag of every POI in `split`, best first.
pub fn tag_records(model: &M3pt, dataset: &Dataset, split: Split, pi: f64) -> Result<Vec<TagRecord>> {
    let (indices, scores) = score_split(model, dataset, split)?;
    let mut out = Vec::with_capacity(indices.len() * dataset.tags.len());
    for (&i, s) in indices.iter().zip(&scores) {
        for p in rank_predictions(s, pi)? {
            out.push(TagRecord {
                poi_id: dataset.pois[i].poi_id.clone(),
                tag: dataset.tags.tag(p.tag).expect("ranked tag in vocab").to_string(),
                score: p.score,
                accepted: p.accepted,
            });
        }
    }
    Ok(out)
}

pub fn write_tags<W: Write>(out: &mut W, records: &[TagRecord]) -> Result<()> {
    write_tag_records(out, records)
}
