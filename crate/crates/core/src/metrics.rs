//! Multi-label evaluation metrics.
//!
//! Conventions: every `0/0` ratio is 0 and stays in its average. Ranking
//! metrics skip POIs without gold tags.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gold tags, accepted tags and the full ranking of one POI.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EvalInstance {
    pub gold: Vec<usize>,
    pub accepted: Vec<usize>,
    /// Every tag id, best first.
    pub ranking: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn mask(ids: &[usize], n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in ids {
        m[i] = true;
    }
    m
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Checks tag ids against the vocabulary and that every ranking is a
/// permutation of it.
pub fn validate(instances: &[EvalInstance], vocab_size: usize) -> Result<()> {
    if vocab_size == 0 {
        return Err(Error::Empty("tag vocabulary"));
    }
    for (i, inst) in instances.iter().enumerate() {
        let bad = |what: &str| Error::InvalidArgument(format!("instance {i}: {what}"));
        for set in [&inst.gold, &inst.accepted] {
            let m = set.iter().try_fold(vec![false; vocab_size], |mut m, &t| {
                if t >= vocab_size || m[t] {
                    None
                } else {
                    m[t] = true;
                    Some(m)
                }
            });
            if m.is_none() {
                return Err(bad("tag set has an out-of-range or repeated id"));
            }
        }
        let mut seen = vec![false; vocab_size];
        if inst.ranking.len() != vocab_size
            || inst.ranking.iter().any(|&t| t >= vocab_size || std::mem::replace(&mut seen[t], true))
        {
            return Err(bad("ranking is not a permutation of the vocabulary"));
        }
    }
    Ok(())
}

/// Tag-centric precision, recall and F1 averaged over all `vocab_size`
/// tags; F1 is averaged per tag.
pub fn macro_prf(instances: &[EvalInstance], vocab_size: usize) -> (f64, f64, f64) {
    let mut tp = vec![0usize; vocab_size];
    let mut predicted = vec![0usize; vocab_size];
    let mut actual = vec![0usize; vocab_size];
    for inst in instances {
        let gold = mask(&inst.gold, vocab_size);
        for &t in &inst.accepted {
            predicted[t] += 1;
            tp[t] += gold[t] as usize;
        }
        for &t in &inst.gold {
            actual[t] += 1;
        }
    }
    let per_tag: Vec<(f64, f64)> = (0..vocab_size)
        .map(|t| (ratio(tp[t], predicted[t]), ratio(tp[t], actual[t])))
        .collect();
    (
        mean(per_tag.iter().map(|p| p.0)),
        mean(per_tag.iter().map(|p| p.1)),
        mean(per_tag.iter().map(|&(p, r)| f1(p, r))),
    )
}

fn hits(inst: &EvalInstance) -> usize {
    inst.accepted.iter().filter(|t| inst.gold.contains(t)).count()
}

/// POI-centric precision, recall and F1 averaged over POIs.
pub fn example_prf(instances: &[EvalInstance]) -> (f64, f64, f64) {
    let per_poi: Vec<(f64, f64)> = instances
        .iter()
        .map(|inst| {
            let h = hits(inst);
            (ratio(h, inst.accepted.len()), ratio(h, inst.gold.len()))
        })
        .collect();
    (
        mean(per_poi.iter().map(|p| p.0)),
        mean(per_poi.iter().map(|p| p.1)),
        mean(per_poi.iter().map(|&(p, r)| f1(p, r))),
    )
}

/// Mean over POIs of `|accepted Δ gold| / vocab_size`.
pub fn hamming_loss(instances: &[EvalInstance], vocab_size: usize) -> f64 {
    mean(instances.iter().map(|inst| {
        let h = hits(inst);
        let sym = inst.accepted.len() + inst.gold.len() - 2 * h;
        ratio(sym, vocab_size)
    }))
}

/// `(mAP, OneError, RankingLoss)` over POIs with at least one gold tag.
pub fn ranking_metrics(instances: &[EvalInstance]) -> (f64, f64, f64) {
    let mut ap = Vec::new();
    let mut one_error = Vec::new();
    let mut rank_loss = Vec::new();
    let skipped = instances.iter().filter(|i| i.gold.is_empty()).count();
    if skipped > 0 {
        log::warn!("{skipped} POIs without gold tags excluded from ranking metrics");
    }
    for inst in instances.iter().filter(|i| !i.gold.is_empty()) {
        let n = inst.ranking.len();
        let gold = mask(&inst.gold, n.max(inst.gold.iter().max().map_or(0, |m| m + 1)));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        // Gold tags seen so far, and misordered (gold, non-gold) pairs.
        let mut non_gold_above = 0usize;
        let mut misordered = 0usize;
        for (rank, &t) in inst.ranking.iter().enumerate() {
            if gold[t] {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
                misordered += non_gold_above;
            } else {
                non_gold_above += 1;
            }
        }
        ap.push(precision_sum / inst.gold.len() as f64);
        one_error.push(if inst.ranking.first().is_some_and(|&t| gold[t]) { 0.0 } else { 1.0 });
        let non_gold = n - inst.gold.len();
        rank_loss.push(ratio(misordered, inst.gold.len() * non_gold));
    }
    (
        mean(ap.into_iter()),
        mean(one_error.into_iter()),
        mean(rank_loss.into_iter()),
    )
}

/// Mean over POIs of `|top-k ∩ gold| / k`.
pub fn topk_precision(instances: &[EvalInstance], k: usize) -> Result<f64> {
    if k == 0 || instances.iter().any(|i| k > i.ranking.len()) {
        return Err(Error::InvalidArgument(format!("k = {k} outside the ranking length")));
    }
    Ok(mean(instances.iter().map(|inst| {
        let h = inst.ranking[..k].iter().filter(|t| inst.gold.contains(t)).count();
        h as f64 / k as f64
    })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub p_e: f64,
    pub r_e: f64,
    pub f1_e: f64,
    pub hamming: f64,
    pub map: f64,
    pub one_error: f64,
    pub ranking_loss: f64,
    /// Top-k precision for each `k ∈ {3, 5}` not exceeding the vocabulary.
    pub topk: BTreeMap<usize, f64>,
    pub pois: usize,
}

/// One line of the machine-readable evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
}

impl EvalReport {
    pub fn compute(instances: &[EvalInstance], vocab_size: usize) -> Result<Self> {
        validate(instances, vocab_size)?;
        let (macro_p, macro_r, macro_f1) = macro_prf(instances, vocab_size);
        let (p_e, r_e, f1_e) = example_prf(instances);
        let (map, one_error, ranking_loss) = ranking_metrics(instances);
        let mut topk = BTreeMap::new();
        for k in [3, 5] {
            if k <= vocab_size {
                topk.insert(k, topk_precision(instances, k)?);
            }
        }
        Ok(Self {
            macro_p,
            macro_r,
            macro_f1,
            p_e,
            r_e,
            f1_e,
            hamming: hamming_loss(instances, vocab_size),
            map,
            one_error,
            ranking_loss,
            topk,
            pois: instances.len(),
        })
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = [
            ("M-P", self.macro_p),
            ("M-R", self.macro_r),
            ("M-F1", self.macro_f1),
            ("P-e", self.p_e),
            ("R-e", self.r_e),
            ("F1-e", self.f1_e),
            ("HLS", self.hamming),
            ("mAP", self.map),
            ("OneError", self.one_error),
            ("RankingLoss", self.ranking_loss),
        ]
        .into_iter()
        .map(|(m, v)| MetricRecord {
            metric: m.to_string(),
            value: v,
        })
        .collect();
        out.extend(self.topk.iter().map(|(k, v)| MetricRecord {
            metric: format!("P@{k}"),
            value: *v,
        }));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "POIs evaluated: {}", self.pois)?;
        for r in self.records() {
            writeln!(f, "{:<12} {:.4}", r.metric, r.value)?;
        }
        Ok(())
    }
}
