//! Reference implementations shared by the integration tests. They are
//! written independently of the library: dense 0/1 matrices, double loops
//! and pairwise counts instead of the library's incremental formulas.

#![allow(dead_code)]

use m3pt::metrics::EvalInstance;
use rand::seq::SliceRandom;
use rand::Rng;

/// Metric values in the same order as `EvalReport::records()` minus top-k.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
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
    pub p_at: Vec<(usize, f64)>,
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    div(2.0 * p * r, p + r)
}

fn dense(ids: &[usize], n: usize) -> Vec<u8> {
    (0..n).map(|t| ids.contains(&t) as u8).collect()
}

/// Position of each tag in a ranking, 1-based.
fn ranks(ranking: &[usize]) -> Vec<usize> {
    let mut r = vec![0; ranking.len()];
    for (pos, &t) in ranking.iter().enumerate() {
        r[t] = pos + 1;
    }
    r
}

pub fn oracle_metrics(xs: &[EvalInstance], vocab: usize) -> OracleMetrics {
    let y: Vec<Vec<u8>> = xs.iter().map(|x| dense(&x.gold, vocab)).collect();
    let z: Vec<Vec<u8>> = xs.iter().map(|x| dense(&x.accepted, vocab)).collect();
    let n = xs.len();

    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for t in 0..vocab {
        let tp = (0..n).filter(|&i| y[i][t] == 1 && z[i][t] == 1).count() as f64;
        let pred = (0..n).filter(|&i| z[i][t] == 1).count() as f64;
        let act = (0..n).filter(|&i| y[i][t] == 1).count() as f64;
        let (p, r) = (div(tp, pred), div(tp, act));
        mp += p;
        mr += r;
        mf += harmonic(p, r);
    }
    let v = vocab as f64;

    let (mut pe, mut re, mut fe, mut hl) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let both = (0..vocab).filter(|&t| y[i][t] == 1 && z[i][t] == 1).count() as f64;
        let pred: f64 = z[i].iter().map(|&b| b as f64).sum();
        let act: f64 = y[i].iter().map(|&b| b as f64).sum();
        let (p, r) = (div(both, pred), div(both, act));
        pe += p;
        re += r;
        fe += harmonic(p, r);
        hl += (0..vocab).filter(|&t| y[i][t] != z[i][t]).count() as f64 / v;
    }
    let nf = n as f64;

    let ranked: Vec<usize> = (0..n).filter(|&i| !xs[i].gold.is_empty()).collect();
    let (mut ap, mut oe, mut rl) = (0.0, 0.0, 0.0);
    for &i in &ranked {
        let r = ranks(&xs[i].ranking);
        let gold: Vec<usize> = (0..vocab).filter(|&t| y[i][t] == 1).collect();
        let non: Vec<usize> = (0..vocab).filter(|&t| y[i][t] == 0).collect();
        let mut sum = 0.0;
        for &g in &gold {
            let at_or_above = gold.iter().filter(|&&h| r[h] <= r[g]).count() as f64;
            sum += at_or_above / r[g] as f64;
        }
        ap += sum / gold.len() as f64;
        let top = (0..vocab).find(|&t| r[t] == 1).unwrap();
        oe += (y[i][top] == 0) as u8 as f64;
        let mut bad = 0.0;
        for &g in &gold {
            for &m in &non {
                if r[g] > r[m] {
                    bad += 1.0;
                }
            }
        }
        rl += div(bad, (gold.len() * non.len()) as f64);
    }
    let nr = ranked.len() as f64;

    let p_at = [3, 5]
        .into_iter()
        .filter(|&k| k <= vocab)
        .map(|k| {
            let total: f64 = (0..n)
                .map(|i| {
                    let r = ranks(&xs[i].ranking);
                    (0..vocab).filter(|&t| r[t] <= k && y[i][t] == 1).count() as f64 / k as f64
                })
                .sum();
            (k, div(total, nf))
        })
        .collect();

    OracleMetrics {
        macro_p: mp / v,
        macro_r: mr / v,
        macro_f1: mf / v,
        p_e: div(pe, nf),
        r_e: div(re, nf),
        f1_e: div(fe, nf),
        hamming: div(hl, nf),
        map: div(ap, nr),
        one_error: div(oe, nr),
        ranking_loss: div(rl, nr),
        p_at,
    }
}

/// A random POI: gold and accepted subsets and a random full ranking.
pub fn random_instance<R: Rng>(rng: &mut R, vocab: usize) -> EvalInstance {
    let subset = |rng: &mut R, p: f64| -> Vec<usize> { (0..vocab).filter(|_| rng.random_bool(p)).collect() };
    let gold = subset(rng, 0.3);
    let accepted = subset(rng, 0.3);
    let mut ranking: Vec<usize> = (0..vocab).collect();
    ranking.shuffle(rng);
    EvalInstance { gold, accepted, ranking }
}

/// Central finite-difference slope of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[i] += eps;
    lo[i] -= eps;
    (f(&hi) - f(&lo)) / (2.0 * eps)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
