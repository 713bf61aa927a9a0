//! Central finite-difference checks for analytic gradients.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
//! coordinates whose true gradient is ~0 from dividing by round-off.

use std::fmt;

use rand::seq::index::sample;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng::seeded;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    pub floor: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn exhaustive() -> Self {
        Self {
            eps: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-4,
            coords_per_param: None,
            seed: 0,
        }
    }

    pub fn sampled(coords_per_param: usize) -> Self {
        Self {
            coords_per_param: Some(coords_per_param),
            ..Self::exhaustive()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub what: String,
    pub coord: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }

    fn record(&mut self, what: &str, coord: (usize, usize), a: f64, n: f64, cfg: &GradCheckConfig) {
        let err = relative_error(a, n, cfg.floor);
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(err);
        if !(err <= cfg.rel_tol) {
            self.mismatches.push(GradMismatch {
                what: what.to_string(),
                coord,
                analytic: a,
                numeric: n,
                rel_err: err,
            });
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "checked {} coords, max rel err {:.3e}, {} mismatches",
            self.checked,
            self.max_rel_err,
            self.mismatches.len()
        )?;
        for m in self.mismatches.iter().take(10) {
            writeln!(
                f,
                "  {}{:?}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                m.what, m.coord, m.analytic, m.numeric, m.rel_err
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.coords_per_param {
        Some(n) if n < len => {
            let mut rng = seeded(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks the gradient of `loss` with respect to every trainable parameter.
///
/// `loss` returns the scalar value and its analytic gradients; only the
/// value is used for perturbed evaluations. Parameters are perturbed in
/// place and restored.
pub fn check_param_gradients(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> (f64, Gradients),
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    check_param_subset(store, &mut loss, cfg, |_| true)
}

/// Like [`check_param_gradients`] restricted to parameters for which
/// `select` returns true.
pub fn check_param_subset(
    store: &mut ParamStore,
    loss: &mut impl FnMut(&ParamStore) -> (f64, Gradients),
    cfg: &GradCheckConfig,
    select: impl Fn(&str) -> bool,
) -> GradCheckReport {
    let (_, grads) = loss(store);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|id| store.is_trainable(*id) && select(store.name(*id)))
        .collect();
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let name = store.name(id).to_string();
        for flat in coords(rows * cols, cfg, id.index() as u64) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + cfg.eps;
            let plus = loss(store).0;
            store.get_mut(id)[[r, c]] = orig - cfg.eps;
            let minus = loss(store).0;
            store.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            report.record(&name, (r, c), grads.value(id, r, c), numeric, cfg);
        }
    }
    report
}

/// Checks the gradient of a function of a flat input vector.
pub fn check_input_gradient(
    x: &[f64],
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length");
    let mut report = GradCheckReport::default();
    let mut probe = x.to_vec();
    for i in coords(x.len(), cfg, 0xFEED) {
        let orig = probe[i];
        probe[i] = orig + cfg.eps;
        let plus = f(&probe).0;
        probe[i] = orig - cfg.eps;
        let minus = f(&probe).0;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        report.record("input", (0, i), analytic[i], numeric, cfg);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let good = check_input_gradient(
            &x,
            |v| (v[0] * v[0] + 3.0 * v[1], vec![2.0 * v[0], 3.0]),
            &GradCheckConfig::exhaustive(),
        );
        assert!(good.passed(), "{good}");
        let bad = check_input_gradient(
            &x,
            |v| (v[0] * v[0] + 3.0 * v[1], vec![2.0 * v[0], 3.1]),
            &GradCheckConfig::exhaustive(),
        );
        assert_eq!(bad.mismatches.len(), 1);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 1e-9, 1e-4), 1e-5);
        assert!((relative_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-15);
    }
}
