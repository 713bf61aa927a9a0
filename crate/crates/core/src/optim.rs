//! AdamW with decoupled weight decay, and a linear learning-rate schedule.

use crate::params::{to_f32_grid, Gradients, ParamStore, Tensor};

/// Learning rate interpolated linearly from `start` at step 0 to `end` at
/// step `total_steps − 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
    /// Steps over which the rate ramps up linearly from `1/warmup` of the
    /// decayed value; 0 disables the ramp.
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Self {
        Self {
            start,
            end,
            total_steps,
            warmup_steps: 0,
        }
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn lr(&self, step: usize) -> f64 {
        let ramp = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        if self.total_steps <= 1 {
            return ramp * self.start;
        }
        let frac = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        ramp * (self.start + (self.end - self.start) * frac)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment of a parameter, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(index)?.as_ref()?, self.second.get(index)?.as_ref()?))
    }

    /// One update of every trainable parameter that has a gradient.
    /// Parameters without a gradient are left untouched. Updated values are
    /// snapped to the `f32` grid.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.dim()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p = to_f32_grid(*p - lr * (update + wd * *p));
                });
        }
    }
}
