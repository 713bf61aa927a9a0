//! Named parameter storage shared by every learned component.
//!
//! Values live in `f64` so forward/backward passes accumulate in 64 bits,
//! but every stored value is kept exactly representable as an `f32`. That
//! makes the little-endian `f32` checkpoint format a bit-exact round trip.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Round to the nearest `f32` and widen back.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. The value is snapped to the `f32` grid.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        value.mapv_inplace(to_f32_grid);
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::ones((rows, cols)))
    }

    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let value = Tensor::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = Tensor::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    /// Marks all parameters under `prefix` as trainable or frozen. Frozen
    /// parameters enter the graph as constants and never receive gradients.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Replaces a parameter value, checking the shape.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let current = &self.params[id.0];
        if current.value.dim() != value.dim() {
            return Err(Error::ShapeMismatch {
                what: current.name.clone(),
                expected: vec![current.value.nrows(), current.value.ncols()],
                found: vec![value.nrows(), value.ncols()],
            });
        }
        value.mapv_inplace(to_f32_grid);
        self.params[id.0].value = value;
        Ok(())
    }

    /// Copies every `src_prefix*` parameter of `other` into the matching
    /// `dst_prefix*` slot of `self`. Returns the number copied.
    pub fn copy_prefix_from(
        &mut self,
        other: &ParamStore,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (_, p) in other.iter().filter(|(_, p)| p.name.starts_with(src_prefix)) {
            let target = format!("{dst_prefix}{}", &p.name[src_prefix.len()..]);
            let id = self
                .id(&target)
                .ok_or_else(|| Error::UnknownParam(target.clone()))?;
            self.set(id, p.value.clone())?;
            copied += 1;
        }
        Ok(copied)
    }
}

/// Per-parameter gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    vars: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
            vars: Vec::new(),
        }
    }

    pub(crate) fn reserve_vars(&mut self, n: usize) {
        self.vars.resize(n, None);
    }

    pub(crate) fn accumulate_var(&mut self, i: usize, g: &Tensor) {
        match &mut self.vars[i] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Gradient with respect to a graph variable (see `Graph::variable`).
    pub fn var(&self, i: usize) -> Option<&Tensor> {
        self.vars.get(i).and_then(|g| g.as_ref())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    /// Gradient entry, zero when the parameter received none.
    pub fn value(&self, id: ParamId, row: usize, col: usize) -> f64 {
        self.get(id).map(|g| g[[row, col]]).unwrap_or(0.0)
    }

    /// L2 norm over the given parameters.
    pub fn norm_over(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}
