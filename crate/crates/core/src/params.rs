//! Named parameter storage shared by every module, plus gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, SlipError};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

/// Flat, ordered store of all model parameters.
///
/// Insertion order is stable and defines the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            decay,
        });
        id
    }

    /// Weight matrix initialised from N(0, std²).
    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Matrix::randn(rows, cols, std, rng), true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols), false)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Matrix::filled(rows, cols, v), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(SlipError::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(SlipError::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Gradient buffers, one optional matrix per parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Matrix::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
