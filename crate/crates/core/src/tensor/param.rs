use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Result};

use super::{Gradients, Tape, Tensor, Var};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owner of every parameter of a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return contract_err(format!("parameter {name:?} registered twice"));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.clone(), value, grad });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of one backward pass onto the stored ones.
    pub fn accumulate(&mut self, session: &Session<'_>, grads: &Gradients) {
        for (p, &var) in self.params.iter_mut().zip(&session.params) {
            if let Some(g) = grads.get(var) {
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Adds a flat gradient list (one buffer per parameter, in order).
    pub fn accumulate_flat(&mut self, grads: &[Vec<f64>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Replaces values by name; every stored parameter must be supplied
    /// with a matching shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let Some(id) = self.find(&name) else {
                return contract_err(format!("checkpoint has unknown parameter {name:?}"));
            };
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return shape_err(format!(
                    "parameter {name:?} has shape {:?} but checkpoint holds {:?}",
                    p.value.shape(),
                    value.shape()
                ));
            }
            p.value = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return contract_err(format!("checkpoint lacks parameter {:?}", self.params[missing].name));
        }
        Ok(())
    }
}

/// One forward evaluation: a tape with every parameter bound as a leaf,
/// plus the random stream used by stochastic layers.
pub struct Session<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    rng: ChaCha8Rng,
}

impl<'t> Session<'t> {
    /// Binds parameters as gradient-tracking leaves.
    pub fn new(tape: &'t Tape, store: &ParamStore, seed: u64) -> Self {
        Self::bind(tape, store, seed, true)
    }

    /// Binds parameters as constants; no gradients are recorded.
    pub fn inference(tape: &'t Tape, store: &ParamStore, seed: u64) -> Self {
        Self::bind(tape, store, seed, false)
    }

    fn bind(tape: &'t Tape, store: &ParamStore, seed: u64, grad: bool) -> Self {
        let params = store.params.iter().map(|p| tape.leaf(p.value.clone(), grad)).collect();
        Self { tape, params, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Gradient of every bound parameter, zeros where nothing flowed.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&v| grads.get(v).map_or_else(|| vec![0.0; v.numel()], <[f64]>::to_vec))
            .collect()
    }
}
