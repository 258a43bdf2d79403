use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (e.g. running statistics) are stored and checkpointed but never
    /// receive gradients.
    pub trainable: bool,
}

/// Flat owner of every parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: false });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-normal weights for a layer with `fan_in` inputs.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean_buf: ParamId,
    pub var_buf: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub count: usize,
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass. Each parameter
/// becomes a single leaf so its gradient accumulates across every use.
pub struct Binder<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
    pub mode: Mode,
    leaves: RefCell<HashMap<ParamId, Var<'t, T>>>,
    updates: RefCell<Vec<StatUpdate<T>>>,
    frozen: bool,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, mode: Mode) -> Self {
        Binder {
            tape,
            store,
            mode,
            leaves: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
            frozen: false,
        }
    }

    /// Parameters enter the tape as constants (inference without gradients).
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return *v;
        }
        let p = &self.store.params[id.0];
        let v = if p.trainable && !self.frozen {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.leaves.borrow_mut().insert(id, v);
        v
    }

    pub fn record_stats(&self, update: StatUpdate<T>) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Parameter gradients, zero for parameters that were not used.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let leaves = self.leaves.borrow();
        let mut out: Vec<_> = self
            .store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = match leaves.get(&id) {
                    Some(v) => grads.get_or_zeros(*v),
                    None => Tensor::zeros(self.store.get(id).shape()),
                };
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Applies running-statistics updates with exponential `momentum`; the
/// variance is stored unbiased.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>], momentum: T) {
    for u in updates {
        let n = T::of_usize(u.count);
        let unbias = if u.count > 1 { n / (n - T::one()) } else { T::one() };
        let keep = T::one() - momentum;
        for (r, &b) in store.get_mut(u.mean_buf).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in store.get_mut(u.var_buf).data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + momentum * b * unbias;
        }
    }
}
