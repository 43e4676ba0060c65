//! Named parameter tensors, their gradient accumulators and the optimizer.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{Graph, Matrix, RngStream, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Rc<Matrix>,
    grad: Matrix,
    /// Buffers (running statistics, frozen values) are stored here too but
    /// never receive gradients.
    trainable: bool,
}

/// Owns every tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Serializable snapshot of a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub name: String,
    pub trainable: bool,
    pub value: Matrix,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Matrix, trainable: bool) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.push(Entry { name, value: Rc::new(value), grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].trainable).collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        if value.shape() != self.value(id).shape() {
            return Err(Error::Shape(format!("set {}: {:?} vs {:?}", self.name(id), value.shape(), self.value(id).shape())));
        }
        self.entries[id.0].value = Rc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.grad.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient of {}: {:?} vs {:?}", e.name, g.shape(), e.grad.shape())));
        }
        e.grad.axpy(1.0, g);
        Ok(())
    }

    /// Puts every tensor on `graph`. Trainable tensors become differentiable
    /// leaves when `trainable` is set; everything else is a constant.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| graph.leaf_shared(Rc::clone(&e.value), trainable && e.trainable))
            .collect();
        Binding { vars, trainable }
    }

    /// Runs the backward pass of `loss` and accumulates gradients for every
    /// trainable tensor of `binding`.
    pub fn backward_into(&mut self, graph: &Graph, loss: Var, binding: &Binding) -> Result<()> {
        self.backward_into_with(graph, loss, binding, &[]).map(|_| ())
    }

    /// Like [`ParamStore::backward_into`], additionally returning the
    /// gradients of `extra` nodes from the same sweep.
    pub fn backward_into_with(&mut self, graph: &Graph, loss: Var, binding: &Binding, extra: &[Var]) -> Result<Vec<Matrix>> {
        let ids = if binding.is_trainable() { self.trainable_ids() } else { Vec::new() };
        let mut wrt: Vec<Var> = ids.iter().map(|&id| binding.var(id)).collect();
        wrt.extend_from_slice(extra);
        let mut grads = graph.backward(loss, &wrt)?;
        let rest = grads.split_off(ids.len());
        for (id, g) in ids.into_iter().zip(grads) {
            self.accumulate_grad(id, &g)?;
        }
        Ok(rest)
    }

    pub fn snapshot(&self) -> Vec<ParamSnapshot> {
        self.entries
            .iter()
            .map(|e| ParamSnapshot { name: e.name.clone(), trainable: e.trainable, value: (*e.value).clone() })
            .collect()
    }

    /// Restores values from a snapshot taken from a store with the same
    /// layout.
    pub fn restore(&mut self, snap: &[ParamSnapshot]) -> Result<()> {
        if snap.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored, model has {}", snap.len(), self.entries.len())));
        }
        for (e, s) in self.entries.iter_mut().zip(snap) {
            if e.name != s.name || e.value.shape() != s.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match stored {} {:?}",
                    e.name,
                    e.value.shape(),
                    s.name,
                    s.value.shape()
                )));
            }
            e.value = Rc::new(s.value.clone());
            e.trainable = s.trainable;
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// Graph handles of a store's tensors for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    trainable: bool,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// PyTorch-style default initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform(rng: &mut RngStream, fan_in: usize, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform_matrix(rows, cols, -bound, bound)
}

/// Adaptive-moment optimizer over the trainable tensors of one store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients of `ids`.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let need = store.len();
        if self.m.len() < need {
            self.m.resize(need, None);
            self.v.resize(need, None);
        }
        for &id in ids {
            let g = store.grad(id).clone();
            g.ensure_finite(store.name(id))?;
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let (b1, b2) = (self.beta1, self.beta2);
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (lr, eps) = (self.lr, self.eps);
            let m = m.clone();
            let v = v.clone();
            let p = store.value_mut(id);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
