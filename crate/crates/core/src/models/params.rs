use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Named tensors in a fixed order. Buffers (batch-norm running statistics)
/// are stored alongside trainable parameters but never bound as trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub(crate) fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub(crate) fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.iter().filter(|(_, _, tr)| *tr).map(|(_, t, _)| t.numel()).sum()
    }

    /// Puts every trainable tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        Binding(
            self.tensors
                .iter()
                .zip(&self.trainable)
                .map(|(t, &tr)| tr.then(|| tape.leaf(t.clone(), requires_grad)))
                .collect(),
        )
    }

    /// Gradients of every bound tensor, zero-filled where none flowed.
    pub(crate) fn grads(&self, tape: &Tape, binding: &Binding) -> Vec<(usize, Tensor)> {
        binding
            .0
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .map(|(i, v)| {
                let g = tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tensors[i].shape().to_vec()));
                (i, g)
            })
            .collect()
    }

    /// Pairs each tensor with its gradient from [`ParamStore::grads`].
    pub(crate) fn with_grads<'a>(
        &'a mut self,
        grads: &'a [(usize, Tensor)],
    ) -> impl Iterator<Item = (&'a mut Tensor, &'a Tensor)> + 'a {
        let mut pending = grads.iter().peekable();
        self.tensors
            .iter_mut()
            .enumerate()
            .filter_map(move |(i, t)| match pending.peek() {
                Some((j, _)) if *j == i => pending.next().map(|(_, g)| (t, g)),
                _ => None,
            })
    }

    pub(crate) fn entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every tensor from `entries`, which must carry exactly this
    /// store's names (after `prefix`) and shapes, in order.
    pub(crate) fn load_entries(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors under {prefix:?}, found {}",
                self.len(),
                entries.len()
            )));
        }
        for ((name, slot), (ename, t)) in self.names.iter().zip(&mut self.tensors).zip(entries) {
            let want = format!("{prefix}{name}");
            if *ename != want || t.shape() != slot.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {want} {:?}, found {ename} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Bit pattern of every tensor, for exact equality checks.
    pub fn fingerprint(&self) -> Vec<u32> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Tape handles for a [`ParamStore`], indexed like the store.
#[derive(Debug, Clone)]
pub struct Binding(Vec<Option<Var>>);

impl Binding {
    pub(crate) fn empty() -> Self {
        Binding(Vec::new())
    }

    pub fn var(&self, idx: usize) -> Var {
        self.0[idx].expect("parameter is bound")
    }
}

fn standard_normal(rng: &mut Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Fan-in scaled normal, std `sqrt(2 / fan_in)`.
pub(crate) fn kaiming_normal(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (standard_normal(rng) * std) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Uniform on `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}
