use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Gradients, Tape, Tensor, Var};

/// Trainable tensors and non-trainable buffers of one component, in a fixed
/// registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

/// Tape handles of a [`ParamSet`] bound for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub(crate) mean_buf: usize,
    pub(crate) var_buf: usize,
    pub(crate) stats: BnStats,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub(crate) fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn buffer(&self, idx: usize) -> &Tensor {
        &self.buffers[idx]
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on the tape, as trainable leaves or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Gradient per parameter in registration order; unreached parameters get
    /// zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, &var)| grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    /// Folds batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased variance.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f32) {
        for u in updates {
            let n = u.stats.count as f32;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, &m) in self.buffers[u.mean_buf].data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, &v) in self.buffers[u.var_buf].data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }

    /// All tensors with their names, trainable first.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    /// Replaces every tensor by the entry of the same name; the set of names
    /// and every shape must match exactly.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let expected = self.names.len() + self.buffer_names.len();
        if entries.len() != expected {
            return Err(Error::invalid(format!(
                "archive holds {} tensors, component expects {expected}",
                entries.len()
            )));
        }
        let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        let slots = self
            .names
            .iter()
            .zip(self.values.iter_mut())
            .chain(self.buffer_names.iter().zip(self.buffers.iter_mut()));
        for (name, slot) in slots {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("archive is missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::invalid(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

pub(crate) fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape")
}
