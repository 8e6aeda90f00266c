//! Named parameter storage, gradient accumulation, and plain SGD.
//!
//! Parameters live outside any tape. Each forward pass binds them onto a
//! fresh [`Tape`] as leaf variables; after `backward`, the tape gradients
//! are folded back here with [`ParamSet::accumulate`], which lets several
//! iterations sum their gradients before a single [`sgd_step`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    has_grad: bool,
    learnable: bool,
}

impl ParamEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }
}

/// Ordered collection of named tensors. Iteration order is insertion order,
/// which fixes the checkpoint layout.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, learnable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad_len = value.len();
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad: vec![0.0; grad_len],
            has_grad: false,
            learnable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    /// Register every learnable parameter as a tape variable.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let ids = self
            .entries
            .iter()
            .map(|e| e.learnable.then(|| tape.variable(e.value.clone())))
            .collect();
        TapeBinding { ids }
    }

    /// Fold tape gradients of bound parameters into the persistent grad
    /// buffers. Parameters the loss did not reach contribute zero.
    pub fn accumulate(&mut self, tape: &Tape, binding: &TapeBinding) {
        for (entry, bound) in self.entries.iter_mut().zip(&binding.ids) {
            let Some(tid) = bound else { continue };
            if let Some(g) = tape.grad(*tid) {
                for (acc, &d) in entry.grad.iter_mut().zip(g) {
                    *acc += d;
                }
            }
            entry.has_grad = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.fill(0.0);
            entry.has_grad = false;
        }
    }
}

/// Mapping from parameter ids to tape leaves for one forward pass.
pub struct TapeBinding {
    ids: Vec<Option<TensorId>>,
}

impl TapeBinding {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0].expect("parameter not bound (non-learnable?)")
    }

    /// Build a binding from externally created tape leaves, one per
    /// learnable entry of `params`, in entry order.
    pub fn from_leaves(params: &ParamSet, leaves: &[TensorId]) -> Self {
        let mut it = leaves.iter();
        let ids = params
            .entries
            .iter()
            .map(|e| e.learnable.then(|| *it.next().expect("leaf count mismatch")))
            .collect();
        assert!(it.next().is_none(), "leaf count mismatch");
        TapeBinding { ids }
    }
}

/// Plain SGD with a multiplicative epoch schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// `(epoch, factor)` pairs; the factor applies from that epoch onward.
    pub schedule: Vec<(usize, f64)>,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, schedule: Vec<(usize, f64)>) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if schedule.iter().any(|&(_, f)| f <= 0.0 || !f.is_finite()) {
            return Err(Error::Config("schedule factors must be positive".into()));
        }
        Ok(Self {
            learning_rate,
            schedule,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &(e, f) in &self.schedule {
            if epoch >= e {
                lr *= f;
            }
        }
        lr
    }
}

/// One descent step: `p -= lr(epoch) * grad(p)` for every learnable
/// parameter, then gradients are zeroed.
pub fn sgd_step(params: &mut ParamSet, config: &SgdConfig, epoch: usize) -> Result<()> {
    let lr = config.lr_at(epoch);
    for entry in &params.entries {
        if entry.learnable && !entry.has_grad {
            return Err(Error::MissingGrad(entry.name.clone()));
        }
    }
    for entry in &mut params.entries {
        if !entry.learnable {
            continue;
        }
        for (p, g) in entry.value.data_mut().iter_mut().zip(&entry.grad) {
            *p -= lr * g;
        }
        entry.grad.fill(0.0);
        entry.has_grad = false;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_step() {
        let mut params = ParamSet::new();
        let p = params.add("p", Tensor::scalar(1.0), true);
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        // Fake a gradient of 2 by scaling the bound leaf and backprop.
        let y = tape.scale(binding.get(p), 2.0);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        params.accumulate(&tape, &binding);
        let cfg = SgdConfig::new(0.1, vec![]).unwrap();
        sgd_step(&mut params, &cfg, 0).unwrap();
        assert!((params.value(p).scalar_value() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_factors_compound() {
        let cfg = SgdConfig::new(0.1, vec![(50, 0.2), (100, 0.2), (150, 0.2)]).unwrap();
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(50) - 0.02).abs() < 1e-15);
        assert!((cfg.lr_at(149) - 0.004).abs() < 1e-15);
        assert!((cfg.lr_at(150) - 0.1 / 125.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = ParamSet::new();
        let p = params.add("p", Tensor::scalar(3.0), true);
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let _unused = binding.get(p);
        // Loss independent of p: gradient is zero but recorded.
        let c = tape.constant(Tensor::scalar(1.0));
        let l = tape.sum_all(c);
        tape.backward(l).unwrap();
        params.accumulate(&tape, &binding);
        let cfg = SgdConfig::new(0.5, vec![]).unwrap();
        sgd_step(&mut params, &cfg, 0).unwrap();
        assert_eq!(params.value(p).scalar_value(), 3.0);
    }

    #[test]
    fn missing_gradient_is_an_error_naming_the_parameter() {
        let mut params = ParamSet::new();
        params.add("occ.f.W", Tensor::scalar(1.0), true);
        let cfg = SgdConfig::new(0.1, vec![]).unwrap();
        let err = sgd_step(&mut params, &cfg, 0).unwrap_err().to_string();
        assert!(err.contains("occ.f.W"), "{err}");
    }

    #[test]
    fn accumulate_sums_over_iterations() {
        let mut params = ParamSet::new();
        let p = params.add("p", Tensor::scalar(1.0), true);
        for _ in 0..3 {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let y = tape.scale(binding.get(p), 1.0);
            let l = tape.sum_all(y);
            tape.backward(l).unwrap();
            params.accumulate(&tape, &binding);
        }
        assert_eq!(params.grad(p), &[3.0]);
    }
}
