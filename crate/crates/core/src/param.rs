//! Named parameter storage and the AdamW optimizer.

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Index of a trainable parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Index of a non-trainable buffer (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Param {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Insertion-ordered parameters and buffers with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `name` with the value produced by `init`, or returns the
    /// existing id when the name is already present with the same shape.
    pub fn get_or_insert(&mut self, name: &str, shape: Shape, init: impl FnOnce() -> Tensor) -> Result<ParamId> {
        if let Some(&i) = self.index.get(name) {
            let have = self.params[i].value.shape();
            if have != shape {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` already registered with shape {have:?}, requested {shape:?}"
                )));
            }
            return Ok(ParamId(i));
        }
        let value = init();
        debug_assert_eq!(value.shape(), shape);
        let n = value.numel();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get_or_insert_buffer(&mut self, name: &str, value: Tensor) -> Result<BufferId> {
        if let Some(&i) = self.buffer_index.get(name) {
            if self.buffers[i].value.shape() != value.shape() {
                return Err(Error::InvalidArgument(format!("buffer `{name}` shape conflict")));
            }
            return Ok(BufferId(i));
        }
        self.buffer_index.insert(name.to_string(), self.buffers.len());
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites a parameter or buffer value by name (checkpoint loading).
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(&i) = self.index.get(name) {
            &mut self.params[i].value
        } else if let Some(&i) = self.buffer_index.get(name) {
            &mut self.buffers[i].value
        } else {
            return Err(Error::UnknownName(name.to_string()));
        };
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "assign",
                detail: format!("`{name}`: stored {:?}, given {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Places a parameter on the tape as a gradient-receiving leaf.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param_leaf(self.params[id.0].value.clone(), id)
    }

    /// Adds the tape's parameter-leaf gradients into each parameter's grad.
    /// Parameters not on the tape receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        for &(var, id) in tape.param_leaves() {
            if let Some(g) = tape.grad(var) {
                let dst = self.params[id.0].grad.as_mut().expect("initialized above");
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    /// One decoupled-weight-decay Adam update of every parameter. Gradients
    /// are left in place; the caller zeroes them.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in &mut self.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - opt.beta1.powi(t);
            let bc2 = 1.0 - opt.beta2.powi(t);
            let g = p.grad.as_ref().expect("checked above").data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                w[i] *= 1.0 - opt.lr * opt.weight_decay;
                p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
                p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                w[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.get_or_insert("w", Shape::scalar(), || Tensor::scalar(w)).unwrap();
        (s, id)
    }

    fn set_grad(s: &mut ParamStore, id: ParamId, g: f64) {
        s.param_mut(id).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let (mut s, id) = scalar_store(1.0);
        set_grad(&mut s, id, 1.0);
        s.adamw_step(&AdamW::new(0.1, 0.0)).unwrap();
        // t=1: m̂ = 1, v̂ = 1, so w = 1 - 0.1 · 1/(1 + 1e-8)
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.param(id).value.item() - expect).abs() < 1e-15);
        assert_eq!(s.param(id).step(), 1);
        assert_eq!(s.param(id).grad.as_ref().unwrap().item(), 1.0);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut s, id) = scalar_store(0.37);
        for _ in 0..5 {
            set_grad(&mut s, id, 0.0);
            s.adamw_step(&AdamW::new(0.1, 0.0)).unwrap();
        }
        assert_eq!(s.param(id).value.item(), 0.37);
    }

    #[test]
    fn decay_only_step() {
        let (mut s, id) = scalar_store(2.0);
        set_grad(&mut s, id, 0.0);
        s.adamw_step(&AdamW::new(0.1, 0.1)).unwrap();
        assert!((s.param(id).value.item() - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_reported() {
        let (mut s, _) = scalar_store(1.0);
        assert!(matches!(s.adamw_step(&AdamW::new(0.1, 0.0)), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.get_or_insert("a", Shape::scalar(), || Tensor::scalar(1.0)).unwrap();
        let b = s.get_or_insert("b", Shape::scalar(), || Tensor::scalar(2.0)).unwrap();
        let a2 = s.get_or_insert("a", Shape::scalar(), || Tensor::scalar(9.0)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_eq!(s.param(a).value.item(), 1.0);
        let names: Vec<_> = s.params().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(s.get_or_insert("a", Shape::matrix(1, 2), || Tensor::zeros(Shape::matrix(1, 2))).is_err());
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let (mut s, id) = scalar_store(3.0);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = s.leaf(&mut tape, id);
            let sq = tape.mul(w, w).unwrap();
            let l = tape.sum(sq);
            tape.backward(l).unwrap();
            s.accumulate_grads(&tape);
        }
        assert_eq!(s.param(id).grad.as_ref().unwrap().item(), 12.0);
        s.zero_grads();
        assert!(s.param(id).grad.is_none());
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut s = ParamStore::new();
        let a = s.get_or_insert("a", Shape::scalar(), || Tensor::scalar(1.0)).unwrap();
        let b = s.get_or_insert("b", Shape::scalar(), || Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let av = s.leaf(&mut tape, a);
        let l = tape.sum(av);
        tape.backward(l).unwrap();
        s.accumulate_grads(&tape);
        assert_eq!(s.param(a).grad.as_ref().unwrap().item(), 1.0);
        assert_eq!(s.param(b).grad.as_ref().unwrap().item(), 0.0);
    }
}
