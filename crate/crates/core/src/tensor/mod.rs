//! Dense f64 tensors and the reverse-mode tape that differentiates them.
//!
//! A [`Tensor`] is a parameter or constant owned by a model. Its payload sits
//! behind an `Arc`, so binding it onto a [`Tape`] is free and cloning a model
//! is copy-on-write. Every tensor carries a process-unique [`TensorId`]; a
//! clone receives a fresh id, which makes a cloned model a distinct set of
//! parameters as far as gradient routing is concerned.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_model, GradCheckReport};
pub use tape::{AttnMask, Gradients, Tape, Var};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    frozen: bool,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            frozen: self.frozen,
        }
    }
}

impl PartialEq for Tensor {
    /// Value equality: shape and payload bits. Identity and grad state are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Tensor {
    /// Builds a constant (non-differentiable) tensor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                shapes: vec![shape, vec![data.len()]],
            });
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
            frozen: false,
        })
    }

    /// Builds a trainable parameter.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("numel matches by construction")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![], vec![v]).expect("scalar")
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the payload. Copies first if the buffer is shared.
    ///
    /// Panics on a frozen tensor: frozen payloads are immutable.
    pub fn data_mut(&mut self) -> &mut [f64] {
        assert!(!self.frozen, "attempted to mutate a frozen tensor");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing drops any grad buffer; a frozen tensor never owns one.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            self.grad = None;
        }
    }

    /// True when backward should deliver a gradient into this tensor.
    pub fn is_trainable(&self) -> bool {
        self.requires_grad && !self.frozen
    }

    /// Resets the grad buffer to zeros (allocating it) for trainable tensors.
    pub fn zero_grad(&mut self) {
        if self.is_trainable() {
            match &mut self.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => self.grad = Some(vec![0.0; self.data.len()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.is_trainable() {
            return;
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    /// SHA-256 over shape and little-endian payload bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.shape.len() as u64).to_le_bytes());
        for &e in &self.shape {
            h.update((e as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Anything that owns an ordered, named set of tensors.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut(&mut |_, t| t.set_frozen(frozen));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn named_hashes(&self) -> Vec<(String, [u8; 32])> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.content_hash())));
        out
    }
}

impl Parameters for [&mut Tensor] {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(&i.to_string(), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&i.to_string(), t);
        }
    }
}
