use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::truncated_normal;
use super::{Dropout, EncoderConfig, TransformerLayer};
use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{AttnMask, Parameters, Tape, Tensor, Var};

/// Token and learned absolute position embeddings (no embedding layer norm).
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub token: Tensor,
    pub position: Tensor,
}

impl Embeddings {
    /// `tokens` is row-major `[batch × seq]`, shaped by `mask`. Returns `[B, S, D]`.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize], mask: &AttnMask) -> Result<Var> {
        let (batch, seq) = (mask.batch(), mask.seq());
        if tokens.len() != batch * seq {
            return dim_err("embed", &[&[tokens.len()], &[batch, seq]]);
        }
        let max_seq = self.position.shape()[0];
        if seq > max_seq {
            return Err(Error::Config(format!(
                "sequence length {seq} exceeds max_seq_len {max_seq}"
            )));
        }
        let tok_table = tape.leaf(&self.token);
        let pos_table = tape.leaf(&self.position);
        let tok = tape.embedding(tok_table, tokens, &[batch, seq])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.embedding(pos_table, &positions, &[batch, seq])?;
        tape.add(tok, pos)
    }
}

impl Parameters for Embeddings {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token", &self.token);
        f("position", &self.position);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token", &mut self.token);
        f("position", &mut self.position);
    }
}

/// Linear classifier over the hidden state at position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn forward(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let pooled = tape.select_position(hidden, 0)?;
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let logits = tape.matmul(pooled, w)?;
        tape.add(logits, b)
    }
}

impl Parameters for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Embeddings, a stack of transformer layers, and a pooled classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<TransformerLayer>,
    pub head: ClassifierHead,
}

impl EncoderModel {
    /// Seeded init: truncated normal (std 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let token = Tensor::param(
            vec![config.vocab_size, d],
            truncated_normal(config.vocab_size * d, 0.02, &mut rng),
        )?;
        let position = Tensor::param(
            vec![config.max_seq_len, d],
            truncated_normal(config.max_seq_len * d, 0.02, &mut rng),
        )?;
        let layers = (0..config.n_layers)
            .map(|_| TransformerLayer::init(d, config.n_heads, config.d_ff, &mut rng))
            .collect();
        let weight = Tensor::param(
            vec![d, config.n_classes],
            truncated_normal(d * config.n_classes, 0.02, &mut rng),
        )?;
        let bias = Tensor::param(vec![config.n_classes], vec![0.0; config.n_classes])?;
        Ok(EncoderModel {
            config: config.clone(),
            embeddings: Embeddings { token, position },
            layers,
            head: ClassifierHead { weight, bias },
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Records the full forward pass and returns logits `[batch × n_classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        mask: &AttnMask,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let mut h = self.embeddings.forward(tape, tokens, mask)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, mask, dropout)?;
        }
        self.head.forward(tape, h)
    }

    /// Logits without gradient bookkeeping.
    pub fn logits(&self, tokens: &[usize], mask: &AttnMask) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, tokens, mask, &mut Dropout::off())?;
        Ok(tape.value(out).to_vec())
    }

    /// A new model made of a subset of this model's layers (embeddings and head copied).
    pub fn with_layers(&self, indices: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(indices.len());
        for &i in indices {
            let layer = self.layers.get(i).ok_or(Error::Index {
                what: "layer",
                index: i,
                bound: self.layers.len(),
            })?;
            layers.push(layer.clone());
        }
        Ok(EncoderModel {
            config: self.config.with_layers(indices.len()),
            embeddings: self.embeddings.clone(),
            layers,
            head: self.head.clone(),
        })
    }

    /// The bottom `k` layers with embeddings and head: the truncated-model baseline.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        self.with_layers(&(0..k).collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = vec![("kind".to_string(), "encoder".to_string())];
        header.extend(self.config.to_kv());
        let mut ck = Checkpoint::new(header);
        ck.push_params("", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header_value("kind") != Some("encoder") {
            return Err(Error::Format("checkpoint is not an encoder".into()));
        }
        let config = EncoderConfig::from_kv(&ck.header)?;
        let mut model = Self::init(&config, 0)?;
        ck.fill_params("", &mut model)?;
        if ck.tensors.len() != model.named_hashes().len() {
            return Err(Error::Format(
                "checkpoint has unexpected extra tensors".into(),
            ));
        }
        Ok(model)
    }
}

impl Parameters for EncoderModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embeddings
            .visit(&mut |n, t| f(&format!("embeddings.{n}"), t));
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
        self.head.visit(&mut |n, t| f(&format!("head.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embeddings
            .visit_mut(&mut |n, t| f(&format!("embeddings.{n}"), t));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
        self.head.visit_mut(&mut |n, t| f(&format!("head.{n}"), t));
    }
}

/// Analytic forward FLOPs for one example of length `seq_len`
/// (a multiply-add counts as two FLOPs):
///
/// ```text
/// per layer : 2·(4·s·d² + 2·s²·d + 2·s·d·d_ff)
///             Q/K/V/O projections, QKᵀ and PV, two FFN matmuls
/// embedding : s·d            token + position add
/// head      : 2·d·C + C      pooled position only
/// total     : n_layers·per_layer + embedding + head
/// ```
pub fn count_flops(config: &EncoderConfig, seq_len: usize) -> u64 {
    let s = seq_len as u64;
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    let c = config.n_classes as u64;
    let per_layer = 2 * (4 * s * d * d + 2 * s * s * d + 2 * s * d * ff);
    config.n_layers as u64 * per_layer + s * d + 2 * d * c + c
}

/// The per-layer part of [`count_flops`] alone.
pub fn layer_flops(config: &EncoderConfig, seq_len: usize) -> u64 {
    count_flops(config, seq_len) - count_flops(&config.with_layers(0), seq_len)
}
