use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::init::truncated_normal;
use crate::error::{dim_err, Result};
use crate::tensor::{AttnMask, Parameters, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inverted dropout applied after the attention and feed-forward outputs.
/// `Dropout::off()` is the identity and records nothing.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        if rate <= 0.0 {
            return Self::off();
        }
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.rng {
            None => Ok(x),
            Some(rng) => {
                let n = tape.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= self.rate).collect();
                tape.dropout(x, &keep, self.rate)
            }
        }
    }
}

/// Post-layer-norm transformer encoder block. The key projection has no
/// bias: softmax is invariant to it, so its gradient is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub n_heads: usize,
}

impl TransformerLayer {
    pub fn init(d_model: usize, n_heads: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::param(vec![rows, cols], truncated_normal(rows * cols, 0.02, rng))
                .expect("shape")
        };
        let zeros = |n: usize| Tensor::param(vec![n], vec![0.0; n]).expect("shape");
        let ones = |n: usize| Tensor::param(vec![n], vec![1.0; n]).expect("shape");
        TransformerLayer {
            wq: w(d_model, d_model, rng),
            bq: zeros(d_model),
            wk: w(d_model, d_model, rng),
            wv: w(d_model, d_model, rng),
            bv: zeros(d_model),
            wo: w(d_model, d_model, rng),
            bo: zeros(d_model),
            ln1_gain: ones(d_model),
            ln1_bias: zeros(d_model),
            ff_in: w(d_model, d_ff, rng),
            ff_in_bias: zeros(d_ff),
            ff_out: w(d_ff, d_model, rng),
            ff_out_bias: zeros(d_model),
            ln2_gain: ones(d_model),
            ln2_bias: zeros(d_model),
            n_heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    /// `LN(x + MHA(x))` followed by `LN(h + FFN(h))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mask: &AttnMask,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = self.d_model();
        if shape.len() != 3 || shape[2] != d || shape[0] != mask.batch() || shape[1] != mask.seq() {
            return dim_err("layer_forward", &[&shape, &[mask.batch(), mask.seq(), d]]);
        }
        let head_dim = d / self.n_heads;

        let q = affine(tape, x, &self.wq, &self.bq)?;
        let wk = tape.leaf(&self.wk);
        let k = tape.matmul(x, wk)?;
        let v = affine(tape, x, &self.wv, &self.bv)?;
        let scores = tape.head_scores(q, k, self.n_heads, 1.0 / (head_dim as f64).sqrt())?;
        let probs = tape.masked_softmax(scores, mask)?;
        let ctx = tape.head_mix(probs, v, self.n_heads)?;
        let attn = affine(tape, ctx, &self.wo, &self.bo)?;
        let attn = dropout.apply(tape, attn)?;
        let res1 = tape.add(x, attn)?;
        let (g1, b1) = (tape.leaf(&self.ln1_gain), tape.leaf(&self.ln1_bias));
        let h = tape.layer_norm(res1, g1, b1, LAYER_NORM_EPS)?;

        let inner = affine(tape, h, &self.ff_in, &self.ff_in_bias)?;
        let inner = tape.gelu(inner)?;
        let ff = affine(tape, inner, &self.ff_out, &self.ff_out_bias)?;
        let ff = dropout.apply(tape, ff)?;
        let res2 = tape.add(h, ff)?;
        let (g2, b2) = (tape.leaf(&self.ln2_gain), tape.leaf(&self.ln2_bias));
        tape.layer_norm(res2, g2, b2, LAYER_NORM_EPS)
    }
}

fn affine(tape: &mut Tape, x: Var, w: &Tensor, b: &Tensor) -> Result<Var> {
    let wv = tape.leaf(w);
    let bv = tape.leaf(b);
    let y = tape.matmul(x, wv)?;
    tape.add(y, bv)
}

impl Parameters for TransformerLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("attn.wq", &self.wq);
        f("attn.bq", &self.bq);
        f("attn.wk", &self.wk);
        f("attn.wv", &self.wv);
        f("attn.bv", &self.bv);
        f("attn.wo", &self.wo);
        f("attn.bo", &self.bo);
        f("ln1.gain", &self.ln1_gain);
        f("ln1.bias", &self.ln1_bias);
        f("ffn.w_in", &self.ff_in);
        f("ffn.b_in", &self.ff_in_bias);
        f("ffn.w_out", &self.ff_out);
        f("ffn.b_out", &self.ff_out_bias);
        f("ln2.gain", &self.ln2_gain);
        f("ln2.bias", &self.ln2_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("attn.wq", &mut self.wq);
        f("attn.bq", &mut self.bq);
        f("attn.wk", &mut self.wk);
        f("attn.wv", &mut self.wv);
        f("attn.bv", &mut self.bv);
        f("attn.wo", &mut self.wo);
        f("attn.bo", &mut self.bo);
        f("ln1.gain", &mut self.ln1_gain);
        f("ln1.bias", &mut self.ln1_bias);
        f("ffn.w_in", &mut self.ff_in);
        f("ffn.b_in", &mut self.ff_in_bias);
        f("ffn.w_out", &mut self.ff_out);
        f("ffn.b_out", &mut self.ff_out_bias);
        f("ln2.gain", &mut self.ln2_gain);
        f("ln2.bias", &mut self.ln2_bias);
    }
}
