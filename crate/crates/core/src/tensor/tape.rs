//! Wengert-list tape: ops append nodes during the forward pass; `backward`
//! replays them in reverse to accumulate vector-Jacobian products.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{gelu, gelu_grad, gemm, softmax_row, MatView};
use super::{Parameters, Tensor, TensorId};
use crate::error::{dim_err, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Key-padding mask for attention: `keep[b * seq + j]` is true when key `j`
/// of batch row `b` is a real token.
#[derive(Debug, Clone)]
pub struct AttnMask {
    batch: usize,
    seq: usize,
    keep: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn new(batch: usize, seq: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * seq {
            return dim_err("attn_mask", &[&[batch, seq], &[keep.len()]]);
        }
        Ok(AttnMask {
            batch,
            seq,
            keep: Arc::new(keep),
        })
    }

    /// Mask with every position real.
    pub fn full(batch: usize, seq: usize) -> Self {
        AttnMask {
            batch,
            seq,
            keep: Arc::new(vec![true; batch * seq]),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.seq..(b + 1) * self.seq]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: f64,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    Dropout {
        a: usize,
        factor: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    HeadScores {
        q: usize,
        k: usize,
        dims: AttnDims,
        scale: f64,
    },
    HeadMix {
        p: usize,
        v: usize,
        dims: AttnDims,
    },
    SelectPosition {
        x: usize,
        batch: usize,
        seq: usize,
        dim: usize,
        pos: usize,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

impl AttnDims {
    fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    leaf_of: Option<TensorId>,
    op: Op,
}

/// Records primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaves: HashMap<TensorId, usize>,
    check_finite: bool,
    differentiable: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: HashMap::new(),
            check_finite: false,
            differentiable: true,
        }
    }

    /// A tape for pure evaluation: leaves are bound as constants, so nothing
    /// on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            differentiable: false,
            ..Self::new()
        }
    }

    /// When enabled every op fails with [`Error::Numeric`] on NaN/Inf output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaves.clear();
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    /// Binds a tensor as a leaf. Binding the same tensor twice yields the same var.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if let Some(&idx) = self.leaves.get(&t.id()) {
            return Var { tape: self.id, idx };
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            requires_grad: self.differentiable && t.is_trainable(),
            leaf_of: Some(t.id()),
            op: Op::Leaf,
        });
        self.leaves.insert(t.id(), idx);
        Var { tape: self.id, idx }
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err("constant", &[&shape, &[data.len()]]);
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value: Arc::new(data),
            requires_grad: false,
            leaf_of: None,
            op: Op::Leaf,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        self.nodes
            .get(v.idx)
            .ok_or_else(|| Error::Tape(format!("variable {} not recorded", v.idx)))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).expect("var from this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).expect("var from this tape").shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Copies a recorded value out as a constant tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v).expect("var from this tape");
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("shape matches")
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[usize],
        op: Op,
    ) -> Result<Var> {
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            leaf_of: None,
            op,
        });
        Ok(Var { tape: self.id, idx })
    }

    /// `a[.., k] · b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return dim_err("matmul", &[&sa, &sb]);
        }
        let k = sb[0];
        let n = sb[1];
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.nodes[a.idx].value,
            MatView::row_major(0, k),
            &self.nodes[b.idx].value,
            MatView::row_major(0, n),
            0.0,
            &mut out,
            MatView::row_major(0, n),
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push(
            shape,
            out,
            &[a.idx, b.idx],
            Op::MatMul {
                a: a.idx,
                b: b.idx,
                m,
                k,
                n,
            },
        )
    }

    /// Elementwise sum. `b` may have a shape equal to a trailing suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        let broadcast = if sa == sb {
            false
        } else if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            true
        } else {
            return dim_err("add", &[&sa, &sb]);
        };
        let av = &self.nodes[a.idx].value;
        let bv = &self.nodes[b.idx].value;
        let out: Vec<f64> = if broadcast {
            let w = bv.len();
            av.iter().enumerate().map(|(i, x)| x + bv[i % w]).collect()
        } else {
            av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
        };
        self.push(
            sa,
            out,
            &[a.idx, b.idx],
            Op::Add {
                a: a.idx,
                b: b.idx,
                broadcast,
            },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa != sb {
            return dim_err("mul", &[&sa, &sb]);
        }
        let out = self.nodes[a.idx]
            .value
            .iter()
            .zip(self.nodes[b.idx].value.iter())
            .map(|(x, y)| x * y)
            .collect();
        self.push(sa, out, &[a.idx, b.idx], Op::Mul { a: a.idx, b: b.idx })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.nodes[a.idx].value.iter().map(|x| x * s).collect();
        self.push(shape, out, &[a.idx], Op::Scale { a: a.idx, s })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.nodes[a.idx].value.iter().map(|&x| gelu(x)).collect();
        self.push(shape, out, &[a.idx], Op::Gelu { a: a.idx })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis of attention logits `[batch, .., seq]`
    /// where padded keys get -inf logits.
    pub fn masked_softmax(&mut self, a: Var, mask: &AttnMask) -> Result<Var> {
        self.softmax_impl(a, Some(mask.clone()))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<AttnMask>) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let cols = match shape.last() {
            Some(&c) if c > 0 => c,
            _ => return dim_err("softmax", &[&shape]),
        };
        let mut out = self.nodes[a.idx].value.as_ref().clone();
        let rows = out.len() / cols;
        let rows_per_batch = match &mask {
            Some(m) => {
                if shape.len() < 2 || shape[0] != m.batch || cols != m.seq {
                    return dim_err("masked_softmax", &[&shape, &[m.batch, m.seq]]);
                }
                rows / m.batch
            }
            None => rows.max(1),
        };
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let keep = mask.as_ref().map(|m| m.row(r / rows_per_batch));
            softmax_row(row, keep);
        }
        self.push(shape, out, &[a.idx], Op::Softmax { a: a.idx, cols })
    }

    /// Normalizes the last axis with population variance, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.node(x)?.shape.clone();
        let (sg, sb) = (
            self.node(gain)?.shape.clone(),
            self.node(bias)?.shape.clone(),
        );
        let cols = match sx.last() {
            Some(&c) if c > 0 => c,
            _ => return dim_err("layer_norm", &[&sx, &sg, &sb]),
        };
        if sg != [cols] || sb != [cols] {
            return dim_err("layer_norm", &[&sx, &sg, &sb]);
        }
        let xv = &self.nodes[x.idx].value;
        let g = &self.nodes[gain.idx].value;
        let b = &self.nodes[bias.idx].value;
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        self.push(
            sx,
            out,
            &[x.idx, gain.idx, bias.idx],
            Op::LayerNorm {
                x: x.idx,
                gain: gain.idx,
                bias: bias.idx,
                cols,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of `table[V, d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.node(table)?.shape.clone();
        if st.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return dim_err("embedding_lookup", &[&st, lead, &[ids.len()]]);
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let tv = &self.nodes[table.idx].value;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = lead.to_vec();
        shape.push(dim);
        self.push(
            shape,
            out,
            &[table.idx],
            Op::Embedding {
                table: table.idx,
                ids: ids.to_vec(),
                dim,
            },
        )
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_rows", &[]);
        }
        let first = self.node(parts[0])?.shape.clone();
        if first.is_empty() {
            return dim_err("concat_rows", &[&first]);
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = &self.node(p)?.shape;
            if s.len() != first.len() || s[1..] != first[1..] {
                return dim_err("concat_rows", &[&first, s]);
            }
            rows += s[0];
            out.extend_from_slice(&self.nodes[p.idx].value);
        }
        let mut shape = first;
        shape[0] = rows;
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        self.push(
            shape,
            out,
            &idxs,
            Op::ConcatRows {
                parts: idxs.clone(),
            },
        )
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        if keep.len() != self.nodes[a.idx].value.len() {
            return dim_err("dropout", &[&shape, &[keep.len()]]);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        let inv = 1.0 / (1.0 - rate);
        let factor: Vec<f64> = keep.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let out = self.nodes[a.idx]
            .value
            .iter()
            .zip(&factor)
            .map(|(x, f)| x * f)
            .collect();
        self.push(shape, out, &[a.idx], Op::Dropout { a: a.idx, factor })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let sa = self.node(a)?.shape.clone();
        if shape.iter().product::<usize>() != self.nodes[a.idx].value.len() {
            return dim_err("reshape", &[&sa, &shape]);
        }
        let out = self.nodes[a.idx].value.as_ref().clone();
        self.push(shape, out, &[a.idx], Op::Reshape { a: a.idx })
    }

    fn attn_dims(&self, x: Var, heads: usize, op: &'static str) -> Result<AttnDims> {
        let s = &self.node(x)?.shape;
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return dim_err(op, &[s, &[heads]]);
        }
        Ok(AttnDims {
            batch: s[0],
            seq: s[1],
            heads,
            head_dim: s[2] / heads,
        })
    }

    /// Per-head attention logits: `q, k [B, S, D] -> [B, H, S, S]`, scaled.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let dims = self.attn_dims(q, heads, "head_scores")?;
        if self.node(k)?.shape != self.node(q)?.shape {
            return dim_err(
                "head_scores",
                &[&self.nodes[q.idx].shape, &self.nodes[k.idx].shape],
            );
        }
        let AttnDims {
            batch,
            seq,
            heads,
            head_dim,
        } = dims;
        let d = dims.model_dim();
        let mut out = vec![0.0; batch * heads * seq * seq];
        let (qv, kv) = (&self.nodes[q.idx].value, &self.nodes[k.idx].value);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * head_dim;
                gemm(
                    seq,
                    head_dim,
                    seq,
                    scale,
                    qv,
                    MatView {
                        offset: base,
                        rs: d,
                        cs: 1,
                    },
                    kv,
                    MatView {
                        offset: base,
                        rs: 1,
                        cs: d,
                    },
                    0.0,
                    &mut out,
                    MatView::row_major((b * heads + h) * seq * seq, seq),
                );
            }
        }
        self.push(
            vec![batch, heads, seq, seq],
            out,
            &[q.idx, k.idx],
            Op::HeadScores {
                q: q.idx,
                k: k.idx,
                dims,
                scale,
            },
        )
    }

    /// Per-head weighted sum of values: `p [B, H, S, S], v [B, S, D] -> [B, S, D]`.
    pub fn head_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let dims = self.attn_dims(v, heads, "head_mix")?;
        let AttnDims {
            batch,
            seq,
            heads,
            head_dim,
        } = dims;
        if self.node(p)?.shape != [batch, heads, seq, seq] {
            return dim_err(
                "head_mix",
                &[&self.nodes[p.idx].shape, &self.nodes[v.idx].shape],
            );
        }
        let d = dims.model_dim();
        let mut out = vec![0.0; batch * seq * d];
        let (pv, vv) = (&self.nodes[p.idx].value, &self.nodes[v.idx].value);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * head_dim;
                gemm(
                    seq,
                    seq,
                    head_dim,
                    1.0,
                    pv,
                    MatView::row_major((b * heads + h) * seq * seq, seq),
                    vv,
                    MatView {
                        offset: base,
                        rs: d,
                        cs: 1,
                    },
                    0.0,
                    &mut out,
                    MatView {
                        offset: base,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        self.push(
            vec![batch, seq, d],
            out,
            &[p.idx, v.idx],
            Op::HeadMix {
                p: p.idx,
                v: v.idx,
                dims,
            },
        )
    }

    /// `x [B, S, D] -> x[:, pos, :]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let s = self.node(x)?.shape.clone();
        if s.len() != 3 || pos >= s[1] {
            return dim_err("select_position", &[&s, &[pos]]);
        }
        let (batch, seq, dim) = (s[0], s[1], s[2]);
        let xv = &self.nodes[x.idx].value;
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let off = (b * seq + pos) * dim;
            out.extend_from_slice(&xv[off..off + dim]);
        }
        self.push(
            vec![batch, dim],
            out,
            &[x.idx],
            Op::SelectPosition {
                x: x.idx,
                batch,
                seq,
                dim,
                pos,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.iter().sum();
        self.push(vec![], vec![total], &[a.idx], Op::Sum { a: a.idx })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.node(logits)?.shape.clone();
        if s.len() != 2 || s[0] == 0 || s[0] != labels.len() || s[1] == 0 {
            return dim_err("cross_entropy", &[&s, &[labels.len()]]);
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: classes,
            });
        }
        let mut probs = self.nodes[logits.idx].value.as_ref().clone();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= batch as f64;
        self.push(
            vec![],
            vec![loss],
            &[logits.idx],
            Op::CrossEntropy {
                logits: logits.idx,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.idx] = Some(vec![1.0]);
        }
        for idx in (0..=loss.idx).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        let mut by_tensor = HashMap::new();
        for (idx, n) in self.nodes.iter().enumerate() {
            if let (Some(id), true) = (n.leaf_of, n.requires_grad) {
                by_tensor.insert(id, idx);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            by_tensor,
        })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| -> &[f64] { &nodes[i].value };
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                grads[$i].get_or_insert_with(|| vec![0.0; nodes[$i].value.len()])
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    let ga = acc!(a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        MatView::row_major(0, n),
                        val(b),
                        MatView::transposed(0, n),
                        1.0,
                        ga,
                        MatView::row_major(0, k),
                    );
                }
                if wants(b) {
                    let gb = acc!(b);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        val(a),
                        MatView::transposed(0, k),
                        g,
                        MatView::row_major(0, n),
                        1.0,
                        gb,
                        MatView::row_major(0, n),
                    );
                }
            }
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    for (x, y) in acc!(*a).iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    if *broadcast {
                        let w = gb.len();
                        for (i, y) in g.iter().enumerate() {
                            gb[i % w] += y;
                        }
                    } else {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let other = val(*b);
                    for ((x, y), o) in acc!(*a).iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a);
                    for ((x, y), o) in acc!(*b).iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    for (x, y) in acc!(*a).iter_mut().zip(g) {
                        *x += y * s;
                    }
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let input = val(*a);
                    for ((x, y), v) in acc!(*a).iter_mut().zip(g).zip(input) {
                        *x += y * gelu_grad(*v);
                    }
                }
            }
            Op::Softmax { a, cols } => {
                if wants(*a) {
                    let y = val(idx);
                    let ga = acc!(*a);
                    for ((gr, yr), out) in g
                        .chunks(*cols)
                        .zip(y.chunks(*cols))
                        .zip(ga.chunks_mut(*cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                        for j in 0..*cols {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = val(*gain);
                if wants(*x) {
                    let gx = acc!(*x);
                    let nf = cols as f64;
                    for (r, rs) in rstd.iter().enumerate() {
                        let row = r * cols..(r + 1) * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = g[row.start + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[row.start + j];
                        }
                        for j in 0..cols {
                            let i = row.start + j;
                            let d = g[i] * gv[j];
                            gx[i] += rs / nf * (nf * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = acc!(*gain);
                    for (i, (y, h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % cols] += y * h;
                    }
                }
                if wants(*bias) {
                    let gb = acc!(*bias);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % cols] += y;
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if wants(*table) {
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..*dim {
                            gt[id * dim + j] += g[r * dim + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if wants(p) {
                        for (x, y) in acc!(p).iter_mut().zip(&g[off..off + len]) {
                            *x += y;
                        }
                    }
                    off += len;
                }
            }
            Op::Dropout { a, factor } => {
                if wants(*a) {
                    for ((x, y), f) in acc!(*a).iter_mut().zip(g).zip(factor) {
                        *x += y * f;
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    for (x, y) in acc!(*a).iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::HeadScores { q, k, dims, scale } => {
                let AttnDims {
                    batch,
                    seq,
                    heads,
                    head_dim,
                } = *dims;
                let d = dims.model_dim();
                for (is_q, target, other) in [(true, *q, *k), (false, *k, *q)] {
                    if !wants(target) {
                        continue;
                    }
                    let ov = val(other);
                    let gt = acc!(target);
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = b * seq * d + h * head_dim;
                            let goff = (b * heads + h) * seq * seq;
                            // dQ = dS·K ; dK = dS^T·Q
                            let gview = if is_q {
                                MatView::row_major(goff, seq)
                            } else {
                                MatView::transposed(goff, seq)
                            };
                            gemm(
                                seq,
                                seq,
                                head_dim,
                                *scale,
                                g,
                                gview,
                                ov,
                                MatView {
                                    offset: base,
                                    rs: d,
                                    cs: 1,
                                },
                                1.0,
                                gt,
                                MatView {
                                    offset: base,
                                    rs: d,
                                    cs: 1,
                                },
                            );
                        }
                    }
                }
            }
            Op::HeadMix { p, v, dims } => {
                let AttnDims {
                    batch,
                    seq,
                    heads,
                    head_dim,
                } = *dims;
                let d = dims.model_dim();
                if wants(*p) {
                    let vv = val(*v);
                    let gp = acc!(*p);
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = b * seq * d + h * head_dim;
                            gemm(
                                seq,
                                head_dim,
                                seq,
                                1.0,
                                g,
                                MatView {
                                    offset: base,
                                    rs: d,
                                    cs: 1,
                                },
                                vv,
                                MatView {
                                    offset: base,
                                    rs: 1,
                                    cs: d,
                                },
                                1.0,
                                gp,
                                MatView::row_major((b * heads + h) * seq * seq, seq),
                            );
                        }
                    }
                }
                if wants(*v) {
                    let pv = val(*p);
                    let gv = acc!(*v);
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = b * seq * d + h * head_dim;
                            gemm(
                                seq,
                                seq,
                                head_dim,
                                1.0,
                                pv,
                                MatView::transposed((b * heads + h) * seq * seq, seq),
                                g,
                                MatView {
                                    offset: base,
                                    rs: d,
                                    cs: 1,
                                },
                                1.0,
                                gv,
                                MatView {
                                    offset: base,
                                    rs: d,
                                    cs: 1,
                                },
                            );
                        }
                    }
                }
            }
            Op::SelectPosition {
                x,
                batch,
                seq,
                dim,
                pos,
            } => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for b in 0..*batch {
                        let off = (b * seq + pos) * dim;
                        for j in 0..*dim {
                            gx[off + j] += g[b * dim + j];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    for x in acc!(*a).iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                if wants(*logits) {
                    let scale = g[0] / labels.len() as f64;
                    let gl = acc!(*logits);
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..*classes {
                            let i = r * classes + c;
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            gl[i] += scale * (probs[i] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Gelu { .. } => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding_lookup",
        Op::ConcatRows { .. } => "concat_rows",
        Op::Dropout { .. } => "dropout",
        Op::Reshape { .. } => "reshape",
        Op::HeadScores { .. } => "head_scores",
        Op::HeadMix { .. } => "head_mix",
        Op::SelectPosition { .. } => "select_position",
        Op::Sum { .. } => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    by_tensor: HashMap<TensorId, usize>,
}

impl Gradients {
    /// Gradient w.r.t. a recorded var, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient for a bound tensor; `None` for frozen, constant, or unreached tensors.
    pub fn for_tensor(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_tensor
            .get(&t.id())
            .and_then(|&i| self.grads[i].as_deref())
    }

    /// Adds this sweep's gradient into the tensor's grad buffer.
    pub fn deposit(&self, t: &mut Tensor) {
        if let Some(&i) = self.by_tensor.get(&t.id()) {
            if let Some(g) = &self.grads[i] {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn deposit_all<P: Parameters + ?Sized>(&self, params: &mut P) {
        params.visit_mut(&mut |_, t| self.deposit(t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        match t.matmul(a, b) {
            Err(Error::Dimension { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let a = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let s = t.softmax(a).unwrap();
        assert!(close(t.value(s), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn layer_norm_hand_value() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let g = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let b = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        // mean 4, population var 8/3
        let s = (8.0f64 / 3.0 + 1e-5).sqrt();
        assert!(close(t.value(y), &[-2.0 / s, 0.0, 2.0 / s], 1e-12));
        assert!(close(t.value(y), &[-1.2247, 0.0, 1.2247], 1e-4));
    }

    #[test]
    fn cross_entropy_examples() {
        let cases: [(Vec<f64>, usize, f64, f64); 3] = [
            (vec![10.0, -10.0], 0, 0.0, 1e-8),
            (vec![0.0, 0.0], 1, std::f64::consts::LN_2, 1e-12),
            (vec![1.0, 2.0, 3.0], 2, 0.407_605_96, 1e-8),
        ];
        for (logits, label, want, tol) in cases {
            let mut t = Tape::new();
            let l = t.constant(vec![1, logits.len()], logits).unwrap();
            let ce = t.cross_entropy(l, &[label]).unwrap();
            assert!(
                (t.value(ce)[0] - want).abs() < tol,
                "got {}",
                t.value(ce)[0]
            );
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let l = t.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.cross_entropy(l, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn frozen_weight_passes_gradient_through() {
        let mut w = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        w.set_frozen(true);
        let mut x = Tensor::param(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let mut t = Tape::new();
        let (wv, xv) = (t.leaf(&w), t.leaf(&x));
        let p = t.mul(wv, xv).unwrap();
        let loss = t.sum(p).unwrap();
        assert_eq!(t.value(loss), &[32.0]);
        let grads = t.backward(loss).unwrap();
        x.zero_grad();
        w.zero_grad();
        grads.deposit(&mut x);
        grads.deposit(&mut w);
        assert_eq!(x.grad().unwrap(), &[1.0, 2.0, 3.0]);
        assert!(w.grad().is_none());
    }

    #[test]
    fn unrelated_tensor_gets_zero_grad() {
        let mut x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let mut other = Tensor::param(vec![2], vec![7.0, 8.0]).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let _ov = t.leaf(&other);
        let loss = t.sum(xv).unwrap();
        let grads = t.backward(loss).unwrap();
        x.zero_grad();
        other.zero_grad();
        grads.deposit_all(&mut [&mut x, &mut other][..]);
        assert_eq!(other.grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(x.grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(vec![], vec![1.0]).unwrap();
        let _ = t2.constant(vec![], vec![1.0]).unwrap();
        assert!(matches!(t2.backward(a), Err(Error::Tape(_))));
    }

    #[test]
    fn finite_check_flags_overflow() {
        let mut t = Tape::new().with_finite_check(true);
        let a = t.constant(vec![1], vec![1e300]).unwrap();
        assert!(matches!(t.scale(a, 1e300), Err(Error::Numeric(_))));
    }

    #[test]
    fn concat_rows_stacks() {
        let mut t = Tape::new();
        let a = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[3, 2]);
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut t = Tape::new();
        let a = t.constant(vec![4], vec![1.0; 4]).unwrap();
        let d = t.dropout(a, &[true, false, true, false], 0.5).unwrap();
        assert_eq!(t.value(d), &[2.0, 0.0, 2.0, 0.0]);
    }
}
