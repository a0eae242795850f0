//! Define-by-run reverse-mode differentiation over a flat tape.
//!
//! Node values live in one contiguous arena and adjoints in a second one
//! sharing the same offsets, so a training loop can reset and reuse the
//! tape without reallocating. Node ids index the tape in topological order
//! (ops only reference earlier nodes); backward is a single reverse sweep
//! that visits each node exactly once.
//!
//! Attention gets two fused ops: `sdpa_weights` produces the softmaxed
//! attention matrix over a list of key blocks (memory blocks first, input
//! block last) without materializing transposes or logits, and
//! `weighted_sum_parts` applies those weights to the matching value blocks.
//! Both differentiate like their composed equivalents.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};

pub type NodeId = usize;

/// A contiguous row window of a node: (node, first row, row count).
pub type Part = (NodeId, usize, usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input with gradient (parameters, checked inputs).
    Leaf,
    /// Input without gradient (data, installed prototypes).
    Constant,
    /// Identity forward, blocks backward.
    StopGrad { x: NodeId },
    Add { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// [p x q] plus a length-q row broadcast over all rows.
    AddRowBroadcast { a: NodeId, row: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Relu { a: NodeId },
    SumAll { a: NodeId },
    /// Mean negative log-softmax probability over non-ignored rows.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore: Option<usize>,
        kept: usize,
    },
    /// Row gather from an embedding table.
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    /// softmax(q . [keys]^T * scale + mask_bias): the attention matrix over
    /// concatenated key blocks, fused. Every operand is a row range of its
    /// node so callers can window batched projections without slice nodes.
    SdpaWeights {
        q: Part,
        keys: Vec<Part>,
        scale: f64,
    },
    /// weights . vstack(values) without materializing the stack.
    WeightedSumParts { w: NodeId, values: Vec<Part> },
}

#[derive(Debug, Clone, Copy)]
struct NodeMeta {
    rows: usize,
    cols: usize,
    offset: usize,
    /// Rank 1 tensors print and convert back as vectors.
    is_vector: bool,
}

impl NodeMeta {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Borrowed view of one node's value.
#[derive(Debug, Clone, Copy)]
pub struct ValueView<'a> {
    rows: usize,
    cols: usize,
    is_vector: bool,
    data: &'a [f64],
}

impl<'a> ValueView<'a> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.is_vector {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.data.to_vec()).expect("view is consistent")
    }
}

#[derive(Default)]
pub struct Tape {
    data: Vec<f64>,
    adj: Vec<f64>,
    metas: Vec<NodeMeta>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all nodes but keep allocations for reuse.
    pub fn reset(&mut self) {
        self.data.clear();
        self.adj.clear();
        self.metas.clear();
        self.ops.clear();
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ValueView<'_> {
        let m = self.metas[id];
        ValueView {
            rows: m.rows,
            cols: m.cols,
            is_vector: m.is_vector,
            data: &self.data[m.offset..m.offset + m.numel()],
        }
    }

    /// Borrowed adjoint of a node after `backward`.
    pub fn grad_view(&self, id: NodeId) -> &[f64] {
        let m = self.metas[id];
        assert!(
            self.adj.len() >= m.offset + m.numel(),
            "grad_view() before backward()"
        );
        &self.adj[m.offset..m.offset + m.numel()]
    }

    /// Adjoint of a node after `backward`; same shape as its value.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let m = self.metas[id];
        assert!(
            self.adj.len() >= m.offset + m.numel(),
            "grad() before backward()"
        );
        let data = self.adj[m.offset..m.offset + m.numel()].to_vec();
        Tensor::new(self.value(id).shape(), data).expect("adjoint matches value shape")
    }

    /// Reserve an output region and fill it with `f`, which sees the arena
    /// prefix holding every earlier node.
    fn push_with(
        &mut self,
        rows: usize,
        cols: usize,
        is_vector: bool,
        op: Op,
        f: impl FnOnce(&[f64], &mut [f64]),
    ) -> NodeId {
        let offset = self.data.len();
        let numel = rows * cols;
        self.data.resize(offset + numel, 0.0);
        let (head, out) = self.data.split_at_mut(offset);
        f(head, out);
        self.metas.push(NodeMeta {
            rows,
            cols,
            offset,
            is_vector,
        });
        self.ops.push(op);
        self.metas.len() - 1
    }

    fn push_tensor(&mut self, value: &Tensor, op: Op) -> NodeId {
        let (rows, cols, is_vector) = match value.shape() {
            [n] => (1, *n, true),
            [r, c] => (*r, *c, false),
            other => panic!("tape supports rank 1 and 2 tensors, got {other:?}"),
        };
        self.push_with(rows, cols, is_vector, op, |_, out| {
            out.copy_from_slice(value.data())
        })
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_tensor(&value, Op::Leaf)
    }

    pub fn leaf_ref(&mut self, value: &Tensor) -> NodeId {
        self.push_tensor(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_tensor(&value, Op::Constant)
    }

    pub fn constant_ref(&mut self, value: &Tensor) -> NodeId {
        self.push_tensor(value, Op::Constant)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let m = self.metas[x];
        self.push_with(m.rows, m.cols, m.is_vector, Op::StopGrad { x }, |head, out| {
            out.copy_from_slice(&head[m.offset..m.offset + m.numel()]);
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (self.metas[a], self.metas[b]);
        if ma.rows != mb.rows || ma.cols != mb.cols {
            return Err(Error::DimMismatch {
                op: "add",
                left: self.value(a).shape(),
                right: self.value(b).shape(),
            });
        }
        Ok(self.push_with(ma.rows, ma.cols, ma.is_vector, Op::Add { a, b }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            let y = &head[mb.offset..mb.offset + mb.numel()];
            for ((o, &xv), &yv) in out.iter_mut().zip(x).zip(y) {
                *o = xv + yv;
            }
        }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (self.metas[a], self.metas[b]);
        if ma.rows != mb.rows || ma.cols != mb.cols {
            return Err(Error::DimMismatch {
                op: "mul_elem",
                left: self.value(a).shape(),
                right: self.value(b).shape(),
            });
        }
        Ok(
            self.push_with(ma.rows, ma.cols, ma.is_vector, Op::MulElem { a, b }, |head, out| {
                let x = &head[ma.offset..ma.offset + ma.numel()];
                let y = &head[mb.offset..mb.offset + mb.numel()];
                for ((o, &xv), &yv) in out.iter_mut().zip(x).zip(y) {
                    *o = xv * yv;
                }
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ma = self.metas[a];
        self.push_with(ma.rows, ma.cols, ma.is_vector, Op::Scale { a, c }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            for (o, &xv) in out.iter_mut().zip(x) {
                *o = xv * c;
            }
        })
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ma, mr) = (self.metas[a], self.metas[row]);
        if mr.numel() != ma.cols {
            return Err(Error::DimMismatch {
                op: "add_row_broadcast",
                left: self.value(a).shape(),
                right: self.value(row).shape(),
            });
        }
        Ok(self.push_with(
            ma.rows,
            ma.cols,
            ma.is_vector,
            Op::AddRowBroadcast { a, row },
            |head, out| {
                let x = &head[ma.offset..ma.offset + ma.numel()];
                let r = &head[mr.offset..mr.offset + mr.numel()];
                for (chunk, xchunk) in out.chunks_mut(ma.cols).zip(x.chunks(ma.cols)) {
                    for ((o, &xv), &rv) in chunk.iter_mut().zip(xchunk).zip(r) {
                        *o = xv + rv;
                    }
                }
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (self.metas[a], self.metas[b]);
        if ma.cols != mb.rows {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: self.value(a).shape(),
                right: self.value(b).shape(),
            });
        }
        let (p, q, r) = (ma.rows, ma.cols, mb.cols);
        Ok(self.push_with(p, r, false, Op::Matmul { a, b }, |head, out| {
            tensor::matmul_raw(
                &head[ma.offset..ma.offset + ma.numel()],
                &head[mb.offset..mb.offset + mb.numel()],
                p,
                q,
                r,
                out,
            );
        }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ma = self.metas[a];
        let (p, q) = (ma.rows, ma.cols);
        self.push_with(q, p, false, Op::Transpose { a }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            for i in 0..p {
                for j in 0..q {
                    out[j * p + i] = x[i * q + j];
                }
            }
        })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ma = self.metas[a];
        self.push_with(ma.rows, ma.cols, ma.is_vector, Op::SoftmaxRows { a }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            tensor::softmax_rows_raw(x, ma.cols, out);
        })
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (mx, mg, mb) = (self.metas[x], self.metas[gain], self.metas[bias]);
        if mg.numel() != mx.cols || mb.numel() != mx.cols {
            return Err(Error::DimMismatch {
                op: "layer_norm",
                left: self.value(x).shape(),
                right: self.value(gain).shape(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let d = mx.cols;
        Ok(self.push_with(
            mx.rows,
            mx.cols,
            mx.is_vector,
            Op::LayerNorm { x, gain, bias, eps },
            |head, out| {
                let xs = &head[mx.offset..mx.offset + mx.numel()];
                let g = &head[mg.offset..mg.offset + d];
                let b = &head[mb.offset..mb.offset + d];
                for (orow, xrow) in out.chunks_mut(d).zip(xs.chunks(d)) {
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var =
                        xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        orow[j] = (xrow[j] - mean) * inv * g[j] + b[j];
                    }
                }
            },
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ma = self.metas[a];
        self.push_with(ma.rows, ma.cols, ma.is_vector, Op::Relu { a }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            for (o, &xv) in out.iter_mut().zip(x) {
                *o = xv.max(0.0);
            }
        })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ma = self.metas[a];
        self.push_with(1, 1, true, Op::SumAll { a }, |head, out| {
            out[0] = head[ma.offset..ma.offset + ma.numel()].iter().sum();
        })
    }

    /// Mean negative log-softmax probability of `targets` over rows whose
    /// target is not the ignore index. Targets must lie in [0, cols).
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let ml = self.metas[logits];
        let (p, cols) = (ml.rows, ml.cols);
        if targets.len() != p {
            return Err(Error::DimMismatch {
                op: "cross_entropy",
                left: self.value(logits).shape(),
                right: vec![targets.len()],
            });
        }
        let mut kept = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= cols {
                return Err(Error::Index(format!(
                    "cross_entropy target {t} out of range for {cols} classes (row {i})"
                )));
            }
            kept += 1;
        }
        if kept == 0 {
            return Err(Error::contract(
                "cross_entropy: every position carries the ignore index",
            ));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            kept,
        };
        let targets = targets.to_vec();
        Ok(self.push_with(1, 1, true, op, |head, out| {
            let x = &head[ml.offset..ml.offset + ml.numel()];
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if Some(t) == ignore {
                    continue;
                }
                let row = &x[i * cols..(i + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            out[0] = total / kept as f64;
        }))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let mt = self.metas[table];
        let (n, d) = (mt.rows, mt.cols);
        for &id in ids {
            if id >= n {
                return Err(Error::Index(format!(
                    "gather_rows id {id} out of range for table with {n} rows"
                )));
            }
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        let ids = ids.to_vec();
        Ok(self.push_with(ids.len(), d, false, op, |head, out| {
            let t = &head[mt.offset..mt.offset + mt.numel()];
            for (orow, &id) in out.chunks_mut(d).zip(&ids) {
                orow.copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ma = self.metas[a];
        if start + len > ma.rows || len == 0 {
            return Err(Error::Index(format!(
                "slice_rows [{start}, {}) out of range for {} rows",
                start + len,
                ma.rows
            )));
        }
        let c = ma.cols;
        Ok(self.push_with(len, c, false, Op::SliceRows { a, start, len }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            out.copy_from_slice(&x[start * c..(start + len) * c]);
        }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ma = self.metas[a];
        if start + len > ma.cols || len == 0 {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {}) out of range for {} cols",
                start + len,
                ma.cols
            )));
        }
        let (p, q) = (ma.rows, ma.cols);
        Ok(self.push_with(p, len, false, Op::SliceCols { a, start, len }, |head, out| {
            let x = &head[ma.offset..ma.offset + ma.numel()];
            for (orow, xrow) in out.chunks_mut(len).zip(x.chunks(q)) {
                orow.copy_from_slice(&xrow[start..start + len]);
            }
        }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one part"));
        }
        let cols = self.metas[parts[0]].cols;
        let mut rows = 0;
        for &p in parts {
            if self.metas[p].cols != cols {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape(),
                    right: self.value(p).shape(),
                });
            }
            rows += self.metas[p].rows;
        }
        let metas: Vec<NodeMeta> = parts.iter().map(|&p| self.metas[p]).collect();
        let op = Op::ConcatRows {
            parts: parts.to_vec(),
        };
        Ok(self.push_with(rows, cols, false, op, |head, out| {
            let mut off = 0;
            for m in &metas {
                out[off..off + m.numel()]
                    .copy_from_slice(&head[m.offset..m.offset + m.numel()]);
                off += m.numel();
            }
        }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one part"));
        }
        let rows = self.metas[parts[0]].rows;
        let mut cols = 0;
        for &p in parts {
            if self.metas[p].rows != rows {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape(),
                    right: self.value(p).shape(),
                });
            }
            cols += self.metas[p].cols;
        }
        let metas: Vec<NodeMeta> = parts.iter().map(|&p| self.metas[p]).collect();
        let op = Op::ConcatCols {
            parts: parts.to_vec(),
        };
        Ok(self.push_with(rows, cols, false, op, |head, out| {
            for i in 0..rows {
                let orow = &mut out[i * cols..(i + 1) * cols];
                let mut off = 0;
                for m in &metas {
                    orow[off..off + m.cols].copy_from_slice(
                        &head[m.offset + i * m.cols..m.offset + (i + 1) * m.cols],
                    );
                    off += m.cols;
                }
            }
        }))
    }

    /// Fused attention matrix: softmax over rows of
    /// `q . vstack(keys)^T * scale + mask_bias`. Key blocks share q's column
    /// count; the column order of the output follows the block order.
    pub fn sdpa_weights(
        &mut self,
        q: NodeId,
        keys: &[NodeId],
        scale: f64,
        mask_bias: Option<Arc<Tensor>>,
    ) -> Result<NodeId> {
        let q_rows = self.metas[q].rows;
        let parts: Vec<Part> = keys
            .iter()
            .map(|&k| (k, 0, self.metas[k].rows))
            .collect();
        self.sdpa_weights_ranged((q, 0, q_rows), &parts, scale, mask_bias)
    }

    /// `sdpa_weights` over row windows of the operands.
    pub fn sdpa_weights_ranged(
        &mut self,
        q: Part,
        keys: &[Part],
        scale: f64,
        mask_bias: Option<Arc<Tensor>>,
    ) -> Result<NodeId> {
        if keys.is_empty() {
            return Err(Error::contract("sdpa_weights needs at least one key block"));
        }
        let (q_node, q_start, q_len) = q;
        let mq = self.metas[q_node];
        if q_start + q_len > mq.rows || q_len == 0 {
            return Err(Error::Index(format!(
                "sdpa_weights query rows [{q_start}, {}) out of range for {} rows",
                q_start + q_len,
                mq.rows
            )));
        }
        let d = mq.cols;
        let mut total_cols = 0;
        for &(k, start, len) in keys {
            let mk = self.metas[k];
            if mk.cols != d {
                return Err(Error::DimMismatch {
                    op: "sdpa_weights",
                    left: self.value(q_node).shape(),
                    right: self.value(k).shape(),
                });
            }
            if start + len > mk.rows || len == 0 {
                return Err(Error::Index(format!(
                    "sdpa_weights key rows [{start}, {}) out of range for {} rows",
                    start + len,
                    mk.rows
                )));
            }
            total_cols += len;
        }
        if let Some(bias) = &mask_bias {
            if bias.rows() != q_len || bias.cols() != total_cols {
                return Err(Error::DimMismatch {
                    op: "sdpa_weights",
                    left: vec![q_len, total_cols],
                    right: bias.shape().to_vec(),
                });
            }
        }
        let key_metas: Vec<(NodeMeta, usize, usize)> = keys
            .iter()
            .map(|&(k, start, len)| (self.metas[k], start, len))
            .collect();
        let op = Op::SdpaWeights {
            q,
            keys: keys.to_vec(),
            scale,
        };
        Ok(self.push_with(q_len, total_cols, false, op, |head, out| {
            let qv = &head[mq.offset + q_start * d..mq.offset + (q_start + q_len) * d];
            // Logits per block: out[i][block col j] = q_i . k_j * scale.
            let mut block = Vec::new();
            let mut col_off = 0;
            for &(m, start, len) in &key_metas {
                let kv = &head[m.offset + start * d..m.offset + (start + len) * d];
                block.clear();
                block.resize(q_len * len, 0.0);
                tensor::matmul_nt_acc_raw(qv, kv, q_len, d, len, &mut block);
                for i in 0..q_len {
                    let src = &block[i * len..(i + 1) * len];
                    let dst =
                        &mut out[i * total_cols + col_off..i * total_cols + col_off + len];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v * scale;
                    }
                }
                col_off += len;
            }
            if let Some(bias) = &mask_bias {
                for (o, &b) in out.iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            // Row softmax in place.
            for row in out.chunks_mut(total_cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }))
    }

    /// weights . vstack(values); value blocks stack in the same order the
    /// weight columns were produced.
    pub fn weighted_sum_parts(&mut self, w: NodeId, values: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<Part> = values
            .iter()
            .map(|&v| (v, 0, self.metas[v].rows))
            .collect();
        self.weighted_sum_parts_ranged(w, &parts)
    }

    /// `weighted_sum_parts` over row windows of the value blocks.
    pub fn weighted_sum_parts_ranged(&mut self, w: NodeId, values: &[Part]) -> Result<NodeId> {
        if values.is_empty() {
            return Err(Error::contract(
                "weighted_sum_parts needs at least one value block",
            ));
        }
        let mw = self.metas[w];
        let d = self.metas[values[0].0].cols;
        let mut total_rows = 0;
        for &(v, start, len) in values {
            let mv = self.metas[v];
            if mv.cols != d {
                return Err(Error::DimMismatch {
                    op: "weighted_sum_parts",
                    left: self.value(values[0].0).shape(),
                    right: self.value(v).shape(),
                });
            }
            if start + len > mv.rows || len == 0 {
                return Err(Error::Index(format!(
                    "weighted_sum_parts value rows [{start}, {}) out of range for {} rows",
                    start + len,
                    mv.rows
                )));
            }
            total_rows += len;
        }
        if mw.cols != total_rows {
            return Err(Error::DimMismatch {
                op: "weighted_sum_parts",
                left: vec![mw.rows, mw.cols],
                right: vec![total_rows, d],
            });
        }
        let value_metas: Vec<(NodeMeta, usize, usize)> = values
            .iter()
            .map(|&(v, start, len)| (self.metas[v], start, len))
            .collect();
        let op = Op::WeightedSumParts {
            w,
            values: values.to_vec(),
        };
        Ok(self.push_with(mw.rows, d, false, op, |head, out| {
            let wv = &head[mw.offset..mw.offset + mw.numel()];
            out.fill(0.0);
            let mut block = Vec::new();
            let mut col_off = 0;
            for &(m, start, len) in &value_metas {
                let vv = &head[m.offset + start * d..m.offset + (start + len) * d];
                block.clear();
                block.resize(mw.rows * len, 0.0);
                for i in 0..mw.rows {
                    let src = &wv[i * mw.cols + col_off..i * mw.cols + col_off + len];
                    block[i * len..(i + 1) * len].copy_from_slice(src);
                }
                tensor::matmul_acc_raw(&block, vv, mw.rows, len, d, out);
                col_off += len;
            }
        }))
    }

    /// Reverse sweep from a scalar root. Adjoints are (re)built per call,
    /// so a tape can be swept more than once.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.metas[root].numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.adj.clear();
        self.adj.resize(self.data.len(), 0.0);
        self.adj[self.metas[root].offset] = 1.0;

        for id in (0..=root).rev() {
            let out_meta = self.metas[id];
            match &self.ops[id] {
                Op::Leaf | Op::Constant => {}
                Op::StopGrad { x } => {
                    debug_assert_eq!(self.metas[*x].numel(), out_meta.numel());
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for input in [a, b] {
                        let m = self.metas[input];
                        let (head, g) = self.adj.split_at_mut(out_meta.offset);
                        let g = &g[..out_meta.numel()];
                        accumulate(&mut head[m.offset..m.offset + m.numel()], g);
                    }
                }
                Op::MulElem { a, b } => {
                    let (a, b) = (*a, *b);
                    for (input, other) in [(a, b), (b, a)] {
                        let mi = self.metas[input];
                        let mo = self.metas[other];
                        let (head, g) = self.adj.split_at_mut(out_meta.offset);
                        let g = &g[..out_meta.numel()];
                        let ov = &self.data[mo.offset..mo.offset + mo.numel()];
                        let dst = &mut head[mi.offset..mi.offset + mi.numel()];
                        for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(ov) {
                            *d += gv * o;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let m = self.metas[a];
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let dst = &mut head[m.offset..m.offset + m.numel()];
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
                Op::AddRowBroadcast { a, row } => {
                    let (a, row) = (*a, *row);
                    let ma = self.metas[a];
                    let mr = self.metas[row];
                    {
                        let (head, g) = self.adj.split_at_mut(out_meta.offset);
                        let g = &g[..out_meta.numel()];
                        accumulate(&mut head[ma.offset..ma.offset + ma.numel()], g);
                    }
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let dst = &mut head[mr.offset..mr.offset + mr.numel()];
                    for chunk in g.chunks(out_meta.cols) {
                        for (d, &gv) in dst.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ma = self.metas[a];
                    let mb = self.metas[b];
                    let (p, q, r) = (ma.rows, ma.cols, mb.cols);
                    {
                        // dA += G . B^T
                        let (head, g) = self.adj.split_at_mut(out_meta.offset);
                        let g = &g[..out_meta.numel()];
                        let bv = &self.data[mb.offset..mb.offset + mb.numel()];
                        tensor::matmul_nt_acc_raw(
                            g,
                            bv,
                            p,
                            r,
                            q,
                            &mut head[ma.offset..ma.offset + ma.numel()],
                        );
                    }
                    // dB += A^T . G
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let av = &self.data[ma.offset..ma.offset + ma.numel()];
                    tensor::matmul_tn_acc_raw(
                        av,
                        g,
                        p,
                        q,
                        r,
                        &mut head[mb.offset..mb.offset + mb.numel()],
                    );
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let ma = self.metas[a];
                    let (p, q) = (ma.rows, ma.cols);
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let dst = &mut head[ma.offset..ma.offset + ma.numel()];
                    // out is q x p; out[j][i] corresponds to a[i][j].
                    for j in 0..q {
                        for i in 0..p {
                            dst[i * q + j] += g[j * p + i];
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let ma = self.metas[a];
                    let cols = out_meta.cols;
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let y = &self.data[out_meta.offset..out_meta.offset + out_meta.numel()];
                    let dst = &mut head[ma.offset..ma.offset + ma.numel()];
                    softmax_backward_rows(y, g, cols, dst);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let mx = self.metas[x];
                    let mg = self.metas[gain];
                    let mb = self.metas[bias];
                    let d = mx.cols;
                    let dn = d as f64;
                    let xs = &self.data[mx.offset..mx.offset + mx.numel()];
                    let gv = &self.data[mg.offset..mg.offset + d];
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    for i in 0..mx.rows {
                        let xrow = &xs[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mean = xrow.iter().sum::<f64>() / dn;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dn;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv;
                            let h = grow[j] * gv[j];
                            h_mean += h;
                            hx_mean += h * xhat;
                        }
                        h_mean /= dn;
                        hx_mean /= dn;
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv;
                            let h = grow[j] * gv[j];
                            head[mx.offset + i * d + j] += inv * (h - h_mean - xhat * hx_mean);
                            head[mg.offset + j] += grow[j] * xhat;
                            head[mb.offset + j] += grow[j];
                        }
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    let ma = self.metas[a];
                    let xv = &self.data[ma.offset..ma.offset + ma.numel()];
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let dst = &mut head[ma.offset..ma.offset + ma.numel()];
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let ma = self.metas[a];
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let gv = g[0];
                    for d in head[ma.offset..ma.offset + ma.numel()].iter_mut() {
                        *d += gv;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    kept,
                } => {
                    let logits = *logits;
                    let ml = self.metas[logits];
                    let cols = ml.cols;
                    let x = &self.data[ml.offset..ml.offset + ml.numel()];
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let scale = g[0] / *kept as f64;
                    let dst = &mut head[ml.offset..ml.offset + ml.numel()];
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &x[i * cols..(i + 1) * cols];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        let drow = &mut dst[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            let p_j = (row[j] - max).exp() / sum;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            drow[j] += scale * (p_j - onehot);
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let table = *table;
                    let mt = self.metas[table];
                    let d = mt.cols;
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let dst = &mut head[mt.offset..mt.offset + mt.numel()];
                    for (grow, &id) in g.chunks(d).zip(ids) {
                        let t = &mut dst[id * d..(id + 1) * d];
                        for (o, &gv) in t.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
                Op::SliceRows { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    let ma = self.metas[a];
                    let c = ma.cols;
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    accumulate(
                        &mut head[ma.offset + start * c..ma.offset + (start + len) * c],
                        g,
                    );
                }
                Op::SliceCols { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    let ma = self.metas[a];
                    let q = ma.cols;
                    let (head, g) = self.adj.split_at_mut(out_meta.offset);
                    let g = &g[..out_meta.numel()];
                    let dst = &mut head[ma.offset..ma.offset + ma.numel()];
                    for (i, grow) in g.chunks(len).enumerate() {
                        accumulate(&mut dst[i * q + start..i * q + start + len], grow);
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for part in parts {
                        let m = self.metas[part];
                        let (head, g) = self.adj.split_at_mut(out_meta.offset);
                        let g = &g[..out_meta.numel()];
                        accumulate(
                            &mut head[m.offset..m.offset + m.numel()],
                            &g[off..off + m.numel()],
                        );
                        off += m.numel();
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let total = out_meta.cols;
                    let mut col_off = 0;
                    for part in parts {
                        let m = self.metas[part];
                        let (head, g) = self.adj.split_at_mut(out_meta.offset);
                        let g = &g[..out_meta.numel()];
                        let dst = &mut head[m.offset..m.offset + m.numel()];
                        for i in 0..m.rows {
                            let grow = &g[i * total + col_off..i * total + col_off + m.cols];
                            accumulate(&mut dst[i * m.cols..(i + 1) * m.cols], grow);
                        }
                        col_off += m.cols;
                    }
                }
                Op::SdpaWeights { q, keys, scale } => {
                    let ((q_node, q_start, q_len), keys, scale) = (*q, keys.clone(), *scale);
                    let mq = self.metas[q_node];
                    let d = mq.cols;
                    let total_cols = out_meta.cols;
                    // dlogits = softmax backward of the weight adjoint; the
                    // additive mask bias is constant and drops out.
                    let y = &self.data[out_meta.offset..out_meta.offset + out_meta.numel()];
                    let mut dlogits = vec![0.0; out_meta.numel()];
                    {
                        let g = &self.adj[out_meta.offset..out_meta.offset + out_meta.numel()];
                        softmax_backward_rows(y, g, total_cols, &mut dlogits);
                    }
                    for v in dlogits.iter_mut() {
                        *v *= scale;
                    }
                    let q_off = mq.offset + q_start * d;
                    let mut block = Vec::new();
                    let mut col_off = 0;
                    for (k_node, start, len) in keys {
                        let mk = self.metas[k_node];
                        block.clear();
                        block.resize(q_len * len, 0.0);
                        for i in 0..q_len {
                            let src = &dlogits
                                [i * total_cols + col_off..i * total_cols + col_off + len];
                            block[i * len..(i + 1) * len].copy_from_slice(src);
                        }
                        let k_off = mk.offset + start * d;
                        // Values live in `data`, adjoints in `adj`: the
                        // borrows never alias.
                        {
                            let kv = &self.data[k_off..k_off + len * d];
                            let dq = &mut self.adj[q_off..q_off + q_len * d];
                            tensor::matmul_acc_raw(&block, kv, q_len, len, d, dq);
                        }
                        let qv = &self.data[q_off..q_off + q_len * d];
                        let dk = &mut self.adj[k_off..k_off + len * d];
                        tensor::matmul_tn_acc_raw(&block, qv, q_len, len, d, dk);
                        col_off += len;
                    }
                }
                Op::WeightedSumParts { w, values } => {
                    let (w, values) = (*w, values.clone());
                    let mw = self.metas[w];
                    let rows = out_meta.rows;
                    let d = out_meta.cols;
                    let gadj: Vec<f64> = self.adj
                        [out_meta.offset..out_meta.offset + out_meta.numel()]
                        .to_vec();
                    let wv = self.data[mw.offset..mw.offset + mw.numel()].to_vec();
                    let mut block = Vec::new();
                    let mut col_off = 0;
                    for (v_node, start, len) in values {
                        let mv = self.metas[v_node];
                        let v_off = mv.offset + start * d;
                        // dW_block += g . V_part^T
                        {
                            let vv = &self.data[v_off..v_off + len * d];
                            block.clear();
                            block.resize(rows * len, 0.0);
                            tensor::matmul_nt_acc_raw(&gadj, vv, rows, d, len, &mut block);
                            let dw = &mut self.adj[mw.offset..mw.offset + mw.numel()];
                            for i in 0..rows {
                                let src = &block[i * len..(i + 1) * len];
                                let dst =
                                    &mut dw[i * mw.cols + col_off..i * mw.cols + col_off + len];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                        // dV_part += W_block^T . g
                        block.clear();
                        block.resize(rows * len, 0.0);
                        for i in 0..rows {
                            let src = &wv[i * mw.cols + col_off..i * mw.cols + col_off + len];
                            block[i * len..(i + 1) * len].copy_from_slice(src);
                        }
                        let dv = &mut self.adj[v_off..v_off + len * d];
                        tensor::matmul_tn_acc_raw(&block, &gadj, rows, len, d, dv);
                        col_off += len;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// dx for y = softmax(rows): dx = y * (g - rowdot(g, y)), accumulated.
fn softmax_backward_rows(y: &[f64], g: &[f64], cols: usize, dst: &mut [f64]) {
    for ((yrow, grow), drow) in y
        .chunks(cols)
        .zip(g.chunks(cols))
        .zip(dst.chunks_mut(cols))
    {
        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
            *d += yv * (gv - dot);
        }
    }
}

/// Max over coordinates of |analytic - central difference| relative error
/// for a scalar-valued tape function of one tensor input.
pub fn grad_check<F>(f: &F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step h must be positive"));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let root = f(&mut tape, xid)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::contract("grad_check function must be scalar-valued"));
    }
    tape.backward(root)?;
    let analytic = tape.grad(xid);

    let eval = |xp: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(xp.clone());
        let r = f(&mut t, id)?;
        Ok(t.value(r).data()[0])
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let cd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
