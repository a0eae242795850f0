//! Scaled dot-product and multi-head attention with optional memory
//! augmentation, segment embeddings, and causal masking.
//!
//! Memory slots always come first in the key/value concatenation; column
//! bookkeeping throughout the crate depends on that order. Causal masks
//! never block memory columns. Installed prototype contents take part as
//! constants: gradient reaches segment embeddings but never the stored
//! keys/values. The learnable-memory baseline routes the same layout with
//! trainable nodes instead.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::prototypes::PrototypeMemory;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub memory_slots: usize,
    pub scale: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize, causal: bool, memory_slots: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::config(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        let head_dim = d_model / heads;
        Ok(AttentionConfig {
            d_model,
            heads,
            head_dim,
            causal,
            memory_slots,
            scale: 1.0 / (head_dim as f64).sqrt(),
        })
    }
}

/// Per-layer learnable segment embedding nodes, broadcast across heads.
/// Added to keys only: memory keys get `mem`, input keys get `input`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentNodes {
    pub mem: NodeId,
    pub input: NodeId,
}

/// Where a layer's memory keys/values come from.
pub enum MemoryNodes {
    /// Installed prototypes; contents are constants on the tape.
    Frozen { keys: NodeId, values: NodeId },
    /// Plain trained parameters (the learnable-memory baseline).
    Trainable { keys: NodeId, values: NodeId },
}

/// Attention weights of one head with memory-column bookkeeping.
/// Columns [0, memory_cols) are memory slots, the rest are input slots.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    weights: Tensor,
    memory_cols: usize,
}

impl AttentionTrace {
    pub fn new(weights: Tensor, memory_cols: usize) -> Result<Self> {
        if memory_cols > weights.cols() {
            return Err(Error::contract(format!(
                "memory_cols {memory_cols} exceeds {} columns",
                weights.cols()
            )));
        }
        for i in 0..weights.rows() {
            let sum: f64 = weights.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "attention row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AttentionTrace {
            weights,
            memory_cols,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn memory_cols(&self) -> usize {
        self.memory_cols
    }

    pub fn input_cols(&self) -> usize {
        self.weights.cols() - self.memory_cols
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }
}

/// Boolean attention mask; `true` blocks a (query, key) pair.
#[derive(Debug, Clone)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(Error::contract("mask size mismatch"));
        }
        Ok(BoolMask {
            rows,
            cols,
            blocked,
        })
    }

    /// Causal mask over `t_q` queries and `mem_cols + t_k` keys where the
    /// leading memory columns are never blocked. Square input block.
    pub fn causal_with_memory(t_q: usize, t_k: usize, mem_cols: usize) -> Self {
        let cols = mem_cols + t_k;
        let mut blocked = vec![false; t_q * cols];
        for i in 0..t_q {
            for j in 0..t_k {
                if j > i {
                    blocked[i * cols + mem_cols + j] = true;
                }
            }
        }
        BoolMask {
            rows: t_q,
            cols,
            blocked,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }

    fn fully_blocked_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| (0..self.cols).all(|c| self.is_blocked(r, c)))
    }

    /// Additive bias: 0 where visible, -1e9 where blocked. Keeps the
    /// operation differentiable instead of zeroing weights after the fact.
    pub fn bias_tensor(&self) -> Arc<Tensor> {
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { -1e9 } else { 0.0 })
            .collect();
        Arc::new(Tensor::new(vec![self.rows, self.cols], data).expect("mask dims"))
    }
}

/// Prepend memory rows to keys/values and add segment embeddings to keys.
/// Prototype memory participates as constants (no gradient into contents);
/// segment embeddings stay trainable. Returns the augmented (keys, values).
pub fn augment_kv(
    tape: &mut Tape,
    k: NodeId,
    v: NodeId,
    memory: Option<&MemoryNodes>,
    seg: Option<SegmentNodes>,
) -> Result<(NodeId, NodeId)> {
    let d = tape.value(k).cols();
    if tape.value(v).cols() != d || tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::DimMismatch {
            op: "augment_kv",
            left: tape.value(k).shape().to_vec(),
            right: tape.value(v).shape().to_vec(),
        });
    }
    let k_in = match seg {
        Some(s) => tape.add_row_broadcast(k, s.input)?,
        None => k,
    };
    let (mk, mv) = match memory {
        None => return Ok((k_in, v)),
        Some(MemoryNodes::Frozen { keys, values }) => {
            (tape.stop_grad(*keys), tape.stop_grad(*values))
        }
        Some(MemoryNodes::Trainable { keys, values }) => (*keys, *values),
    };
    if tape.value(mk).cols() != d || tape.value(mv).cols() != d {
        return Err(Error::DimMismatch {
            op: "augment_kv",
            left: vec![d],
            right: tape.value(mk).shape().to_vec(),
        });
    }
    let mk_seg = match seg {
        Some(s) => tape.add_row_broadcast(mk, s.mem)?,
        None => mk,
    };
    let k_aug = tape.concat_rows(&[mk_seg, k_in])?;
    let v_aug = tape.concat_rows(&[mv, v])?;
    Ok((k_aug, v_aug))
}

/// softmax(Q K^T / sqrt(d) + mask_bias) V with the attention matrix spanning
/// memory and input columns. Returns the output node and the detached trace.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&BoolMask>,
    memory_cols: usize,
) -> Result<(NodeId, AttentionTrace)> {
    let d = tape.value(q).cols();
    if tape.value(k).cols() != d {
        return Err(Error::DimMismatch {
            op: "scaled_dot_attention",
            left: tape.value(q).shape(),
            right: tape.value(k).shape(),
        });
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::DimMismatch {
            op: "scaled_dot_attention",
            left: tape.value(k).shape(),
            right: tape.value(v).shape(),
        });
    }
    let t_q = tape.value(q).rows();
    let cols = tape.value(k).rows();
    let bias = match mask {
        Some(m) => {
            if m.rows() != t_q || m.cols() != cols {
                return Err(Error::DimMismatch {
                    op: "scaled_dot_attention",
                    left: vec![t_q, cols],
                    right: vec![m.rows(), m.cols()],
                });
            }
            if let Some(r) = m.fully_blocked_row() {
                return Err(Error::contract(format!(
                    "attention row {r} is fully masked"
                )));
            }
            Some(m.bias_tensor())
        }
        None => None,
    };
    let scale = 1.0 / (d as f64).sqrt();
    let weights = tape.sdpa_weights(q, &[k], scale, bias)?;
    let out = tape.weighted_sum_parts(weights, &[v])?;
    let trace = AttentionTrace::new(tape.value(weights).to_tensor(), memory_cols)?;
    Ok((out, trace))
}

/// Projection parameter nodes for one attention block. The key projection
/// carries no bias: a constant added to every key shifts each logit row
/// uniformly and cancels in the softmax, so the parameter would be dead.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Per-head memory for one layer.
pub enum MemorySource<'a> {
    /// Installed prototypes, one per head.
    Prototypes(&'a [PrototypeMemory]),
    /// Trainable (keys, values) parameter nodes, one pair per head.
    Learnable(&'a [(NodeId, NodeId)]),
}

/// Everything a multi-head attention call exposes besides its output.
pub struct MhaOutput {
    pub out: NodeId,
    /// One trace per head.
    pub traces: Vec<AttentionTrace>,
    /// Raw post-projection per-head (K, V) nodes, without segment
    /// embeddings; these rows are what memory banks store.
    pub head_kv: Vec<(NodeId, NodeId)>,
    /// Memory content nodes per head when memory was attached; used to
    /// verify that no gradient reaches prototype contents.
    pub memory_nodes: Vec<(NodeId, NodeId)>,
}

/// Multi-head attention with optional per-head memory augmentation.
/// Self-attention when `x_q == x_kv`; cross-attention otherwise (callers
/// never pass memory for cross-attention). Segment embeddings apply only
/// when memory is attached, so the memoryless path is the plain transformer
/// attention bit for bit.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: NodeId,
    x_kv: NodeId,
    params: &AttnParams,
    seg: Option<SegmentNodes>,
    memory: Option<MemorySource<'_>>,
    cfg: &AttentionConfig,
) -> Result<MhaOutput> {
    if tape.value(x_q).cols() != cfg.d_model || tape.value(x_kv).cols() != cfg.d_model {
        return Err(Error::DimMismatch {
            op: "multi_head_attention",
            left: tape.value(x_q).shape().to_vec(),
            right: vec![cfg.d_model],
        });
    }
    if memory.is_some() && cfg.memory_slots == 0 {
        return Err(Error::contract(
            "memory attached but config has zero memory slots",
        ));
    }
    let t_q = tape.value(x_q).rows();
    let t_k = tape.value(x_kv).rows();

    let q_full = {
        let p = tape.matmul(x_q, params.wq)?;
        tape.add_row_broadcast(p, params.bq)?
    };
    let k_full = tape.matmul(x_kv, params.wk)?;
    let v_full = {
        let p = tape.matmul(x_kv, params.wv)?;
        tape.add_row_broadcast(p, params.bv)?
    };

    let mem_cols = if memory.is_some() { cfg.memory_slots } else { 0 };
    let bias = if cfg.causal {
        Some(BoolMask::causal_with_memory(t_q, t_k, mem_cols).bias_tensor())
    } else {
        None
    };

    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut traces = Vec::with_capacity(cfg.heads);
    let mut head_kv = Vec::with_capacity(cfg.heads);
    let mut memory_nodes = Vec::new();
    for h in 0..cfg.heads {
        let off = h * cfg.head_dim;
        let qh = tape.slice_cols(q_full, off, cfg.head_dim)?;
        let kh = tape.slice_cols(k_full, off, cfg.head_dim)?;
        let vh = tape.slice_cols(v_full, off, cfg.head_dim)?;
        head_kv.push((kh, vh));

        let mem_nodes = match &memory {
            None => None,
            Some(MemorySource::Prototypes(protos)) => {
                if protos.len() != cfg.heads {
                    return Err(Error::contract(format!(
                        "expected {} per-head prototype memories, got {}",
                        cfg.heads,
                        protos.len()
                    )));
                }
                let p = &protos[h];
                if p.slots() != cfg.memory_slots || p.head_dim() != cfg.head_dim {
                    return Err(Error::DimMismatch {
                        op: "multi_head_attention",
                        left: vec![cfg.memory_slots, cfg.head_dim],
                        right: p.keys.shape().to_vec(),
                    });
                }
                let keys = tape.constant_ref(&p.keys);
                let values = tape.constant_ref(&p.values);
                memory_nodes.push((keys, values));
                Some(MemoryNodes::Frozen { keys, values })
            }
            Some(MemorySource::Learnable(pairs)) => {
                if pairs.len() != cfg.heads {
                    return Err(Error::contract(format!(
                        "expected {} per-head learnable memories, got {}",
                        cfg.heads,
                        pairs.len()
                    )));
                }
                let (keys, values) = pairs[h];
                memory_nodes.push((keys, values));
                Some(MemoryNodes::Trainable { keys, values })
            }
        };

        // Key/value blocks feed the fused attention without materializing
        // the concatenation; memory first, matching the column bookkeeping.
        let seg_for_head = if memory.is_some() { seg } else { None };
        let mut key_parts = Vec::with_capacity(2);
        let mut value_parts = Vec::with_capacity(2);
        if let Some(nodes) = &mem_nodes {
            let (mk, mv) = match nodes {
                MemoryNodes::Frozen { keys, values } => {
                    (tape.stop_grad(*keys), tape.stop_grad(*values))
                }
                MemoryNodes::Trainable { keys, values } => (*keys, *values),
            };
            let mk = match seg_for_head {
                Some(s) => tape.add_row_broadcast(mk, s.mem)?,
                None => mk,
            };
            key_parts.push(mk);
            value_parts.push(mv);
        }
        let k_in = match seg_for_head {
            Some(s) => tape.add_row_broadcast(kh, s.input)?,
            None => kh,
        };
        key_parts.push(k_in);
        value_parts.push(vh);
        let weights = tape.sdpa_weights(qh, &key_parts, cfg.scale, bias.clone())?;
        let out_h = tape.weighted_sum_parts(weights, &value_parts)?;
        let trace = AttentionTrace::new(tape.value(weights).to_tensor(), mem_cols)?;
        head_outs.push(out_h);
        traces.push(trace);
    }

    let concat = tape.concat_cols(&head_outs)?;
    let projected = tape.matmul(concat, params.wo)?;
    let out = tape.add_row_broadcast(projected, params.bo)?;
    Ok(MhaOutput {
        out,
        traces,
        head_kv,
        memory_nodes,
    })
}

/// Memory attention score: per layer, the per-slot mean attention mass on
/// memory columns over that mean plus the per-slot mean on input columns,
/// for the trace row at `position`; layers average uniformly.
pub fn memory_attention_score(
    per_layer_traces: &[Vec<AttentionTrace>],
    position: usize,
) -> Result<(Vec<f64>, f64)> {
    if per_layer_traces.is_empty() {
        return Err(Error::contract("memory_attention_score needs layers"));
    }
    let mut per_layer = Vec::with_capacity(per_layer_traces.len());
    for (l, heads) in per_layer_traces.iter().enumerate() {
        let mut mem_sum = 0.0;
        let mut mem_n = 0usize;
        let mut inp_sum = 0.0;
        let mut inp_n = 0usize;
        for trace in heads {
            if trace.memory_cols() == 0 {
                return Err(Error::contract(format!(
                    "layer {l}: memory attention score undefined for m=0"
                )));
            }
            if position >= trace.rows() {
                return Err(Error::Index(format!(
                    "position {position} out of range for {} rows",
                    trace.rows()
                )));
            }
            let row = trace.weights().row(position);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "layer {l}: trace row sums to {sum}"
                )));
            }
            let m = trace.memory_cols();
            mem_sum += row[..m].iter().sum::<f64>();
            mem_n += m;
            inp_sum += row[m..].iter().sum::<f64>();
            inp_n += row.len() - m;
        }
        let mem_mean = mem_sum / mem_n as f64;
        let inp_mean = inp_sum / inp_n as f64;
        per_layer.push(mem_mean / (mem_mean + inp_mean));
    }
    let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok((per_layer, mean))
}
