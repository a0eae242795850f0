//! Minimal encoder-decoder transformer whose decoder self-attention layers
//! carry prototype memory.
//!
//! Pre-norm residual blocks throughout. The encoder consumes an unordered
//! set of feature rows (no positional encoding, so it is permutation
//! equivariant); the decoder uses learned positional embeddings and causal
//! self-attention. Cross-attention never carries memory. When no memory is
//! installed (or the mode is baseline) the self-attention path is the plain
//! transformer path, bit for bit.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::{
    multi_head_attention, AttentionConfig, AttentionTrace, AttnParams, BoolMask,
    MemorySource, SegmentNodes,
};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::prototypes::PrototypeMemory;
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMode {
    /// Plain transformer; banks never allocated.
    Baseline,
    /// Prototype memory distilled from activation banks.
    Pma,
    /// Memory keys/values as plain trained parameters in the same position.
    LearnableMem,
}

impl std::fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MemoryMode::Baseline => write!(f, "baseline"),
            MemoryMode::Pma => write!(f, "pma"),
            MemoryMode::LearnableMem => write!(f, "learnable-mem"),
        }
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(MemoryMode::Baseline),
            "pma" => Ok(MemoryMode::Pma),
            "learnable-mem" => Ok(MemoryMode::LearnableMem),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected pma, learnable-mem, or baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub d_feat: usize,
    /// Memory slots per decoder self-attention layer (m).
    pub memory_slots: usize,
    pub memory_in_first_layer: bool,
    pub use_segment_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            vocab: 17,
            max_len: 8,
            d_feat: 32,
            memory_slots: 64,
            memory_in_first_layer: true,
            use_segment_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.vocab == 0 || self.max_len == 0 || self.d_feat == 0 {
            return Err(Error::config("layers, vocab, max_len, d_feat must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

pub type ParamStore = BTreeMap<String, Tensor>;

/// Whether decoder layer `l` can carry memory under this config and mode.
pub fn layer_carries_memory(cfg: &ModelConfig, mode: MemoryMode, l: usize) -> bool {
    mode != MemoryMode::Baseline
        && cfg.memory_slots > 0
        && (l > 0 || cfg.memory_in_first_layer)
}

pub struct Captioner {
    cfg: ModelConfig,
    mode: MemoryMode,
    params: ParamStore,
    /// Installed prototype memories, per decoder layer then per head.
    memories: Vec<Option<Vec<PrototypeMemory>>>,
}

/// Everything one teacher-forced decode exposes.
pub struct DecodeOutput {
    pub logits: NodeId,
    /// Decoder self-attention traces, per layer then per head.
    pub self_traces: Vec<Vec<AttentionTrace>>,
    /// Raw per-head (K, V) activation nodes of each decoder self-attention
    /// layer, destined for memory banks.
    pub bank_taps: Vec<Vec<(NodeId, NodeId)>>,
    /// Constant nodes holding installed prototype contents, per layer;
    /// exposed so callers can assert their adjoints stay zero.
    pub memory_content_nodes: Vec<Vec<(NodeId, NodeId)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Greedy,
    Beam(usize),
}

impl Captioner {
    pub fn new(cfg: ModelConfig, mode: MemoryMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, mode, seed);
        let memories = vec![None; cfg.layers];
        Ok(Captioner {
            cfg,
            mode,
            params,
            memories,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn memories(&self) -> &[Option<Vec<PrototypeMemory>>] {
        &self.memories
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Swap in new prototype memories for every decoder layer at once.
    /// `None` entries clear a layer back to the plain path.
    pub fn install_memories(
        &mut self,
        memories: Vec<Option<Vec<PrototypeMemory>>>,
    ) -> Result<()> {
        if memories.len() != self.cfg.layers {
            return Err(Error::DimMismatch {
                op: "install_memories",
                left: vec![self.cfg.layers],
                right: vec![memories.len()],
            });
        }
        for (l, slot) in memories.iter().enumerate() {
            if let Some(heads) = slot {
                if heads.len() != self.cfg.heads {
                    return Err(Error::DimMismatch {
                        op: "install_memories",
                        left: vec![self.cfg.heads],
                        right: vec![heads.len()],
                    });
                }
                for p in heads {
                    if p.slots() != self.cfg.memory_slots
                        || p.head_dim() != self.cfg.head_dim()
                    {
                        return Err(Error::DimMismatch {
                            op: "install_memories",
                            left: vec![self.cfg.memory_slots, self.cfg.head_dim()],
                            right: p.keys.shape().to_vec(),
                        });
                    }
                    if !p.keys.all_finite() || !p.values.all_finite() {
                        return Err(Error::contract(format!(
                            "layer {l}: prototype memory contains non-finite values"
                        )));
                    }
                }
            }
        }
        self.memories = memories;
        Ok(())
    }

    pub fn clear_memories(&mut self) {
        self.memories = vec![None; self.cfg.layers];
    }

    /// Bind every parameter onto a tape as a leaf node.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let mut nodes = BTreeMap::new();
        for (name, value) in &self.params {
            nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundModel { model: self, nodes }
    }

    /// Greedy or beam decode. Deterministic; ties break toward lower token
    /// ids. The returned sequence starts with `bos` and never exceeds
    /// `max_len` tokens.
    pub fn generate(
        &self,
        features: &Tensor,
        max_len: usize,
        mode: GenMode,
        bos: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let width = match mode {
            GenMode::Greedy => 1,
            GenMode::Beam(w) => {
                if w == 0 {
                    return Err(Error::config("beam width must be positive"));
                }
                w
            }
        };
        let max_len = max_len.min(self.cfg.max_len);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let enc = bound.encode(&mut tape, features)?;

        struct Hyp {
            tokens: Vec<usize>,
            logp: f64,
            done: bool,
        }
        let mut hyps = vec![Hyp {
            tokens: vec![bos],
            logp: 0.0,
            done: false,
        }];
        while hyps.iter().any(|h| !h.done && h.tokens.len() < max_len) {
            let mut candidates: Vec<Hyp> = Vec::new();
            for h in &hyps {
                if h.done || h.tokens.len() >= max_len {
                    candidates.push(Hyp {
                        tokens: h.tokens.clone(),
                        logp: h.logp,
                        done: true,
                    });
                    continue;
                }
                let out = bound.decode_teacher_forced(&mut tape, &h.tokens, enc)?;
                let logits = tape.value(out.logits);
                let last = logits.row(logits.rows() - 1);
                let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + last.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                for (tok, &logit) in last.iter().enumerate() {
                    let lp = h.logp + (logit - lse);
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Hyp {
                        tokens,
                        logp: lp,
                        done: tok == eos,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.logp
                    .partial_cmp(&a.logp)
                    .expect("finite log probs")
                    .then(a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            hyps = candidates;
        }
        Ok(hyps.into_iter().next().expect("non-empty beam").tokens)
    }
}

pub struct BoundModel<'m> {
    model: &'m Captioner,
    nodes: BTreeMap<String, NodeId>,
}

impl BoundModel<'_> {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn param_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.nodes
    }

    fn attn_params(&self, prefix: &str) -> AttnParams {
        AttnParams {
            wq: self.node(&format!("{prefix}.wq")),
            bq: self.node(&format!("{prefix}.bq")),
            wk: self.node(&format!("{prefix}.wk")),
            wv: self.node(&format!("{prefix}.wv")),
            bv: self.node(&format!("{prefix}.bv")),
            wo: self.node(&format!("{prefix}.wo")),
            bo: self.node(&format!("{prefix}.bo")),
        }
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let wid = self.node(w);
        let bid = self.node(b);
        let p = tape.matmul(x, wid)?;
        tape.add_row_broadcast(p, bid)
    }

    fn layer_norm(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.node(&format!("{prefix}.g"));
        let b = self.node(&format!("{prefix}.b"));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn ffn(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(tape, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let a = tape.relu(h);
        self.linear(tape, a, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Project feature rows and run the encoder stack. Permutation
    /// equivariant over rows: no positional encoding anywhere in here.
    pub fn encode(&self, tape: &mut Tape, features: &Tensor) -> Result<NodeId> {
        let cfg = &self.model.cfg;
        if features.cols() != cfg.d_feat {
            return Err(Error::DimMismatch {
                op: "encode",
                left: features.shape().to_vec(),
                right: vec![cfg.d_feat],
            });
        }
        let feat = tape.constant(features.clone());
        let mut x = self.linear(tape, feat, "feat_proj.w", "feat_proj.b")?;
        let attn_cfg = AttentionConfig::new(cfg.d_model, cfg.heads, false, 0)?;
        for l in 0..cfg.layers {
            let h = self.layer_norm(tape, x, &format!("enc.{l}.ln1"))?;
            let mha = multi_head_attention(
                tape,
                h,
                h,
                &self.attn_params(&format!("enc.{l}.attn")),
                None,
                None,
                &attn_cfg,
            )?;
            x = tape.add(x, mha.out)?;
            let h = self.layer_norm(tape, x, &format!("enc.{l}.ln2"))?;
            let f = self.ffn(tape, h, &format!("enc.{l}.ffn"))?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, x, "enc.final_ln")
    }

    /// Causal teacher-forced decode of one token sequence against encoder
    /// output. Position-t logits depend only on tokens <= t, the encoder
    /// output, and any installed memories.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        enc_out: NodeId,
    ) -> Result<DecodeOutput> {
        let cfg = &self.model.cfg;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::contract("decode needs at least one token"));
        }
        if t > cfg.max_len {
            return Err(Error::contract(format!(
                "sequence length {t} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let tok_emb = self.node("embed.tok");
        let emb = tape.gather_rows(tok_emb, tokens)?;
        let pos_table = self.node("embed.pos");
        let pos = tape.slice_rows(pos_table, 0, t)?;
        let mut x = tape.add(emb, pos)?;

        let self_cfg =
            AttentionConfig::new(cfg.d_model, cfg.heads, true, cfg.memory_slots)?;
        let cross_cfg = AttentionConfig::new(cfg.d_model, cfg.heads, false, 0)?;

        let mut self_traces = Vec::with_capacity(cfg.layers);
        let mut bank_taps = Vec::with_capacity(cfg.layers);
        let mut memory_content_nodes = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let h = self.layer_norm(tape, x, &format!("dec.{l}.ln1"))?;
            let carries = layer_carries_memory(cfg, self.model.mode, l);
            let learnable_pairs: Vec<(NodeId, NodeId)>;
            let memory: Option<MemorySource<'_>> = match self.model.mode {
                MemoryMode::Baseline => None,
                MemoryMode::Pma => {
                    if carries {
                        self.model.memories[l]
                            .as_ref()
                            .map(|heads| MemorySource::Prototypes(heads.as_slice()))
                    } else {
                        None
                    }
                }
                MemoryMode::LearnableMem => {
                    if carries {
                        learnable_pairs = (0..cfg.heads)
                            .map(|hd| {
                                (
                                    self.node(&format!("dec.{l}.mem.{hd}.mk")),
                                    self.node(&format!("dec.{l}.mem.{hd}.mv")),
                                )
                            })
                            .collect();
                        Some(MemorySource::Learnable(&learnable_pairs))
                    } else {
                        None
                    }
                }
            };
            let seg = if memory.is_some() && cfg.use_segment_embeddings {
                Some(SegmentNodes {
                    mem: self.node(&format!("dec.{l}.seg.mem")),
                    input: self.node(&format!("dec.{l}.seg.input")),
                })
            } else {
                None
            };
            let mha = multi_head_attention(
                tape,
                h,
                h,
                &self.attn_params(&format!("dec.{l}.self")),
                seg,
                memory,
                &self_cfg,
            )?;
            x = tape.add(x, mha.out)?;
            self_traces.push(mha.traces);
            bank_taps.push(mha.head_kv);
            memory_content_nodes.push(mha.memory_nodes);

            let h = self.layer_norm(tape, x, &format!("dec.{l}.ln2"))?;
            let cross = multi_head_attention(
                tape,
                h,
                enc_out,
                &self.attn_params(&format!("dec.{l}.cross")),
                None,
                None,
                &cross_cfg,
            )?;
            x = tape.add(x, cross.out)?;

            let h = self.layer_norm(tape, x, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(tape, h, &format!("dec.{l}.ffn"))?;
            x = tape.add(x, f)?;
        }
        let x = self.layer_norm(tape, x, "dec.final_ln")?;
        let logits = self.linear(tape, x, "out_proj.w", "out_proj.b")?;
        Ok(DecodeOutput {
            logits,
            self_traces,
            bank_taps,
            memory_content_nodes,
        })
    }

    /// Batched encoder over several feature sets. Row-wise ops run over the
    /// stacked rows and attention runs per sample, so every row is bitwise
    /// identical to the per-sample `encode`. Returns the stacked encoder
    /// output and each sample's (row start, row count).
    pub fn encode_many(
        &self,
        tape: &mut Tape,
        features: &[&Tensor],
    ) -> Result<(NodeId, Vec<(usize, usize)>)> {
        let cfg = &self.model.cfg;
        if features.is_empty() {
            return Err(Error::contract("encode_many needs at least one sample"));
        }
        let mut ranges = Vec::with_capacity(features.len());
        let mut start = 0;
        for f in features {
            if f.cols() != cfg.d_feat {
                return Err(Error::DimMismatch {
                    op: "encode",
                    left: f.shape().to_vec(),
                    right: vec![cfg.d_feat],
                });
            }
            ranges.push((start, f.rows()));
            start += f.rows();
        }
        let stacked = Tensor::concat_rows(features)?;
        let feat = tape.constant(stacked);
        let mut x = self.linear(tape, feat, "feat_proj.w", "feat_proj.b")?;
        for l in 0..cfg.layers {
            let h = self.layer_norm(tape, x, &format!("enc.{l}.ln1"))?;
            let mha = self.batched_mha(
                tape,
                &format!("enc.{l}.attn"),
                h,
                &ranges,
                h,
                &ranges,
                None,
                None,
                false,
            )?;
            x = tape.add(x, mha.out)?;
            let h = self.layer_norm(tape, x, &format!("enc.{l}.ln2"))?;
            let f = self.ffn(tape, h, &format!("enc.{l}.ffn"))?;
            x = tape.add(x, f)?;
        }
        let out = self.layer_norm(tape, x, "enc.final_ln")?;
        Ok((out, ranges))
    }

    /// Batched teacher-forced decode. Equivalent to per-sample decodes, row
    /// for row; returns one stacked logits node plus per-sample bookkeeping.
    /// Bank taps come back per (layer, head) over the stacked rows.
    pub fn decode_many(
        &self,
        tape: &mut Tape,
        seqs: &[&[usize]],
        enc_out: NodeId,
        enc_ranges: &[(usize, usize)],
        collect_traces: bool,
    ) -> Result<BatchDecode> {
        let cfg = &self.model.cfg;
        if seqs.len() != enc_ranges.len() {
            return Err(Error::contract(
                "decode_many needs one encoder range per sequence",
            ));
        }
        let mut ranges = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut start = 0;
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::contract("decode needs at least one token"));
            }
            if seq.len() > cfg.max_len {
                return Err(Error::contract(format!(
                    "sequence length {} exceeds max_len {}",
                    seq.len(),
                    cfg.max_len
                )));
            }
            ranges.push((start, seq.len()));
            start += seq.len();
            ids.extend_from_slice(seq);
            pos_ids.extend(0..seq.len());
        }
        let tok_emb = self.node("embed.tok");
        let emb = tape.gather_rows(tok_emb, &ids)?;
        let pos_table = self.node("embed.pos");
        let pos = tape.gather_rows(pos_table, &pos_ids)?;
        let mut x = tape.add(emb, pos)?;

        let mut self_traces: Vec<Vec<Vec<AttentionTrace>>> =
            vec![Vec::with_capacity(cfg.layers); seqs.len()];
        // Layer-averaged memory attention score accumulators per sample row.
        let mut score_acc: Vec<Vec<f64>> =
            seqs.iter().map(|s| vec![0.0; s.len()]).collect();
        let mut score_layers = 0usize;
        let mut bank_taps = Vec::with_capacity(cfg.layers);
        let mut memory_content_nodes = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let h = self.layer_norm(tape, x, &format!("dec.{l}.ln1"))?;
            let carries = layer_carries_memory(cfg, self.model.mode, l);
            let learnable_pairs: Vec<(NodeId, NodeId)>;
            let memory: Option<MemorySource<'_>> = match self.model.mode {
                MemoryMode::Baseline => None,
                MemoryMode::Pma => {
                    if carries {
                        self.model.memories[l]
                            .as_ref()
                            .map(|heads| MemorySource::Prototypes(heads.as_slice()))
                    } else {
                        None
                    }
                }
                MemoryMode::LearnableMem => {
                    if carries {
                        learnable_pairs = (0..cfg.heads)
                            .map(|hd| {
                                (
                                    self.node(&format!("dec.{l}.mem.{hd}.mk")),
                                    self.node(&format!("dec.{l}.mem.{hd}.mv")),
                                )
                            })
                            .collect();
                        Some(MemorySource::Learnable(&learnable_pairs))
                    } else {
                        None
                    }
                }
            };
            let seg = if memory.is_some() && cfg.use_segment_embeddings {
                Some(SegmentNodes {
                    mem: self.node(&format!("dec.{l}.seg.mem")),
                    input: self.node(&format!("dec.{l}.seg.input")),
                })
            } else {
                None
            };
            let mha = self.batched_mha(
                tape,
                &format!("dec.{l}.self"),
                h,
                &ranges,
                h,
                &ranges,
                seg,
                memory,
                true,
            )?;
            x = tape.add(x, mha.out)?;
            if mha.mem_cols > 0 {
                score_layers += 1;
                for (si, heads) in mha.weight_nodes.iter().enumerate() {
                    let len = ranges[si].1;
                    for pos in 0..len {
                        let mut mem_sum = 0.0;
                        let mut inp_sum = 0.0;
                        for &w in heads {
                            let row = tape.value(w).row(pos);
                            mem_sum += row[..mha.mem_cols].iter().sum::<f64>();
                            inp_sum += row[mha.mem_cols..].iter().sum::<f64>();
                        }
                        let mem_mean = mem_sum / (heads.len() * mha.mem_cols) as f64;
                        let inp_mean = inp_sum / (heads.len() * len) as f64;
                        score_acc[si][pos] += mem_mean / (mem_mean + inp_mean);
                    }
                }
            }
            if collect_traces {
                for (si, heads) in mha.weight_nodes.iter().enumerate() {
                    let traces: Result<Vec<AttentionTrace>> = heads
                        .iter()
                        .map(|&w| {
                            AttentionTrace::new(tape.value(w).to_tensor(), mha.mem_cols)
                        })
                        .collect();
                    self_traces[si].push(traces?);
                }
            }
            bank_taps.push(mha.head_kv);
            memory_content_nodes.push(mha.memory_nodes);

            let h = self.layer_norm(tape, x, &format!("dec.{l}.ln2"))?;
            let cross = self.batched_mha(
                tape,
                &format!("dec.{l}.cross"),
                h,
                &ranges,
                enc_out,
                enc_ranges,
                None,
                None,
                false,
            )?;
            x = tape.add(x, cross.out)?;

            let h = self.layer_norm(tape, x, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(tape, h, &format!("dec.{l}.ffn"))?;
            x = tape.add(x, f)?;
        }
        let x = self.layer_norm(tape, x, "dec.final_ln")?;
        let logits = self.linear(tape, x, "out_proj.w", "out_proj.b")?;
        let mem_scores = (score_layers > 0).then(|| {
            score_acc
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|v| v / score_layers as f64)
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        });
        Ok(BatchDecode {
            logits,
            sample_ranges: ranges,
            self_traces,
            mem_scores,
            bank_taps,
            memory_content_nodes,
        })
    }

    /// Shared core for batched attention: projections over the stacked rows,
    /// attention per (sample, head), heads reconcatenated per sample.
    #[allow(clippy::too_many_arguments)]
    fn batched_mha(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x_q: NodeId,
        q_ranges: &[(usize, usize)],
        x_kv: NodeId,
        kv_ranges: &[(usize, usize)],
        seg: Option<SegmentNodes>,
        memory: Option<MemorySource<'_>>,
        causal: bool,
    ) -> Result<BatchedMha> {
        let cfg = &self.model.cfg;
        let heads = cfg.heads;
        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let params = self.attn_params(prefix);
        let mem_cols = match &memory {
            Some(MemorySource::Prototypes(protos)) => {
                if protos.len() != heads {
                    return Err(Error::contract(format!(
                        "expected {heads} per-head prototype memories, got {}",
                        protos.len()
                    )));
                }
                cfg.memory_slots
            }
            Some(MemorySource::Learnable(pairs)) => {
                if pairs.len() != heads {
                    return Err(Error::contract(format!(
                        "expected {heads} per-head learnable memories, got {}",
                        pairs.len()
                    )));
                }
                cfg.memory_slots
            }
            None => 0,
        };

        let q_full = {
            let p = tape.matmul(x_q, params.wq)?;
            tape.add_row_broadcast(p, params.bq)?
        };
        let k_full = tape.matmul(x_kv, params.wk)?;
        let v_full = {
            let p = tape.matmul(x_kv, params.wv)?;
            tape.add_row_broadcast(p, params.bv)?
        };

        // Causal biases shared across heads and samples of equal length.
        let mut bias_cache: std::collections::BTreeMap<usize, Arc<Tensor>> =
            std::collections::BTreeMap::new();

        let mut head_kv = Vec::with_capacity(heads);
        let mut memory_nodes = Vec::new();
        let mut per_sample_heads: Vec<Vec<NodeId>> =
            vec![Vec::with_capacity(heads); q_ranges.len()];
        let mut weight_nodes: Vec<Vec<NodeId>> =
            vec![Vec::with_capacity(heads); q_ranges.len()];
        for h in 0..heads {
            let off = h * head_dim;
            let qh = tape.slice_cols(q_full, off, head_dim)?;
            let kh = tape.slice_cols(k_full, off, head_dim)?;
            let vh = tape.slice_cols(v_full, off, head_dim)?;
            head_kv.push((kh, vh));

            // Memory blocks are prepared once per head and shared by every
            // sample; prototype contents enter behind stop_grad.
            let mem_parts = match &memory {
                None => None,
                Some(MemorySource::Prototypes(protos)) => {
                    let p = &protos[h];
                    if p.slots() != cfg.memory_slots || p.head_dim() != head_dim {
                        return Err(Error::DimMismatch {
                            op: "multi_head_attention",
                            left: vec![cfg.memory_slots, head_dim],
                            right: p.keys.shape().to_vec(),
                        });
                    }
                    let keys = tape.constant_ref(&p.keys);
                    let values = tape.constant_ref(&p.values);
                    memory_nodes.push((keys, values));
                    let mk = tape.stop_grad(keys);
                    let mv = tape.stop_grad(values);
                    Some((mk, mv))
                }
                Some(MemorySource::Learnable(pairs)) => {
                    let (keys, values) = pairs[h];
                    memory_nodes.push((keys, values));
                    Some((keys, values))
                }
            };
            let mem_parts = match (mem_parts, seg) {
                (Some((mk, mv)), Some(s)) => Some((tape.add_row_broadcast(mk, s.mem)?, mv)),
                (other, _) => other,
            };
            let k_in = match (memory.is_some(), seg) {
                (true, Some(s)) => tape.add_row_broadcast(kh, s.input)?,
                _ => kh,
            };

            for (si, (&(qs, ql), &(ks, kl))) in
                q_ranges.iter().zip(kv_ranges).enumerate()
            {
                let bias = if causal {
                    debug_assert_eq!(ql, kl, "causal attention is square");
                    Some(
                        bias_cache
                            .entry(ql)
                            .or_insert_with(|| {
                                BoolMask::causal_with_memory(ql, kl, mem_cols).bias_tensor()
                            })
                            .clone(),
                    )
                } else {
                    None
                };
                let mem_len = cfg.memory_slots;
                let (key_parts, value_parts) = match mem_parts {
                    Some((mk, mv)) => (
                        vec![(mk, 0, mem_len), (k_in, ks, kl)],
                        vec![(mv, 0, mem_len), (vh, ks, kl)],
                    ),
                    None => (vec![(k_in, ks, kl)], vec![(vh, ks, kl)]),
                };
                let w = tape.sdpa_weights_ranged((qh, qs, ql), &key_parts, scale, bias)?;
                let o = tape.weighted_sum_parts_ranged(w, &value_parts)?;
                per_sample_heads[si].push(o);
                weight_nodes[si].push(w);
            }
        }

        let mut sample_outs = Vec::with_capacity(q_ranges.len());
        for heads_out in &per_sample_heads {
            sample_outs.push(tape.concat_cols(heads_out)?);
        }
        let merged = tape.concat_rows(&sample_outs)?;
        let projected = tape.matmul(merged, params.wo)?;
        let out = tape.add_row_broadcast(projected, params.bo)?;
        Ok(BatchedMha {
            out,
            weight_nodes,
            mem_cols,
            head_kv,
            memory_nodes,
        })
    }
}

/// Output of a batched teacher-forced decode.
pub struct BatchDecode {
    /// Stacked logits over all sample rows.
    pub logits: NodeId,
    /// Per sample: (row start, row count) into the stacked rows.
    pub sample_ranges: Vec<(usize, usize)>,
    /// Decoder self-attention traces, per sample, per layer, per head;
    /// populated only when requested.
    pub self_traces: Vec<Vec<Vec<AttentionTrace>>>,
    /// Layer-averaged memory attention score per sample row, present when
    /// any decoder layer carried memory.
    pub mem_scores: Option<Vec<Vec<f64>>>,
    /// Raw per-head (K, V) activation nodes over the stacked rows, per
    /// layer; memory banks consume sample rows out of these.
    pub bank_taps: Vec<Vec<(NodeId, NodeId)>>,
    /// Constant nodes holding installed prototype contents, per layer.
    pub memory_content_nodes: Vec<Vec<(NodeId, NodeId)>>,
}

struct BatchedMha {
    out: NodeId,
    /// Attention-weight nodes per sample, per head.
    weight_nodes: Vec<Vec<NodeId>>,
    mem_cols: usize,
    head_kv: Vec<(NodeId, NodeId)>,
    memory_nodes: Vec<(NodeId, NodeId)>,
}

fn init_params(cfg: &ModelConfig, mode: MemoryMode, seed: u64) -> ParamStore {
    let mut rng = Rng::derive(seed, &[0x1217]);
    let mut params = ParamStore::new();
    let d = cfg.d_model;
    let emb_scale = 1.0 / (d as f64).sqrt();

    let normal = |rng: &mut Rng, shape: Vec<usize>, scale: f64| {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(t.data_mut(), scale);
        t
    };
    let xavier = |rng: &mut Rng, rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let mut t = Tensor::zeros(vec![rows, cols]);
        rng.fill_uniform(t.data_mut(), -a, a);
        t
    };

    params.insert(
        "embed.tok".into(),
        normal(&mut rng, vec![cfg.vocab, d], emb_scale),
    );
    params.insert(
        "embed.pos".into(),
        normal(&mut rng, vec![cfg.max_len, d], emb_scale),
    );
    params.insert("feat_proj.w".into(), xavier(&mut rng, cfg.d_feat, d));
    params.insert("feat_proj.b".into(), Tensor::zeros(vec![d]));

    let attn_block = |rng: &mut Rng, params: &mut ParamStore, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{prefix}.{w}"), xavier(rng, d, d));
        }
        // No key bias: it cancels in the softmax.
        for b in ["bq", "bv", "bo"] {
            params.insert(format!("{prefix}.{b}"), Tensor::zeros(vec![d]));
        }
    };
    let ln_block = |params: &mut ParamStore, prefix: &str| {
        params.insert(format!("{prefix}.g"), Tensor::new(vec![d], vec![1.0; d]).unwrap());
        params.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
    };
    let ffn_block = |rng: &mut Rng, params: &mut ParamStore, prefix: &str| {
        params.insert(format!("{prefix}.w1"), xavier(rng, d, cfg.ffn_dim));
        params.insert(format!("{prefix}.b1"), Tensor::zeros(vec![cfg.ffn_dim]));
        params.insert(format!("{prefix}.w2"), xavier(rng, cfg.ffn_dim, d));
        params.insert(format!("{prefix}.b2"), Tensor::zeros(vec![d]));
    };

    for l in 0..cfg.layers {
        ln_block(&mut params, &format!("enc.{l}.ln1"));
        attn_block(&mut rng, &mut params, &format!("enc.{l}.attn"));
        ln_block(&mut params, &format!("enc.{l}.ln2"));
        ffn_block(&mut rng, &mut params, &format!("enc.{l}.ffn"));
    }
    ln_block(&mut params, "enc.final_ln");

    for l in 0..cfg.layers {
        ln_block(&mut params, &format!("dec.{l}.ln1"));
        attn_block(&mut rng, &mut params, &format!("dec.{l}.self"));
        ln_block(&mut params, &format!("dec.{l}.ln2"));
        attn_block(&mut rng, &mut params, &format!("dec.{l}.cross"));
        ln_block(&mut params, &format!("dec.{l}.ln3"));
        ffn_block(&mut rng, &mut params, &format!("dec.{l}.ffn"));
        if layer_carries_memory(cfg, mode, l) {
            if cfg.use_segment_embeddings {
                // Zero init: memory-augmented attention starts exactly at the
                // plain-attention operating point.
                params.insert(
                    format!("dec.{l}.seg.mem"),
                    Tensor::zeros(vec![cfg.head_dim()]),
                );
                params.insert(
                    format!("dec.{l}.seg.input"),
                    Tensor::zeros(vec![cfg.head_dim()]),
                );
            }
            if mode == MemoryMode::LearnableMem {
                let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
                for h in 0..cfg.heads {
                    params.insert(
                        format!("dec.{l}.mem.{h}.mk"),
                        normal(&mut rng, vec![cfg.memory_slots, cfg.head_dim()], scale),
                    );
                    params.insert(
                        format!("dec.{l}.mem.{h}.mv"),
                        normal(&mut rng, vec![cfg.memory_slots, cfg.head_dim()], scale),
                    );
                }
            }
        }
    }
    ln_block(&mut params, "dec.final_ln");

    params.insert("out_proj.w".into(), xavier(&mut rng, d, cfg.vocab));
    params.insert("out_proj.b".into(), Tensor::zeros(vec![cfg.vocab]));
    params
}

/// Closed-form parameter count for a config/mode pair; guards architecture
/// drift across refactors.
pub fn param_count_formula(cfg: &ModelConfig, mode: MemoryMode) -> usize {
    let d = cfg.d_model;
    let attn = 4 * d * d + 3 * d;
    let ln = 2 * d;
    let ffn = d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d;
    let mut total = 0;
    total += cfg.vocab * d; // token embedding
    total += cfg.max_len * d; // positional embedding
    total += cfg.d_feat * d + d; // feature projection
    total += cfg.layers * (attn + 2 * ln + ffn); // encoder stack
    total += ln; // encoder final norm
    total += cfg.layers * (2 * attn + 3 * ln + ffn); // decoder stack
    total += ln; // decoder final norm
    total += d * cfg.vocab + cfg.vocab; // output projection
    for l in 0..cfg.layers {
        if layer_carries_memory(cfg, mode, l) {
            if cfg.use_segment_embeddings {
                total += 2 * cfg.head_dim();
            }
            if mode == MemoryMode::LearnableMem {
                total += cfg.heads * 2 * cfg.memory_slots * cfg.head_dim();
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            ffn_dim: 24,
            vocab: 9,
            max_len: 6,
            d_feat: 8,
            memory_slots: 4,
            memory_in_first_layer: true,
            use_segment_embeddings: true,
        }
    }

    fn random_features(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![rows, cols]);
        rng.fill_normal(t.data_mut(), 1.0);
        t
    }

    fn random_protos(rng: &mut Rng, cfg: &ModelConfig) -> Vec<Option<Vec<PrototypeMemory>>> {
        (0..cfg.layers)
            .map(|_| {
                Some(
                    (0..cfg.heads)
                        .map(|_| {
                            let mut k = Tensor::zeros(vec![cfg.memory_slots, cfg.head_dim()]);
                            let mut v = Tensor::zeros(vec![cfg.memory_slots, cfg.head_dim()]);
                            rng.fill_normal(k.data_mut(), 1.0);
                            rng.fill_normal(v.data_mut(), 1.0);
                            PrototypeMemory {
                                keys: k,
                                values: v,
                                built_at_step: 5,
                                k_used: 2,
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn param_count_matches_formula() {
        for mode in [MemoryMode::Baseline, MemoryMode::Pma, MemoryMode::LearnableMem] {
            for first in [true, false] {
                for segs in [true, false] {
                    let mut cfg = tiny_cfg();
                    cfg.memory_in_first_layer = first;
                    cfg.use_segment_embeddings = segs;
                    cfg.layers = 2;
                    let model = Captioner::new(cfg.clone(), mode, 3).unwrap();
                    assert_eq!(
                        model.param_count(),
                        param_count_formula(&cfg, mode),
                        "mode {mode}, first {first}, segs {segs}"
                    );
                }
            }
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let model = Captioner::new(cfg.clone(), MemoryMode::Baseline, 1).unwrap();
        let mut rng = Rng::new(2);
        let feats = random_features(&mut rng, 4, cfg.d_feat);
        // Permute rows 0..4 -> [2, 0, 3, 1].
        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_rows(
            &perm.iter().map(|&i| feats.row(i).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let run = |f: &Tensor| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let enc = bound.encode(&mut tape, f).unwrap();
            tape.value(enc).to_tensor()
        };
        let a = run(&feats);
        let b = run(&permuted);
        assert_eq!(a.shape(), &[4, cfg.d_model]);
        // Attention reduces over keys in permuted order, so equivariance is
        // exact only up to reassociation of the sums.
        for (out_row, &src) in perm.iter().enumerate() {
            for c in 0..cfg.d_model {
                assert!(
                    (b.at(out_row, c) - a.at(src, c)).abs() < 1e-12,
                    "row {out_row} col {c}"
                );
            }
        }
    }

    #[test]
    fn encode_identical_rows_identical_outputs() {
        let cfg = tiny_cfg();
        let model = Captioner::new(cfg.clone(), MemoryMode::Baseline, 1).unwrap();
        let mut rng = Rng::new(5);
        let row: Vec<f64> = (0..cfg.d_feat).map(|_| rng.normal()).collect();
        let feats = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &feats).unwrap();
        let v = tape.value(enc);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
    }

    #[test]
    fn encode_rejects_wrong_feature_dim() {
        let cfg = tiny_cfg();
        let model = Captioner::new(cfg, MemoryMode::Baseline, 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let bad = Tensor::zeros(vec![3, 5]);
        assert!(matches!(
            bound.encode(&mut tape, &bad),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn decode_causality_under_suffix_edits() {
        let cfg = tiny_cfg();
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 7).unwrap();
        let mut rng = Rng::new(3);
        model.install_memories(random_protos(&mut rng, &cfg)).unwrap();
        let feats = random_features(&mut rng, 3, cfg.d_feat);
        let logits_for = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let enc = bound.encode(&mut tape, &feats).unwrap();
            let out = bound.decode_teacher_forced(&mut tape, tokens, enc).unwrap();
            tape.value(out.logits).to_tensor()
        };
        let base_tokens = [1usize, 4, 5, 3, 7];
        let base = logits_for(&base_tokens);
        // Random suffix edits leave every earlier position bitwise intact.
        for trial in 0..8 {
            let edit_at = 1 + rng.below(4);
            let mut edited_tokens = base_tokens.to_vec();
            for t in edit_at..edited_tokens.len() {
                edited_tokens[t] = rng.below(cfg.vocab);
            }
            if edited_tokens == base_tokens {
                continue;
            }
            let edited = logits_for(&edited_tokens);
            for t in 0..edit_at {
                assert_eq!(base.row(t), edited.row(t), "trial {trial}, position {t}");
            }
        }
    }

    #[test]
    fn decode_logits_shape_and_token_range() {
        let cfg = tiny_cfg();
        let model = Captioner::new(cfg.clone(), MemoryMode::Baseline, 7).unwrap();
        let mut rng = Rng::new(4);
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &feats).unwrap();
        let out = bound.decode_teacher_forced(&mut tape, &[1, 2, 3], enc).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[3, cfg.vocab]);
        assert!(matches!(
            bound.decode_teacher_forced(&mut tape, &[1, 99], enc),
            Err(Error::Index(_))
        ));
        assert!(bound
            .decode_teacher_forced(&mut tape, &[1; 7], enc)
            .is_err());
    }

    #[test]
    fn baseline_and_uninstalled_pma_forward_bitwise_equal() {
        let cfg = tiny_cfg();
        let pma = Captioner::new(cfg.clone(), MemoryMode::Pma, 11).unwrap();
        let mut base_cfg = cfg.clone();
        base_cfg.memory_slots = 0;
        let mut baseline = Captioner::new(base_cfg, MemoryMode::Baseline, 11).unwrap();
        // Share every parameter the baseline knows about.
        let shared: Vec<String> = baseline.params().keys().cloned().collect();
        for name in shared {
            let v = pma.params()[&name].clone();
            baseline.params_mut().insert(name, v);
        }
        let mut rng = Rng::new(9);
        let feats = random_features(&mut rng, 3, cfg.d_feat);
        let tokens = [1usize, 5, 2, 8];
        let run = |m: &Captioner| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let enc = bound.encode(&mut tape, &feats).unwrap();
            let out = bound.decode_teacher_forced(&mut tape, &tokens, enc).unwrap();
            tape.value(out.logits).to_tensor()
        };
        let a = run(&pma);
        let b = run(&baseline);
        assert_eq!(a.data(), b.data(), "bitwise identity");
    }

    #[test]
    fn install_then_forward_matches_fresh_model_with_same_prototypes() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(21);
        let protos = random_protos(&mut rng, &cfg);
        let mut a = Captioner::new(cfg.clone(), MemoryMode::Pma, 13).unwrap();
        a.install_memories(protos.clone()).unwrap();
        let mut b = Captioner::new(cfg.clone(), MemoryMode::Pma, 13).unwrap();
        b.install_memories(protos).unwrap();
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let run = |m: &Captioner| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let enc = bound.encode(&mut tape, &feats).unwrap();
            let out = bound.decode_teacher_forced(&mut tape, &[1, 4, 6], enc).unwrap();
            tape.value(out.logits).to_tensor()
        };
        assert_eq!(run(&a).data(), run(&b).data());
    }

    #[test]
    fn first_layer_gate_ignores_installed_slot() {
        let mut cfg = tiny_cfg();
        cfg.layers = 2;
        cfg.memory_in_first_layer = false;
        let mut rng = Rng::new(31);
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 17).unwrap();
        let protos = random_protos(&mut rng, &cfg);
        model.install_memories(protos).unwrap();
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &feats).unwrap();
        let out = bound.decode_teacher_forced(&mut tape, &[1, 3, 5], enc).unwrap();
        // Layer 0 ran plain; layer 1 carried memory.
        assert_eq!(out.self_traces[0][0].memory_cols(), 0);
        assert_eq!(out.self_traces[1][0].memory_cols(), cfg.memory_slots);
    }

    #[test]
    fn install_none_returns_to_baseline_path() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(41);
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 19).unwrap();
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let tokens = [1usize, 2, 3];
        let run = |m: &Captioner| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let enc = bound.encode(&mut tape, &feats).unwrap();
            let out = bound.decode_teacher_forced(&mut tape, &tokens, enc).unwrap();
            tape.value(out.logits).to_tensor()
        };
        let before = run(&model);
        model.install_memories(random_protos(&mut rng, &cfg)).unwrap();
        let with_mem = run(&model);
        assert_ne!(before.data(), with_mem.data());
        model.install_memories(vec![None; cfg.layers]).unwrap();
        let after = run(&model);
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn install_rejects_shape_mismatch() {
        let cfg = tiny_cfg();
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 23).unwrap();
        let mut rng = Rng::new(50);
        let mut protos = random_protos(&mut rng, &cfg);
        // Wrong slot count on one head.
        if let Some(heads) = protos[0].as_mut() {
            heads[0].keys = Tensor::zeros(vec![cfg.memory_slots + 1, cfg.head_dim()]);
            heads[0].values = Tensor::zeros(vec![cfg.memory_slots + 1, cfg.head_dim()]);
        }
        assert!(matches!(
            model.install_memories(protos),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn generate_caps_length_and_is_deterministic() {
        let cfg = tiny_cfg();
        let model = Captioner::new(cfg.clone(), MemoryMode::Baseline, 29).unwrap();
        let mut rng = Rng::new(61);
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let a = model
            .generate(&feats, cfg.max_len, GenMode::Greedy, 1, 2)
            .unwrap();
        let b = model
            .generate(&feats, cfg.max_len, GenMode::Greedy, 1, 2)
            .unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= cfg.max_len);
        assert_eq!(a[0], 1);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(71);
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 37).unwrap();
        model.install_memories(random_protos(&mut rng, &cfg)).unwrap();
        for trial in 0..5 {
            let feats = random_features(&mut rng, 3, cfg.d_feat);
            let g = model
                .generate(&feats, cfg.max_len, GenMode::Greedy, 1, 2)
                .unwrap();
            let b = model
                .generate(&feats, cfg.max_len, GenMode::Beam(1), 1, 2)
                .unwrap();
            assert_eq!(g, b, "trial {trial}");
        }
    }

    #[test]
    fn memory_contents_receive_zero_adjoint_but_segments_learn() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(81);
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 43).unwrap();
        model.install_memories(random_protos(&mut rng, &cfg)).unwrap();
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &feats).unwrap();
        let out = bound
            .decode_teacher_forced(&mut tape, &[1, 4, 5, 3], enc)
            .unwrap();
        let loss = tape.cross_entropy(out.logits, &[4, 5, 3, 2], None).unwrap();
        tape.backward(loss).unwrap();
        for layer_nodes in &out.memory_content_nodes {
            for &(mk, mv) in layer_nodes {
                assert!(tape.grad(mk).data().iter().all(|&g| g == 0.0));
                assert!(tape.grad(mv).data().iter().all(|&g| g == 0.0));
            }
        }
        let seg_grad = tape.grad(bound.node("dec.0.seg.mem"));
        assert!(seg_grad.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn learnable_memory_receives_gradient() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(91);
        let model = Captioner::new(cfg.clone(), MemoryMode::LearnableMem, 47).unwrap();
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &feats).unwrap();
        let out = bound.decode_teacher_forced(&mut tape, &[1, 4, 5], enc).unwrap();
        let loss = tape.cross_entropy(out.logits, &[4, 5, 2], None).unwrap();
        tape.backward(loss).unwrap();
        let gk = tape.grad(bound.node("dec.0.mem.0.mk"));
        let gv = tape.grad(bound.node("dec.0.mem.0.mv"));
        assert!(gk.data().iter().any(|&g| g != 0.0));
        assert!(gv.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn full_tiny_model_gradient_check() {
        // Finite differences over a few representative parameters of the
        // full model, memory installed, segment embeddings active.
        let cfg = tiny_cfg();
        let mut rng = Rng::new(101);
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 53).unwrap();
        // Non-zero segment embeddings so their gradient path is exercised.
        for l in 0..cfg.layers {
            for part in ["mem", "input"] {
                let name = format!("dec.{l}.seg.{part}");
                let mut t = Tensor::zeros(vec![cfg.head_dim()]);
                rng.fill_normal(t.data_mut(), 0.2);
                model.params_mut().insert(name, t);
            }
        }
        model.install_memories(random_protos(&mut rng, &cfg)).unwrap();
        let feats = random_features(&mut rng, 2, cfg.d_feat);
        let tokens = [1usize, 4, 5, 3];
        let targets = [4usize, 5, 3, 2];

        let loss_of = |m: &Captioner| -> f64 {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let enc = bound.encode(&mut tape, &feats).unwrap();
            let out = bound.decode_teacher_forced(&mut tape, &tokens, enc).unwrap();
            let l = tape.cross_entropy(out.logits, &targets, None).unwrap();
            tape.value(l).data()[0]
        };

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode(&mut tape, &feats).unwrap();
        let out = bound.decode_teacher_forced(&mut tape, &tokens, enc).unwrap();
        let loss = tape.cross_entropy(out.logits, &targets, None).unwrap();
        tape.backward(loss).unwrap();

        let h = 1e-5;
        for name in [
            "embed.tok",
            "dec.0.self.wq",
            "dec.0.seg.mem",
            "dec.0.seg.input",
            "enc.0.ffn.w1",
            "dec.0.ln2.g",
            "out_proj.w",
        ] {
            let analytic = tape.grad(bound.node(name));
            let n = analytic.numel();
            // Probe a handful of coordinates per tensor.
            for probe in 0..4.min(n) {
                let idx = probe * (n / 4.min(n)).max(1) % n;
                let mut plus = model.params()[name].clone();
                plus.data_mut()[idx] += h;
                let mut minus = model.params()[name].clone();
                minus.data_mut()[idx] -= h;
                let mut m2 = Captioner::new(cfg.clone(), MemoryMode::Pma, 53).unwrap();
                m2.params_mut().clone_from(model.params());
                m2.install_memories(model.memories().to_vec()).unwrap();
                m2.params_mut().insert(name.into(), plus);
                let lp = loss_of(&m2);
                m2.params_mut().insert(name.into(), minus);
                let lm = loss_of(&m2);
                let cd = (lp - lm) / (2.0 * h);
                let a = analytic.data()[idx];
                let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {a}, cd {cd}, rel {rel}");
            }
        }
    }
}

#[cfg(test)]
mod batched_tests {
    use super::*;
    use crate::prototypes::PrototypeMemory;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            ffn_dim: 24,
            vocab: 9,
            max_len: 6,
            d_feat: 8,
            memory_slots: 4,
            memory_in_first_layer: true,
            use_segment_embeddings: true,
        }
    }

    #[test]
    fn batched_forward_bitwise_matches_per_sample() {
        let cfg = cfg();
        let mut rng = Rng::new(3);
        let mut model = Captioner::new(cfg.clone(), MemoryMode::Pma, 5).unwrap();
        // Non-zero segment embeddings and installed memories: the full path.
        for l in 0..cfg.layers {
            for part in ["mem", "input"] {
                let mut t = Tensor::zeros(vec![cfg.head_dim()]);
                rng.fill_normal(t.data_mut(), 0.2);
                model.params_mut().insert(format!("dec.{l}.seg.{part}"), t);
            }
        }
        let protos = (0..cfg.layers)
            .map(|_| {
                Some(
                    (0..cfg.heads)
                        .map(|_| {
                            let mut k = Tensor::zeros(vec![4, cfg.head_dim()]);
                            let mut v = Tensor::zeros(vec![4, cfg.head_dim()]);
                            rng.fill_normal(k.data_mut(), 1.0);
                            rng.fill_normal(v.data_mut(), 1.0);
                            PrototypeMemory {
                                keys: k,
                                values: v,
                                built_at_step: 0,
                                k_used: 1,
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        model.install_memories(protos).unwrap();

        let feats: Vec<Tensor> = (0..3)
            .map(|_| {
                let mut t = Tensor::zeros(vec![3, cfg.d_feat]);
                rng.fill_normal(t.data_mut(), 1.0);
                t
            })
            .collect();
        let seqs: Vec<Vec<usize>> = vec![vec![1, 4, 6, 3, 7], vec![1, 2, 5, 8, 3], vec![1, 8, 7, 6, 5]];

        // Batched route.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let feat_refs: Vec<&Tensor> = feats.iter().collect();
        let (enc, enc_ranges) = bound.encode_many(&mut tape, &feat_refs).unwrap();
        let seq_refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let batched = bound
            .decode_many(&mut tape, &seq_refs, enc, &enc_ranges, true)
            .unwrap();
        let batched_logits = tape.value(batched.logits).to_tensor();

        // Per-sample route.
        for (si, (f, seq)) in feats.iter().zip(&seqs).enumerate() {
            let mut t2 = Tape::new();
            let b2 = model.bind(&mut t2);
            let e = b2.encode(&mut t2, f).unwrap();
            let out = b2.decode_teacher_forced(&mut t2, seq, e).unwrap();
            let single = t2.value(out.logits).to_tensor();
            let (start, len) = batched.sample_ranges[si];
            for r in 0..len {
                assert_eq!(
                    single.row(r),
                    batched_logits.row(start + r),
                    "sample {si} row {r} diverges between batched and per-sample"
                );
            }
            // Traces match bitwise too.
            for (l, heads) in out.self_traces.iter().enumerate() {
                for (h, tr) in heads.iter().enumerate() {
                    assert_eq!(
                        tr.weights().data(),
                        batched.self_traces[si][l][h].weights().data()
                    );
                }
            }
        }
    }
}
