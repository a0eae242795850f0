//! Cross-entropy training loop with interleaved bank pushes and prototype
//! refreshes.
//!
//! Per step: teacher-forced forward over a batch, detached per-head K/V
//! pushes into each eligible layer's banks, prototype rebuild plus install
//! when a refresh is due (then the banks slide by the stride), backward,
//! Adam update under the warmup/plateau/decay schedule. Everything is
//! deterministic given (seed, config): batch order comes from per-epoch
//! derived shuffles and clustering seeds from (seed, layer, head, refresh
//! count), so a resumed run reproduces an uninterrupted one bit for bit.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::captioner::{layer_carries_memory, Captioner, ParamStore};
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::numerics::{Tape, Tensor};
use crate::pool::worker_pool;
use crate::prototypes::{compute_prototypes, PrototypeMemory};
use crate::rng::Rng;
use crate::trainkit::config::TrainConfig;
use crate::trainkit::data::{ToyDataset, ToySample, PAD};
use crate::trainkit::schedule::lr_at;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.begin_step();
        for (name, g) in grads {
            self.update_one(params, name, g.data(), lr);
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one parameter's Adam step; `begin_step` must have advanced the
    /// step counter first.
    pub fn update_one(&mut self, params: &mut ParamStore, name: &str, g: &[f64], lr: f64) {
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let p = params.get_mut(name).expect("gradient for unknown param");
        let m = self.m.get_mut(name).expect("moment for unknown param");
        let v = self.v.get_mut(name).expect("moment for unknown param");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g[i];
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// One metrics-log line; serialized as a JSON object per step.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub token_acc: f64,
    pub mem_attn_score: Option<f64>,
    pub refresh: bool,
}

pub struct TrainState {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub model: Captioner,
    pub adam: AdamState,
    /// Per decoder layer, per head; empty vec for layers that never carry
    /// memory under the config.
    pub banks: Vec<Vec<MemoryBank>>,
    /// Samples consumed from the epoch stream so far.
    pub sample_counter: u64,
    pub refresh_count: u64,
}

impl TrainState {
    pub fn new(mut config: TrainConfig) -> Result<Self> {
        config.finalize()?;
        let model = Captioner::new(config.model.clone(), config.mode, config.seed)?;
        let adam = AdamState::new(model.params());
        let banks = make_banks(&config)?;
        Ok(TrainState {
            config,
            step: 0,
            model,
            adam,
            banks,
            sample_counter: 0,
            refresh_count: 0,
        })
    }
}

pub(crate) fn make_banks(config: &TrainConfig) -> Result<Vec<Vec<MemoryBank>>> {
    if !config.uses_banks() {
        return Ok(vec![Vec::new(); config.model.layers]);
    }
    (0..config.model.layers)
        .map(|l| {
            if !layer_carries_memory(&config.model, config.mode, l) {
                return Ok(Vec::new());
            }
            (0..config.model.heads)
                .map(|_| MemoryBank::new(config.t_bank, config.stride))
                .collect()
        })
        .collect()
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, &[0xba7c, epoch]).shuffle(&mut order);
    order
}

/// The next `batch_size` sample indices of the deterministic epoch stream.
pub(crate) fn next_batch_indices(
    seed: u64,
    n: usize,
    counter: &mut u64,
    batch_size: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = *counter / n as u64;
    let mut pos = (*counter % n as u64) as usize;
    let mut order = epoch_order(seed, epoch, n);
    for _ in 0..batch_size {
        if pos == n {
            epoch += 1;
            pos = 0;
            order = epoch_order(seed, epoch, n);
        }
        out.push(order[pos]);
        pos += 1;
        *counter += 1;
    }
    out
}

pub(crate) fn derive_seed(seed: u64, salts: &[u64]) -> u64 {
    Rng::derive(seed, salts).next_u64()
}

struct BatchForward {
    loss: f64,
    token_acc: f64,
    mem_attn_score: Option<f64>,
    /// Per eligible layer, per head: detached batch K/V rows for the banks.
    bank_rows: Vec<Vec<(Tensor, Tensor)>>,
    /// Parameter-name to tape-node mapping (present only when backward
    /// ran); adjoints are read straight off the tape.
    param_nodes: Option<BTreeMap<String, crate::numerics::NodeId>>,
}

/// Teacher-forced forward over a batch on one tape; optional backward.
fn forward_batch(
    model: &Captioner,
    samples: &[&ToySample],
    want_grads: bool,
    want_bank_rows: bool,
) -> Result<BatchForward> {
    let mut tape = Tape::new();
    forward_batch_on(&mut tape, model, samples, want_grads, want_bank_rows)
}

fn forward_batch_on(
    tape: &mut Tape,
    model: &Captioner,
    samples: &[&ToySample],
    want_grads: bool,
    want_bank_rows: bool,
) -> Result<BatchForward> {
    tape.reset();
    let bound = model.bind(tape);
    let cfg = model.cfg();
    let layers = cfg.layers;

    let features: Vec<&Tensor> = samples.iter().map(|s| &s.features).collect();
    let (enc, enc_ranges) = bound.encode_many(tape, &features)?;
    let inputs: Vec<&[usize]> = samples
        .iter()
        .map(|s| &s.caption[..s.caption.len() - 1])
        .collect();
    let decode = bound.decode_many(tape, &inputs, enc, &enc_ranges, false)?;
    let flat_targets: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.caption[1..].iter().copied())
        .collect();
    let loss_node = tape.cross_entropy(decode.logits, &flat_targets, Some(PAD))?;
    let loss = tape.value(loss_node).data()[0];

    // Teacher-forced token accuracy over non-pad targets.
    let logits_val = tape.value(decode.logits);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, &t) in flat_targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = logits_val.row(r);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty row");
        if argmax == t {
            hits += 1;
        }
        total += 1;
    }
    let token_acc = hits as f64 / total.max(1) as f64;

    // Memory attention score, averaged over samples and positions.
    let mem_attn_score = decode.mem_scores.as_ref().map(|per_sample| {
        let mut acc = 0.0;
        let mut count = 0usize;
        for scores in per_sample {
            for &s in scores {
                acc += s;
                count += 1;
            }
        }
        acc / count.max(1) as f64
    });

    // Detached copies of per-head K/V rows, pad positions excluded.
    let keep_rows: Vec<usize> = samples
        .iter()
        .zip(&decode.sample_ranges)
        .flat_map(|(s, &(start, len))| {
            let input = &s.caption[..s.caption.len() - 1];
            (0..len).filter_map(move |r| (input[r] != PAD).then_some(start + r))
        })
        .collect();
    let mut bank_rows: Vec<Vec<(Tensor, Tensor)>> = Vec::with_capacity(layers);
    if want_bank_rows && !keep_rows.is_empty() {
        for l in 0..layers {
            if !layer_carries_memory(cfg, model.mode(), l) {
                bank_rows.push(Vec::new());
                continue;
            }
            let mut per_head = Vec::with_capacity(cfg.heads);
            for &(k_id, v_id) in &decode.bank_taps[l] {
                let kv = tape.value(k_id);
                let vv = tape.value(v_id);
                let dim = kv.cols();
                let mut k_data = Vec::with_capacity(keep_rows.len() * dim);
                let mut v_data = Vec::with_capacity(keep_rows.len() * dim);
                for &r in &keep_rows {
                    k_data.extend_from_slice(kv.row(r));
                    v_data.extend_from_slice(vv.row(r));
                }
                per_head.push((
                    Tensor::new(vec![keep_rows.len(), dim], k_data)?,
                    Tensor::new(vec![keep_rows.len(), dim], v_data)?,
                ));
            }
            bank_rows.push(per_head);
        }
    } else {
        bank_rows = vec![Vec::new(); layers];
    }

    let param_nodes = if want_grads {
        if !loss.is_finite() {
            return Ok(BatchForward {
                loss,
                token_acc,
                mem_attn_score,
                bank_rows,
                param_nodes: None,
            });
        }
        tape.backward(loss_node)?;
        Some(bound.param_nodes().clone())
    } else {
        None
    };

    Ok(BatchForward {
        loss,
        token_acc,
        mem_attn_score,
        bank_rows,
        param_nodes,
    })
}

/// Run `steps` optimizer steps, invoking `on_step` with each step's metrics.
pub fn train(
    state: &mut TrainState,
    dataset: &ToyDataset,
    steps: u64,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<()> {
    if dataset.cfg != state.config.dataset {
        return Err(Error::config(
            "dataset was generated from a different dataset config",
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let n = dataset.train.len();
    let spec = state.config.prototype_spec();

    // One tape, reused across steps; its arenas stay allocated.
    let mut tape = Tape::new();
    for _ in 0..steps {
        let t = state.step + 1;
        let indices = next_batch_indices(
            state.config.seed,
            n,
            &mut state.sample_counter,
            state.config.batch_size,
        );
        let batch: Vec<&ToySample> = indices.iter().map(|&i| &dataset.train[i]).collect();
        let want_banks = state.config.uses_banks();
        let fwd = forward_batch_on(&mut tape, &state.model, &batch, true, want_banks)?;
        if !fwd.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }

        // Alg-order: push activations and refresh before the update.
        let mut refresh = false;
        if want_banks {
            let mut flags = Vec::new();
            for (l, per_head) in fwd.bank_rows.iter().enumerate() {
                for (h, (k, v)) in per_head.iter().enumerate() {
                    let flag = state.banks[l][h].push_batch(t, k.clone(), v.clone())?;
                    flags.push(flag);
                }
            }
            if !flags.is_empty() {
                debug_assert!(
                    flags.iter().all(|&f| f == flags[0]),
                    "bank refresh schedules diverged"
                );
                refresh = flags[0];
            }
            if refresh {
                let refresh_idx = state.refresh_count;
                let seed = state.config.seed;
                let jobs: Vec<(usize, usize)> = state
                    .banks
                    .iter()
                    .enumerate()
                    .flat_map(|(l, heads)| (0..heads.len()).map(move |h| (l, h)))
                    .collect();
                let banks = &state.banks;
                let protos: Vec<((usize, usize), PrototypeMemory)> =
                    worker_pool().install(|| {
                        jobs.par_iter()
                            .map(|&(l, h)| {
                                let cell_seed = derive_seed(
                                    seed,
                                    &[0x6b6d, l as u64, h as u64, refresh_idx],
                                );
                                compute_prototypes(&banks[l][h], &spec, cell_seed)
                                    .map(|p| ((l, h), p))
                            })
                            .collect::<Result<Vec<_>>>()
                    })?;
                let mut per_layer: Vec<Option<Vec<PrototypeMemory>>> =
                    vec![None; state.config.model.layers];
                for ((l, _h), proto) in protos {
                    per_layer[l].get_or_insert_with(Vec::new).push(proto);
                }
                state.model.install_memories(per_layer)?;
                for heads in state.banks.iter_mut() {
                    for bank in heads.iter_mut() {
                        bank.slide(state.config.stride)?;
                    }
                }
                state.refresh_count += 1;
            }
        }

        let lr = lr_at(t, &state.config.schedule);
        let param_nodes = fwd.param_nodes.as_ref().expect("gradients requested");
        state.adam.begin_step();
        for (name, &node) in param_nodes {
            state
                .adam
                .update_one(state.model.params_mut(), name, tape.grad_view(node), lr);
        }
        state.step = t;

        on_step(&StepMetrics {
            step: t,
            loss: fwd.loss,
            lr,
            token_acc: fwd.token_acc,
            mem_attn_score: fwd.mem_attn_score,
            refresh,
        });
    }
    Ok(())
}

/// Teacher-forced metrics for one batch without touching any state; used by
/// evaluation.
pub(crate) fn forward_eval(
    model: &Captioner,
    samples: &[&ToySample],
) -> Result<(f64, f64, Option<f64>)> {
    let fwd = forward_batch(model, samples, false, false)?;
    Ok((fwd.loss, fwd.token_acc, fwd.mem_attn_score))
}
