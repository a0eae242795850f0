//! Oracle-equivalence suite: independent brute-force recomputations checked
//! against the production paths. Backs the verify command and the
//! acceptance gate.

use crate::captioner::{Captioner, MemoryMode, ModelConfig};
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::numerics::{Tape, Tensor};
use crate::prototypes::{build_value_prototypes, PrototypeMemory};
use crate::rng::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub detail: String,
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    rng.fill_normal(t.data_mut(), scale);
    t
}

/// Brute-force route for the value-prototype interpolation: full distance
/// sort per prototype, exp(-distance) weights, plain accumulation.
fn value_prototypes_brute_force(
    proto_keys: &Tensor,
    bank_keys: &Tensor,
    bank_values: &Tensor,
    k: usize,
    normalize: bool,
) -> Tensor {
    let m = proto_keys.rows();
    let d = bank_values.cols();
    let mut out = Tensor::zeros(vec![m, d]);
    for i in 0..m {
        let query = proto_keys.row(i);
        let mut dists: Vec<(f64, usize)> = (0..bank_keys.rows())
            .map(|j| {
                let dist = bank_keys
                    .row(j)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (dist, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        let mut weight_sum = 0.0;
        let mut acc = vec![0.0; d];
        for &(dist, j) in dists.iter().take(k) {
            let w = (-dist).exp();
            weight_sum += w;
            for (a, &v) in acc.iter_mut().zip(bank_values.row(j)) {
                *a += w * v;
            }
        }
        if normalize {
            for a in acc.iter_mut() {
                *a /= weight_sum;
            }
        }
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&acc);
    }
    out
}

/// Random value-prototype instances against the brute-force route, both
/// normalize modes, per-coordinate tolerance 1e-12. `inject_fault` perturbs
/// the production output to prove the check has teeth.
pub fn eq4_oracle_equivalence(
    instances: usize,
    max_n: usize,
    seed: u64,
    inject_fault: bool,
) -> Result<SuiteOutcome> {
    let mut rng = Rng::derive(seed, &[0xe44]);
    let mut max_error: f64 = 0.0;
    for inst in 0..instances {
        let d = 2 + rng.below(15);
        let m = 1 + rng.below(16);
        let n = (m + rng.below(max_n.max(m + 1) - m)).min(max_n).max(m);
        let k = 1 + rng.below(n.min(40));
        let normalize = rng.below(2) == 1;
        let bank_keys = random_tensor(&mut rng, n, d, 1.0);
        let bank_values = random_tensor(&mut rng, n, d, 1.0);
        let proto_keys = random_tensor(&mut rng, m, d, 1.0);
        let mut got =
            build_value_prototypes(&proto_keys, &bank_keys, &bank_values, k, normalize)?;
        if inject_fault {
            got.data_mut()[0] += 1e-6;
        }
        let want = value_prototypes_brute_force(&proto_keys, &bank_keys, &bank_values, k, normalize);
        let err = got.max_abs_diff(&want);
        max_error = max_error.max(err);
        if err > 1e-12 {
            return Err(Error::Verification(format!(
                "value-prototype mismatch on instance {inst} (N={n}, m={m}, k={k}, \
                 normalize={normalize}): max coordinate error {err:.3e}"
            )));
        }
    }
    Ok(SuiteOutcome {
        name: "value-prototype oracle equivalence".into(),
        trials: instances,
        max_error,
        detail: format!("{instances} random instances, both normalize modes"),
    })
}

/// Independent replay simulator for the bank discipline.
struct ReplaySim {
    capacity: usize,
    stride: usize,
    entries: Vec<(u64, Tensor, Tensor)>,
    filled_once: bool,
    pushes_since_flag: usize,
}

impl ReplaySim {
    fn new(capacity: usize, stride: usize) -> Self {
        ReplaySim {
            capacity,
            stride,
            entries: Vec::new(),
            filled_once: false,
            pushes_since_flag: 0,
        }
    }

    fn push(&mut self, step: u64, k: Tensor, v: Tensor) -> bool {
        self.entries.push((step, k, v));
        if self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
        if !self.filled_once {
            if self.entries.len() == self.capacity {
                self.filled_once = true;
                self.pushes_since_flag = 0;
                return true;
            }
            false
        } else {
            self.pushes_since_flag += 1;
            if self.pushes_since_flag == self.stride {
                self.pushes_since_flag = 0;
                return true;
            }
            false
        }
    }

    fn slide(&mut self, n: usize) {
        self.entries.drain(..n);
    }
}

/// Randomized push/refresh/slide histories against the replay simulator:
/// contents and flag schedule must match exactly.
pub fn bank_replay_equivalence(histories: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = Rng::derive(seed, &[0xba2e]);
    let mut flag_events = 0usize;
    for h in 0..histories {
        let capacity = 1 + rng.below(20);
        let stride = 1 + rng.below(capacity);
        let mut bank = MemoryBank::new(capacity, stride)?;
        let mut sim = ReplaySim::new(capacity, stride);
        let pushes = 1 + rng.below(3 * capacity + 10);
        let dim = 2 + rng.below(3);
        let mut step = 0u64;
        for _ in 0..pushes {
            step += 1 + rng.below(3) as u64;
            let rows = 1 + rng.below(4);
            let k = random_tensor(&mut rng, rows, dim, 1.0);
            let v = random_tensor(&mut rng, rows, dim, 1.0);
            let got_flag = bank.push_batch(step, k.clone(), v.clone())?;
            let want_flag = sim.push(step, k, v);
            if got_flag != want_flag {
                return Err(Error::Verification(format!(
                    "history {h}: flag mismatch at step {step} (bank {got_flag}, \
                     simulator {want_flag})"
                )));
            }
            if got_flag {
                flag_events += 1;
                // The training discipline slides by the stride on refresh;
                // sometimes slide a random legal amount instead.
                let amount = if rng.below(4) == 0 {
                    rng.below(bank.len() + 1)
                } else {
                    stride.min(bank.len())
                };
                bank.slide(amount)?;
                sim.slide(amount);
            }
            // Compare contents after every push.
            let got: Vec<(u64, &[f64], &[f64])> = bank
                .entries()
                .map(|e| (e.step, e.keys.data(), e.values.data()))
                .collect();
            if got.len() != sim.entries.len() {
                return Err(Error::Verification(format!(
                    "history {h}: length mismatch at step {step}"
                )));
            }
            for (g, w) in got.iter().zip(&sim.entries) {
                if g.0 != w.0 || g.1 != w.1.data() || g.2 != w.2.data() {
                    return Err(Error::Verification(format!(
                        "history {h}: contents diverged at step {step}"
                    )));
                }
            }
        }
    }
    Ok(SuiteOutcome {
        name: "bank replay oracle".into(),
        trials: histories,
        max_error: 0.0,
        detail: format!("{histories} histories, {flag_events} refresh events"),
    })
}

fn random_model_config(rng: &mut Rng) -> ModelConfig {
    let heads = [1usize, 2, 4][rng.below(3)];
    let d_model = heads * (4 + rng.below(5));
    ModelConfig {
        layers: 1 + rng.below(2),
        d_model,
        heads,
        ffn_dim: d_model * 2,
        vocab: 8 + rng.below(8),
        max_len: 6,
        d_feat: 4 + rng.below(6),
        memory_slots: 1 + rng.below(6),
        memory_in_first_layer: rng.below(2) == 0,
        use_segment_embeddings: true,
    }
}

/// For random configs: an m=0/baseline model and a pma model with no
/// memories installed produce bitwise-identical forwards given shared
/// parameters; and a pma model with all-zero prototypes and zero segment
/// embeddings differs from the baseline only via the prototype columns of
/// its attention traces.
pub fn baseline_identity(configs: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = Rng::derive(seed, &[0xba5e]);
    let mut max_trace_error: f64 = 0.0;
    for trial in 0..configs {
        let cfg = random_model_config(&mut rng);
        let model_seed = rng.next_u64();
        let pma = Captioner::new(cfg.clone(), MemoryMode::Pma, model_seed)?;
        let mut base_cfg = cfg.clone();
        base_cfg.memory_slots = 0;
        let mut baseline = Captioner::new(base_cfg, MemoryMode::Baseline, model_seed)?;
        let shared: Vec<String> = baseline.params().keys().cloned().collect();
        for name in shared {
            let v = pma.params()[&name].clone();
            baseline.params_mut().insert(name, v);
        }

        let t = 2 + rng.below(4);
        let tokens: Vec<usize> = std::iter::once(1)
            .chain((1..t).map(|_| rng.below(cfg.vocab)))
            .collect();
        let n_feat_rows = 2 + rng.below(2);
        let feats = random_tensor(&mut rng, n_feat_rows, cfg.d_feat, 1.0);

        let forward = |m: &Captioner| -> Result<(Tensor, Vec<Vec<crate::attention::AttentionTrace>>)> {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let enc = bound.encode(&mut tape, &feats)?;
            let out = bound.decode_teacher_forced(&mut tape, &tokens, enc)?;
            Ok((tape.value(out.logits).to_tensor(), out.self_traces))
        };

        let (logits_pma, _) = forward(&pma)?;
        let (logits_base, traces_base) = forward(&baseline)?;
        if logits_pma.data() != logits_base.data() {
            return Err(Error::Verification(format!(
                "trial {trial}: uninstalled pma forward differs bitwise from baseline"
            )));
        }

        // Zero prototypes, zero segment embeddings: the trace of the first
        // memory-carrying layer (whose input is provably identical to the
        // baseline's) differs from the baseline trace only via the
        // prototype columns; its input columns renormalize to the baseline
        // weights. Deeper layers see diverged inputs through the residual
        // stream, so the model-level check stops at the first carrier.
        let Some(first_carrier) = (0..cfg.layers)
            .find(|&l| crate::captioner::layer_carries_memory(&cfg, MemoryMode::Pma, l))
        else {
            continue;
        };
        let mut pma_zero = pma;
        let zero_protos = (0..cfg.layers)
            .map(|_| {
                Some(
                    (0..cfg.heads)
                        .map(|_| PrototypeMemory {
                            keys: Tensor::zeros(vec![cfg.memory_slots, cfg.d_model / cfg.heads]),
                            values: Tensor::zeros(vec![cfg.memory_slots, cfg.d_model / cfg.heads]),
                            built_at_step: 0,
                            k_used: 1,
                        })
                        .collect(),
                )
            })
            .collect();
        pma_zero.install_memories(zero_protos)?;
        let (_, traces_zero) = forward(&pma_zero)?;
        let l = first_carrier;
        for (hz, hb) in traces_zero[l].iter().zip(&traces_base[l]) {
            let m = hz.memory_cols();
            assert_eq!(m, cfg.memory_slots);
            for r in 0..hz.rows() {
                let row_z = hz.weights().row(r);
                let row_b = hb.weights().row(r);
                let mem_mass: f64 = row_z[..m].iter().sum();
                for (j, &b) in row_b.iter().enumerate() {
                    let renorm = row_z[m + j] / (1.0 - mem_mass);
                    let err = (renorm - b).abs();
                    max_trace_error = max_trace_error.max(err);
                    if err > 1e-12 {
                        return Err(Error::Verification(format!(
                            "trial {trial}: layer {l} row {r} input column {j} \
                             renormalizes to {renorm}, baseline {b}"
                        )));
                    }
                }
            }
        }
    }
    // Op-level check on arbitrary inputs: attention with zero prototype
    // rows differs from plain attention only via the prototype columns.
    // Input columns renormalize to the plain weights and each output row
    // shrinks by exactly the mass spent on memory columns.
    for trial in 0..configs {
        let d = 2 + rng.below(8);
        let t = 2 + rng.below(5);
        let m = 1 + rng.below(5);
        let q_t = random_tensor(&mut rng, t, d, 1.0);
        let k_t = random_tensor(&mut rng, t, d, 1.0);
        let v_t = random_tensor(&mut rng, t, d, 1.0);
        let mut tape = Tape::new();
        let q = tape.leaf(q_t.clone());
        let k = tape.leaf(k_t.clone());
        let v = tape.leaf(v_t.clone());
        let mask_base = crate::attention::BoolMask::causal_with_memory(t, t, 0);
        let (out_base, trace_base) =
            crate::attention::scaled_dot_attention(&mut tape, q, k, v, Some(&mask_base), 0)?;
        let zero_mem = tape.constant(Tensor::zeros(vec![m, d]));
        let k_aug = tape.concat_rows(&[zero_mem, k])?;
        let v_aug = tape.concat_rows(&[zero_mem, v])?;
        let mask_aug = crate::attention::BoolMask::causal_with_memory(t, t, m);
        let (out_aug, trace_aug) =
            crate::attention::scaled_dot_attention(&mut tape, q, k_aug, v_aug, Some(&mask_aug), m)?;
        let base_out = tape.value(out_base).to_tensor();
        let aug_out = tape.value(out_aug).to_tensor();
        for r in 0..t {
            let row_a = trace_aug.weights().row(r);
            let row_b = trace_base.weights().row(r);
            let mem_mass: f64 = row_a[..m].iter().sum();
            for j in 0..t {
                let err = (row_a[m + j] / (1.0 - mem_mass) - row_b[j]).abs();
                max_trace_error = max_trace_error.max(err);
                if err > 1e-12 {
                    return Err(Error::Verification(format!(
                        "op trial {trial}: trace column {j} does not renormalize"
                    )));
                }
            }
            for c in 0..d {
                let err = (aug_out.at(r, c) - (1.0 - mem_mass) * base_out.at(r, c)).abs();
                if err > 1e-12 {
                    return Err(Error::Verification(format!(
                        "op trial {trial}: output row {r} deviates beyond the \
                         memory-mass rescaling ({err:.3e})"
                    )));
                }
            }
        }
    }
    Ok(SuiteOutcome {
        name: "baseline identity".into(),
        trials: configs,
        max_error: max_trace_error,
        detail: format!(
            "{configs} random configs (bitwise logits, trace renormalization) + \
             {configs} op-level zero-prototype trials"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq4_equivalence_holds() {
        let outcome = eq4_oracle_equivalence(30, 128, 5, false).unwrap();
        assert!(outcome.max_error <= 1e-12);
    }

    #[test]
    fn eq4_fault_injection_is_caught() {
        assert!(matches!(
            eq4_oracle_equivalence(5, 64, 5, true),
            Err(Error::Verification(_))
        ));
    }

    #[test]
    fn bank_replay_holds() {
        let outcome = bank_replay_equivalence(50, 9).unwrap();
        assert_eq!(outcome.max_error, 0.0);
        assert!(outcome.detail.contains("refresh events"));
    }

    #[test]
    fn baseline_identity_holds() {
        let outcome = baseline_identity(5, 13).unwrap();
        assert!(outcome.max_error <= 1e-12);
    }
}
