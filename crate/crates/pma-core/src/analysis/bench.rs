//! Wall-time comparison of plain vs memory-augmented attention forwards.
//! Informational only; memory slots grow the attention matrix and the cost
//! should grow accordingly.

use std::time::Instant;

use crate::attention::{multi_head_attention, AttentionConfig, AttnParams, MemorySource};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::prototypes::PrototypeMemory;
use crate::rng::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchRow {
    pub t_k: usize,
    pub m: usize,
    pub median_us: f64,
    pub p95_us: f64,
}

pub fn bench_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("T_k,m,median_us,p95_us\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.t_k, r.m, r.median_us, r.p95_us));
    }
    out
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

/// Time causal self-attention forwards over a (T_k, m) grid at fixed width.
pub fn bench_attention(
    t_k_values: &[usize],
    m_values: &[usize],
    d_model: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if repeats < 5 {
        return Err(Error::config("bench needs at least 5 repeats"));
    }
    let heads = if d_model % 4 == 0 { 4 } else { 1 };
    let head_dim = d_model / heads;
    let mut rng = Rng::new(0xbe_c);
    let mut rows = Vec::new();
    for &t_k in t_k_values {
        for &m in m_values {
            let cfg = AttentionConfig::new(d_model, heads, true, m)?;
            let mut x = Tensor::zeros(vec![t_k, d_model]);
            rng.fill_normal(x.data_mut(), 1.0);
            let weight = |rng: &mut Rng| {
                let mut t = Tensor::zeros(vec![d_model, d_model]);
                rng.fill_normal(t.data_mut(), (1.0 / d_model as f64).sqrt());
                t
            };
            let weights: Vec<Tensor> = (0..4).map(|_| weight(&mut rng)).collect();
            let protos: Option<Vec<PrototypeMemory>> = (m > 0).then(|| {
                (0..heads)
                    .map(|_| {
                        let mut k = Tensor::zeros(vec![m, head_dim]);
                        let mut v = Tensor::zeros(vec![m, head_dim]);
                        rng.fill_normal(k.data_mut(), 1.0);
                        rng.fill_normal(v.data_mut(), 1.0);
                        PrototypeMemory {
                            keys: k,
                            values: v,
                            built_at_step: 0,
                            k_used: 1,
                        }
                    })
                    .collect()
            });

            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                let mut tape = Tape::new();
                let xid = tape.leaf(x.clone());
                let params = AttnParams {
                    wq: tape.leaf(weights[0].clone()),
                    bq: tape.leaf(Tensor::zeros(vec![d_model])),
                    wk: tape.leaf(weights[1].clone()),
                    wv: tape.leaf(weights[2].clone()),
                    bv: tape.leaf(Tensor::zeros(vec![d_model])),
                    wo: tape.leaf(weights[3].clone()),
                    bo: tape.leaf(Tensor::zeros(vec![d_model])),
                };
                let memory = protos.as_ref().map(|p| MemorySource::Prototypes(p));
                let out = multi_head_attention(&mut tape, xid, xid, &params, None, memory, &cfg)?;
                std::hint::black_box(tape.value(out.out).data()[0]);
                times.push(start.elapsed().as_secs_f64() * 1e6);
            }
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
            rows.push(BenchRow {
                t_k,
                m,
                median_us: percentile(&times, 0.5),
                p95_us: percentile(&times, 0.95),
            });
        }
    }
    Ok(rows)
}
