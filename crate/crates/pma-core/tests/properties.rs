//! Property tests over the numeric core and the attention bookkeeping.

use proptest::prelude::*;

use pma_core::attention::{scaled_dot_attention, AttentionTrace, BoolMask};
use pma_core::numerics::{softmax_rows, Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 1000,
        .. ProptestConfig::default()
    })]

    // Every softmax row sums to 1 within 1e-12 for any finite input.
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..12,
        raw in proptest::collection::vec(-700.0f64..700.0, 1..72),
    ) {
        let numel = rows * cols;
        let data: Vec<f64> = (0..numel).map(|i| raw[i % raw.len()] + i as f64 * 1e-3).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let s = softmax_rows(&t);
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }
}

proptest! {
    // Attention rows sum to 1, memory columns stay unmasked, and future
    // input columns are suppressed by the causal mask.
    #[test]
    fn attention_rows_and_mask_structure(
        t_q in 1usize..6,
        m in 0usize..5,
        d in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = pma_core::rng::Rng::new(seed);
        let fill = |rng: &mut pma_core::rng::Rng, r: usize, c: usize| {
            let mut t = Tensor::zeros(vec![r, c]);
            rng.fill_normal(t.data_mut(), 1.5);
            t
        };
        let t_k = t_q;
        let mut tape = Tape::new();
        let q = tape.leaf(fill(&mut rng, t_q, d));
        let k = tape.leaf(fill(&mut rng, m + t_k, d));
        let v = tape.leaf(fill(&mut rng, m + t_k, d));
        let mask = BoolMask::causal_with_memory(t_q, t_k, m);
        let (_, trace) = scaled_dot_attention(&mut tape, q, k, v, Some(&mask), m).unwrap();
        let w = trace.weights();
        for r in 0..t_q {
            let sum: f64 = w.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for j in 0..t_k {
                if j > r {
                    prop_assert!(w.at(r, m + j) < 1e-30, "future column leaked");
                }
            }
        }
        prop_assert_eq!(trace.memory_cols(), m);
        // Trace construction re-validates the row sums.
        prop_assert!(AttentionTrace::new(w.clone(), m).is_ok());
    }

    // The bank keeps exactly the most recent batches regardless of history.
    #[test]
    fn bank_holds_most_recent_batches(
        capacity in 1usize..12,
        pushes in 1usize..30,
        seed in 0u64..1000,
    ) {
        let mut rng = pma_core::rng::Rng::new(seed);
        let mut bank = pma_core::membank::MemoryBank::new(capacity, 1).unwrap();
        let mut expected: Vec<u64> = Vec::new();
        for step in 0..pushes as u64 {
            let rows = 1 + rng.below(3);
            let mut k = Tensor::zeros(vec![rows, 2]);
            let mut v = Tensor::zeros(vec![rows, 2]);
            rng.fill_normal(k.data_mut(), 1.0);
            rng.fill_normal(v.data_mut(), 1.0);
            bank.push_batch(step, k, v).unwrap();
            expected.push(step);
            if expected.len() > capacity {
                expected.remove(0);
            }
        }
        let got: Vec<u64> = bank.entries().map(|e| e.step).collect();
        prop_assert_eq!(got, expected);
    }
}
