//! Bounded per-layer, per-head streams of past key/value activations.
//!
//! A bank holds the most recent batches of detached key/value rows and
//! schedules prototype refreshes: the first refresh fires when the bank
//! first fills to capacity, later ones every `stride` pushes. The training
//! loop is expected to `slide(stride)` after consuming a refresh so the
//! window advances with overlap.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub step: u64,
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    stride: usize,
    entries: VecDeque<BankEntry>,
    steps_since_refresh: usize,
    refreshed_once: bool,
    last_push_step: Option<u64>,
}

impl MemoryBank {
    pub fn new(capacity: usize, stride: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("bank capacity must be positive"));
        }
        if stride == 0 || stride > capacity {
            return Err(Error::config(format!(
                "bank stride must be in [1, capacity={capacity}], got {stride}"
            )));
        }
        Ok(MemoryBank {
            capacity,
            stride,
            entries: VecDeque::new(),
            steps_since_refresh: 0,
            refreshed_once: false,
            last_push_step: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn refreshed_once(&self) -> bool {
        self.refreshed_once
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_push_step
    }

    /// Append one batch of detached activations. Returns true when a
    /// prototype refresh is due: at first fill, then every `stride` pushes.
    pub fn push_batch(&mut self, step: u64, keys: Tensor, values: Tensor) -> Result<bool> {
        if let Some(last) = self.last_push_step {
            if step <= last {
                return Err(Error::Ordering(format!(
                    "bank push step {step} not greater than last pushed step {last}"
                )));
            }
        }
        if keys.rows() != values.rows() {
            return Err(Error::DimMismatch {
                op: "push_batch",
                left: keys.shape().to_vec(),
                right: values.shape().to_vec(),
            });
        }
        if !keys.all_finite() || !values.all_finite() {
            return Err(Error::contract(format!(
                "non-finite activation pushed into bank at step {step}"
            )));
        }
        if let Some(front) = self.entries.front() {
            if keys.cols() != front.keys.cols() || values.cols() != front.values.cols() {
                return Err(Error::DimMismatch {
                    op: "push_batch",
                    left: vec![front.keys.cols(), front.values.cols()],
                    right: vec![keys.cols(), values.cols()],
                });
            }
        }
        self.last_push_step = Some(step);
        self.entries.push_back(BankEntry { step, keys, values });
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }

        if !self.refreshed_once {
            if self.entries.len() == self.capacity {
                self.refreshed_once = true;
                self.steps_since_refresh = 0;
                return Ok(true);
            }
        } else {
            self.steps_since_refresh += 1;
            if self.steps_since_refresh == self.stride {
                self.steps_since_refresh = 0;
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Drop the oldest `stride` entries.
    pub fn slide(&mut self, stride: usize) -> Result<()> {
        if stride > self.entries.len() {
            return Err(Error::contract(format!(
                "slide stride {stride} exceeds bank length {}",
                self.entries.len()
            )));
        }
        self.entries.drain(..stride);
        Ok(())
    }

    /// Row-concatenation of all entries, oldest first. Key row i and value
    /// row i originate from the same token of the same batch.
    pub fn snapshot(&self) -> Result<(Tensor, Tensor)> {
        if self.entries.is_empty() {
            return Err(Error::contract("snapshot of an empty bank"));
        }
        let keys: Vec<&Tensor> = self.entries.iter().map(|e| &e.keys).collect();
        let values: Vec<&Tensor> = self.entries.iter().map(|e| &e.values).collect();
        Ok((
            Tensor::concat_rows(&keys)?,
            Tensor::concat_rows(&values)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(step: u64, rows: usize, dim: usize) -> (Tensor, Tensor) {
        // Tag every row with (step, row) so alignment is checkable.
        let mut k = Vec::with_capacity(rows * dim);
        let mut v = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            for c in 0..dim {
                k.push(step as f64 * 1000.0 + r as f64 + c as f64 * 0.001);
                v.push(-(step as f64 * 1000.0 + r as f64) - c as f64 * 0.001);
            }
        }
        (
            Tensor::new(vec![rows, dim], k).unwrap(),
            Tensor::new(vec![rows, dim], v).unwrap(),
        )
    }

    #[test]
    fn first_fill_then_stride_flags() {
        let mut bank = MemoryBank::new(3, 2).unwrap();
        let (k, v) = batch(1, 2, 4);
        assert!(!bank.push_batch(1, k, v).unwrap());
        let (k, v) = batch(2, 2, 4);
        assert!(!bank.push_batch(2, k, v).unwrap());
        let (k, v) = batch(3, 2, 4);
        assert!(bank.push_batch(3, k, v).unwrap(), "flag at first fill");
        bank.slide(2).unwrap();
        for step in 4..=20 {
            let (k, v) = batch(step, 2, 4);
            let flag = bank.push_batch(step, k, v).unwrap();
            // After the fill at step 3, flags repeat every 2 pushes: 5, 7, ...
            assert_eq!(flag, (step - 3) % 2 == 0, "step {step}");
            if flag {
                bank.slide(2).unwrap();
            }
        }
    }

    #[test]
    fn non_monotone_push_rejected() {
        let mut bank = MemoryBank::new(4, 1).unwrap();
        let (k, v) = batch(5, 1, 2);
        bank.push_batch(5, k, v).unwrap();
        let (k, v) = batch(5, 1, 2);
        assert!(matches!(
            bank.push_batch(5, k, v),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn slide_semantics() {
        let mut bank = MemoryBank::new(10, 2).unwrap();
        for step in 0..6 {
            let (k, v) = batch(step, 1, 2);
            bank.push_batch(step, k, v).unwrap();
        }
        bank.slide(2).unwrap();
        let steps: Vec<u64> = bank.entries().map(|e| e.step).collect();
        assert_eq!(steps, vec![2, 3, 4, 5]);
        bank.slide(0).unwrap();
        assert_eq!(bank.len(), 4);
        bank.slide(4).unwrap();
        assert!(bank.is_empty());
        assert!(bank.slide(1).is_err());
    }

    #[test]
    fn snapshot_concatenates_oldest_first() {
        let mut bank = MemoryBank::new(5, 1).unwrap();
        let (k, v) = batch(1, 3, 2);
        bank.push_batch(1, k.clone(), v.clone()).unwrap();
        let (k2, v2) = batch(2, 4, 2);
        bank.push_batch(2, k2.clone(), v2.clone()).unwrap();
        let (sk, sv) = bank.snapshot().unwrap();
        assert_eq!(sk.rows(), 7);
        assert_eq!(sk.row(0), k.row(0));
        assert_eq!(sk.row(3), k2.row(0));
        assert_eq!(sv.row(6), v2.row(3));
    }

    #[test]
    fn snapshot_of_single_entry_is_identity() {
        let mut bank = MemoryBank::new(5, 1).unwrap();
        let (k, v) = batch(7, 3, 4);
        bank.push_batch(7, k.clone(), v.clone()).unwrap();
        let (sk, sv) = bank.snapshot().unwrap();
        assert_eq!(sk, k);
        assert_eq!(sv, v);
    }

    #[test]
    fn empty_snapshot_is_error() {
        let bank = MemoryBank::new(2, 1).unwrap();
        assert!(matches!(bank.snapshot(), Err(Error::Contract(_))));
    }

    #[test]
    fn capacity_bound_holds_without_slides() {
        let mut bank = MemoryBank::new(3, 3).unwrap();
        for step in 0..10 {
            let (k, v) = batch(step, 1, 2);
            bank.push_batch(step, k, v).unwrap();
            assert!(bank.len() <= 3);
        }
        let steps: Vec<u64> = bank.entries().map(|e| e.step).collect();
        assert_eq!(steps, vec![7, 8, 9]);
    }

    #[test]
    fn key_value_row_alignment() {
        let mut bank = MemoryBank::new(4, 1).unwrap();
        for step in 0..4 {
            let (k, v) = batch(step, 2 + step as usize, 3);
            bank.push_batch(step, k, v).unwrap();
        }
        let (sk, sv) = bank.snapshot().unwrap();
        // Tagging scheme: value row is the negation of its key row.
        for r in 0..sk.rows() {
            for c in 0..3 {
                assert_eq!(sk.at(r, c), -sv.at(r, c));
            }
        }
    }
}
