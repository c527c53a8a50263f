//! Momentum key encoders and FIFO memory banks of key embeddings.

use crate::encoders::{DualEncoder, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BANK_SIZE: usize = 512;
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;

/// Ring buffer of unit vectors; the oldest entry is overwritten first.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    cursor: usize,
    filled: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "memory bank needs positive capacity and width, got {}×{}",
                capacity, dim
            )));
        }
        Ok(MemoryBank {
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Slot the next vector will be written to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.slots[i * self.dim..(i + 1) * self.dim]
    }

    /// L2-normalises each row of `batch` (B×D) and writes it at the cursor.
    ///
    /// The batch is validated as a whole, so a rejected batch leaves the bank untouched.
    pub fn enqueue(&mut self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape(
                "enqueue",
                format!("expected B×{}, got {:?}", self.dim, s),
            ));
        }
        if s[0] > self.capacity {
            return Err(Error::invalid(format!(
                "batch of {} exceeds bank capacity {}",
                s[0], self.capacity
            )));
        }
        let mut rows = Vec::with_capacity(batch.numel());
        for row in batch.data().chunks(self.dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid("cannot enqueue a zero or non-finite key"));
            }
            rows.extend(row.iter().map(|v| v / n));
        }
        for row in rows.chunks(self.dim) {
            let o = self.cursor * self.dim;
            self.slots[o..o + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Copy of the filled slots (slot order), N×D.
    pub fn negatives(&self) -> Result<Tensor> {
        if self.filled == 0 {
            return Err(Error::invalid("memory bank is empty; enqueue keys before the first loss"));
        }
        Tensor::new(
            vec![self.filled, self.dim],
            self.slots[..self.filled * self.dim].to_vec(),
        )
    }

    /// Filled slots plus the cursor, for checkpoints.
    pub fn state(&self) -> (Tensor, usize) {
        let t = Tensor::new(
            vec![self.filled, self.dim],
            self.slots[..self.filled * self.dim].to_vec(),
        )
        .expect("consistent shape");
        (t, self.cursor)
    }

    pub fn restore(capacity: usize, filled: &Tensor, cursor: usize) -> Result<Self> {
        let s = filled.shape();
        if s.len() != 2 || s[0] > capacity || cursor >= capacity || (s[0] < capacity && cursor != s[0]) {
            return Err(Error::invalid(format!(
                "inconsistent bank state: {:?} rows, cursor {}, capacity {}",
                s, cursor, capacity
            )));
        }
        let mut bank = MemoryBank::new(capacity, s[1])?;
        bank.slots[..filled.numel()].copy_from_slice(filled.data());
        bank.filled = s[0];
        bank.cursor = cursor;
        Ok(bank)
    }
}

/// `key ← m·key + (1 − m)·query` for every parameter.
pub fn ema_update(key: &mut ParamSet, query: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "EMA momentum must lie in [0, 1], got {}",
            momentum
        )));
    }
    key.check_layout(query)?;
    for (k, q) in key.tensors_mut().iter_mut().zip(query.tensors()) {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = momentum * *kv + (1.0 - momentum) * qv;
        }
    }
    Ok(())
}

/// Trainable query encoder with its EMA key mirror.
#[derive(Clone, Debug)]
pub struct MomentumPair {
    pub query: DualEncoder,
    pub key: DualEncoder,
    pub momentum: f64,
}

impl MomentumPair {
    /// The key encoder starts as an exact copy of the query encoder.
    pub fn new(query: DualEncoder, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "EMA momentum must lie in [0, 1], got {}",
                momentum
            )));
        }
        Ok(MomentumPair {
            key: query.clone(),
            query,
            momentum,
        })
    }

    pub fn update_key(&mut self) -> Result<()> {
        ema_update(&mut self.key.params, &self.query.params, self.momentum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(v: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![v.len(), 2], v.iter().flatten().copied().collect()).unwrap()
    }

    fn one(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::full(&[2], v)).unwrap();
        p
    }

    #[test]
    fn ema_examples() {
        let q = one("w", 1.0);
        let mut k = one("w", 0.0);
        ema_update(&mut k, &q, 1.0).unwrap();
        assert_eq!(k.get("w").unwrap().data(), &[0.0, 0.0]);
        ema_update(&mut k, &q, 0.99).unwrap();
        assert!((k.get("w").unwrap().data()[0] - 0.01).abs() < 1e-15);
        ema_update(&mut k, &q, 0.0).unwrap();
        assert_eq!(k, q);
        assert!(ema_update(&mut k, &one("v", 1.0), 0.5).is_err());
        assert!(ema_update(&mut k, &q, 1.5).is_err());
    }

    #[test]
    fn ring_trace() {
        let mut b = MemoryBank::new(4, 2).unwrap();
        b.enqueue(&rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [0.0, -1.0]])).unwrap();
        b.enqueue(&rows(&[[-5.0, 0.0]])).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.slot(0), &[-1.0, 0.0]);
        assert_eq!(b.slot(1), &[0.0, 1.0]);
        assert_eq!(b.slot(3), &[0.0, -1.0]);
        assert_eq!(b.cursor(), 1);
    }

    #[test]
    fn rejections_leave_bank_untouched() {
        let mut b = MemoryBank::new(2, 2).unwrap();
        assert!(b.negatives().is_err());
        assert!(b.enqueue(&rows(&[[1.0, 0.0], [0.0, 0.0]])).is_err());
        assert!(b.is_empty());
        assert!(b.enqueue(&rows(&[[1.0, 0.0]; 3])).is_err());
        assert!(b.enqueue(&Tensor::zeros(&[1, 3])).is_err());
        assert!(MemoryBank::new(0, 2).is_err());
    }

    #[test]
    fn snapshot_is_not_aliased() {
        let mut b = MemoryBank::new(64, 2).unwrap();
        b.enqueue(&rows(&[[1.0, 1.0]; 4])).unwrap();
        let snap = b.negatives().unwrap();
        assert_eq!(snap.shape(), &[4, 2]);
        b.enqueue(&rows(&[[0.0, 1.0]; 4])).unwrap();
        assert!(snap.data().iter().all(|&v| (v - 0.5f64.sqrt()).abs() < 1e-15));
        assert_eq!(b.negatives().unwrap().shape(), &[8, 2]);
    }

    #[test]
    fn state_round_trip() {
        let mut b = MemoryBank::new(3, 2).unwrap();
        b.enqueue(&rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let (t, c) = b.state();
        assert_eq!(MemoryBank::restore(3, &t, c).unwrap(), b);
        b.enqueue(&rows(&[[1.0, 1.0], [2.0, 1.0]])).unwrap();
        let (t, c) = b.state();
        assert_eq!(MemoryBank::restore(3, &t, c).unwrap(), b);
        assert!(MemoryBank::restore(3, &t, 3).is_err());
    }

    proptest! {
        #[test]
        fn contents_are_the_last_enqueued_vectors(
            cap in 1usize..9,
            batches in proptest::collection::vec(1usize..9, 1..12),
        ) {
            let mut bank = MemoryBank::new(cap, 3).unwrap();
            let mut history: Vec<Vec<f64>> = Vec::new();
            let mut counter = 1.0;
            for b in batches.into_iter().map(|b| b.min(cap)) {
                let data: Vec<f64> = (0..b * 3).map(|i| { counter += 1.0; counter + i as f64 }).collect();
                bank.enqueue(&Tensor::new(vec![b, 3], data.clone()).unwrap()).unwrap();
                for r in data.chunks(3) {
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    history.push(r.iter().map(|v| v / n).collect());
                }
            }
            let keep = history.len().min(cap);
            let mut want: Vec<Vec<f64>> = history[history.len() - keep..].to_vec();
            let mut got: Vec<Vec<f64>> = (0..bank.len()).map(|i| bank.slot(i).to_vec()).collect();
            for v in &got {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
            let key = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            want.sort_by_key(key);
            got.sort_by_key(key);
            prop_assert_eq!(got, want);
        }
    }
}
