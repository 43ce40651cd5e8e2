use std::borrow::Cow;

use crate::error::{invalid, Result};
use crate::linalg::{norm, Matrix, Scalar};

/// Fixed-capacity FIFO ring of key embeddings used as negatives.
#[derive(Debug, Clone)]
pub struct MemoryBank<T> {
    capacity: usize,
    entries: Matrix<T>,
    len: usize,
    cursor: usize,
    total_enqueued: u64,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid!("memory bank needs positive capacity and dimension"));
        }
        Ok(Self {
            capacity,
            entries: Matrix::zeros(capacity, dim),
            len: 0,
            cursor: 0,
            total_enqueued: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    pub fn clear(&mut self) {
        self.len = 0;
        self.cursor = 0;
        self.total_enqueued = 0;
    }

    /// Overwrites the oldest entries with `keys` (rows, unit norm).
    pub fn enqueue(&mut self, keys: &Matrix<T>) -> Result<()> {
        if keys.rows() == 0 {
            return Ok(());
        }
        if keys.cols() != self.dim() {
            return Err(invalid!(
                "key dimension {} does not match bank dimension {}",
                keys.cols(),
                self.dim()
            ));
        }
        let tol = T::NORM_TOL * 10.0;
        if let Some(r) = (0..keys.rows()).find(|&r| (norm(keys.row(r)).as_f64() - 1.0).abs() > tol) {
            return Err(invalid!("key {r} is not unit norm"));
        }
        for key in keys.row_iter() {
            self.entries.row_mut(self.cursor).copy_from_slice(key);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
            self.total_enqueued += 1;
        }
        Ok(())
    }

    /// Current negatives, in storage order. The order is irrelevant to the
    /// loss.
    pub fn negatives(&self) -> Cow<'_, Matrix<T>> {
        if self.len == self.capacity {
            Cow::Borrowed(&self.entries)
        } else {
            let idx: Vec<usize> = (0..self.len).collect();
            Cow::Owned(self.entries.select_rows(&idx))
        }
    }

    /// Entries from oldest to newest.
    pub fn ordered(&self) -> Vec<Vec<T>> {
        let start = if self.len == self.capacity { self.cursor } else { 0 };
        (0..self.len)
            .map(|i| self.entries.row((start + i) % self.capacity).to_vec())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn basis_keys(ids: impl Iterator<Item = usize>, dim: usize) -> Matrix<f64> {
        let rows: Vec<Vec<f64>> = ids
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i % dim] = if (i / dim) % 2 == 0 { 1.0 } else { -1.0 };
                v
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn keeps_most_recent_capacity_entries() {
        let mut bank = MemoryBank::new(4, 8).unwrap();
        bank.enqueue(&basis_keys(0..6, 8)).unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.ordered(), basis_keys(2..6, 8).row_iter().map(<[f64]>::to_vec).collect::<Vec<_>>());
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let mut bank = MemoryBank::<f32>::new(4, 3).unwrap();
        bank.enqueue(&Matrix::zeros(0, 3)).unwrap();
        assert!(bank.is_empty());
    }

    #[test]
    fn rejects_non_unit_keys() {
        let mut bank = MemoryBank::<f64>::new(4, 2).unwrap();
        let keys = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(bank.enqueue(&keys).is_err());
        assert!(bank.enqueue(&Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn matches_reference_fifo() {
        let mut bank = MemoryBank::new(7, 5).unwrap();
        let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
        let mut next = 0;
        for batch in [3usize, 1, 4, 0, 5, 2, 6, 3] {
            let keys = basis_keys(next..next + batch, 5);
            next += batch;
            bank.enqueue(&keys).unwrap();
            for r in keys.row_iter() {
                reference.push_back(r.to_vec());
                if reference.len() > 7 {
                    reference.pop_front();
                }
            }
            assert_eq!(bank.ordered(), reference.iter().cloned().collect::<Vec<_>>());
            assert_eq!(bank.len() as u64, bank.total_enqueued().min(7));
            assert_eq!(bank.negatives().rows(), bank.len());
        }
    }
}
