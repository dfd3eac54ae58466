//! Class-aware FIFO memory queues of teacher embeddings.
//!
//! A [`ClassQueue`] keeps, for each of `C` classes, a ring buffer of
//! `capacity` unit vectors. It is pre-filled with random unit vectors and
//! afterwards only ever receives teacher embeddings; the oldest entry of a
//! class is overwritten once its buffer is full.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CirkdError, Result};
use crate::matrix::DenseMatrix;
use crate::rng::seeded;

/// Allowed deviation from unit norm for queued embeddings.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassQueue {
    num_classes: usize,
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    cursor: Vec<usize>,
    fill: Vec<usize>,
    // per-slot stamp supplied at enqueue time; None for initial noise
    tags: Vec<Option<u64>>,
}

/// Contrastive embeddings drawn from a queue, concatenated class by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub embeddings: DenseMatrix,
    pub class_ids: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &c in &self.class_ids {
            counts[c] += 1;
        }
        counts
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

impl ClassQueue {
    /// Builds a full queue whose every slot holds an independent random unit vector.
    pub fn init(num_classes: usize, capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || capacity == 0 || dim == 0 {
            return Err(CirkdError::Param(format!(
                "queue dimensions must be positive (C={num_classes}, capacity={capacity}, d={dim})"
            )));
        }
        let mut rng = seeded(seed);
        let slots = num_classes * capacity;
        let mut storage = vec![0.0; slots * dim];
        for slot in storage.chunks_exact_mut(dim) {
            random_unit(&mut rng, slot);
        }
        Ok(Self {
            num_classes,
            capacity,
            dim,
            storage,
            cursor: vec![0; num_classes],
            fill: vec![capacity; num_classes],
            tags: vec![None; slots],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self, class_id: usize) -> usize {
        self.fill[class_id]
    }

    fn slot_offset(&self, class_id: usize, slot: usize) -> usize {
        (class_id * self.capacity + slot) * self.dim
    }

    fn slot(&self, class_id: usize, slot: usize) -> &[f64] {
        let o = self.slot_offset(class_id, slot);
        &self.storage[o..o + self.dim]
    }

    /// Physical slot index of the `j`-th oldest live entry of a class.
    fn live_slot(&self, class_id: usize, j: usize) -> usize {
        let oldest = (self.cursor[class_id] + self.capacity - self.fill[class_id]) % self.capacity;
        (oldest + j) % self.capacity
    }

    /// Live entries of one class, oldest first.
    pub fn class_contents(&self, class_id: usize) -> Vec<&[f64]> {
        (0..self.fill[class_id])
            .map(|j| self.slot(class_id, self.live_slot(class_id, j)))
            .collect()
    }

    /// Tags of the live entries of one class, oldest first.
    pub fn class_tags(&self, class_id: usize) -> Vec<Option<u64>> {
        (0..self.fill[class_id])
            .map(|j| self.tags[class_id * self.capacity + self.live_slot(class_id, j)])
            .collect()
    }

    pub fn enqueue(&mut self, class_id: usize, embeddings: &DenseMatrix) -> Result<()> {
        self.push(class_id, embeddings, None)
    }

    /// Like [`enqueue`](Self::enqueue) but stamps every new entry with `tag`.
    pub fn enqueue_tagged(&mut self, class_id: usize, embeddings: &DenseMatrix, tag: u64) -> Result<()> {
        self.push(class_id, embeddings, Some(tag))
    }

    fn push(&mut self, class_id: usize, embeddings: &DenseMatrix, tag: Option<u64>) -> Result<()> {
        self.check_push(class_id, embeddings)?;
        for row in embeddings.row_iter() {
            let slot = self.cursor[class_id];
            let o = self.slot_offset(class_id, slot);
            self.storage[o..o + self.dim].copy_from_slice(row);
            self.tags[class_id * self.capacity + slot] = tag;
            self.cursor[class_id] = (slot + 1) % self.capacity;
            self.fill[class_id] = (self.fill[class_id] + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Validates a push without mutating anything.
    pub fn check_push(&self, class_id: usize, embeddings: &DenseMatrix) -> Result<()> {
        if class_id >= self.num_classes {
            return Err(CirkdError::ClassOutOfRange {
                class_id,
                num_classes: self.num_classes,
            });
        }
        if embeddings.rows() > 0 && embeddings.cols() != self.dim {
            return Err(CirkdError::shape(
                "ClassQueue::enqueue",
                format!("dim {} into a queue of dim {}", embeddings.cols(), self.dim),
            ));
        }
        for (row, r) in embeddings.row_iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(CirkdError::NotNormalized { row, norm });
            }
        }
        Ok(())
    }

    /// Draws `k` embeddings with per-class counts differing by at most one.
    ///
    /// Every class gets `k / C` entries; the `k % C` leftover entries go to
    /// distinct classes chosen by `rng`. Within a class, entries are drawn
    /// without replacement unless the quota exceeds the fill count.
    pub fn sample_balanced<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<SampleBatch> {
        if k < 1 {
            return Err(CirkdError::Param("sample size K must be at least 1".into()));
        }
        let c = self.num_classes;
        let mut quota = vec![k / c; c];
        for cls in index::sample(rng, c, k % c) {
            quota[cls] += 1;
        }

        let mut data = Vec::with_capacity(k * self.dim);
        let mut class_ids = Vec::with_capacity(k);
        for (cls, &q) in quota.iter().enumerate() {
            if q == 0 {
                continue;
            }
            let fill = self.fill[cls];
            if fill == 0 {
                return Err(CirkdError::State(format!("class {cls} queue is empty")));
            }
            let picks: Vec<usize> = if q <= fill {
                index::sample(rng, fill, q).into_vec()
            } else {
                (0..q).map(|_| rng.gen_range(0..fill)).collect()
            };
            for j in picks {
                data.extend_from_slice(self.slot(cls, self.live_slot(cls, j)));
                class_ids.push(cls);
            }
        }
        Ok(SampleBatch {
            embeddings: DenseMatrix::new(k, self.dim, data)?,
            class_ids,
        })
    }

    /// Writes the raw slot storage: `C`, capacity, `d` as little-endian u64,
    /// then `C * capacity * d` little-endian f64 values in slot order.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CirkdError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| CirkdError::io(path, e));
        for v in [self.num_classes, self.capacity, self.dim] {
            write(&(v as u64).to_le_bytes())?;
        }
        for v in &self.storage {
            write(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| CirkdError::io(path, e))
    }

    /// Reads a snapshot written by [`dump`](Self::dump). The result is a full
    /// queue whose write cursors start at slot 0.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CirkdError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = [0u64; 3];
        let mut buf = [0u8; 8];
        for h in header.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| CirkdError::io(path, e))?;
            *h = u64::from_le_bytes(buf);
        }
        let [c, cap, d] = header.map(|v| v as usize);
        if c == 0 || cap == 0 || d == 0 {
            return Err(CirkdError::Format {
                path: path.into(),
                detail: format!("zero dimension in header {header:?}"),
            });
        }
        let n = c * cap * d;
        let mut storage = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|e| CirkdError::io(path, e))?;
            storage.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf).map_err(|e| CirkdError::io(path, e))? != 0 {
            return Err(CirkdError::Format {
                path: path.into(),
                detail: "trailing bytes after queue payload".into(),
            });
        }
        Ok(Self {
            num_classes: c,
            capacity: cap,
            dim: d,
            storage,
            cursor: vec![0; c],
            fill: vec![cap; c],
            tags: vec![None; c * cap],
        })
    }

    /// Raw slot storage, `C x capacity x d` row-major.
    pub fn raw(&self) -> &[f64] {
        &self.storage
    }
}
