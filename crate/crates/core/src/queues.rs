//! Fixed-capacity FIFO stores of momentum embeddings, one per hierarchy level.

use ndarray::Array2;

use crate::config::Level;
use crate::error::{Error, Result};

/// Ring buffer of unit-norm vectors; the oldest entry is overwritten first.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    level: Level,
    capacity: usize,
    dim: usize,
    buf: Vec<f32>,
    len: usize,
    /// Slot the next vector is written to.
    cursor: usize,
}

const NORM_TOLERANCE: f32 = 1e-3;

impl NegativeQueue {
    pub fn new(level: Level, capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::validation(
                "queue_capacity",
                "capacity and width must be positive",
            ));
        }
        Ok(NegativeQueue {
            level,
            capacity,
            dim,
            buf: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        })
    }

    /// Rebuilds a queue from its entries in insertion order (oldest first).
    pub fn from_entries(level: Level, capacity: usize, dim: usize, entries: &[f32]) -> Result<Self> {
        let mut q = NegativeQueue::new(level, capacity, dim)?;
        if entries.len() % dim != 0 || entries.len() / dim > capacity {
            return Err(Error::validation(
                "queue",
                format!(
                    "{} values do not form at most {capacity} vectors of width {dim}",
                    entries.len()
                ),
            ));
        }
        q.push_rows(entries);
        Ok(q)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `embeddings` (`[n, dim]` row-major) tagged with `level`.
    pub fn enqueue_batch(&mut self, level: Level, embeddings: &[f32]) -> Result<()> {
        if level != self.level {
            return Err(Error::validation(
                "level",
                format!("{} embeddings offered to the {} queue", level.name(), self.level.name()),
            ));
        }
        if embeddings.len() % self.dim != 0 {
            return Err(Error::validation(
                "embeddings",
                format!("{} values are not a multiple of width {}", embeddings.len(), self.dim),
            ));
        }
        for row in embeddings.chunks(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(Error::validation(
                    "embeddings",
                    format!("queue entries must be unit-norm, got norm {norm}"),
                ));
            }
        }
        self.push_rows(embeddings);
        Ok(())
    }

    fn push_rows(&mut self, embeddings: &[f32]) {
        let n = embeddings.len() / self.dim;
        // Only the newest `capacity` rows survive.
        let skip = n.saturating_sub(self.capacity);
        for row in embeddings.chunks(self.dim).skip(skip) {
            let off = self.cursor * self.dim;
            self.buf[off..off + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.len = (self.len + n).min(self.capacity);
    }

    /// Entries oldest first, flattened.
    pub fn entries(&self) -> Vec<f32> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            out.extend_from_slice(&self.buf[slot * self.dim..(slot + 1) * self.dim]);
        }
        out
    }

    /// A detached `[len, dim]` copy, oldest first.
    pub fn snapshot(&self) -> Result<Array2<f64>> {
        if self.is_empty() {
            return Err(Error::precondition(
                "snapshot",
                format!("{} queue is empty", self.level.name()),
            ));
        }
        let data = self.entries().into_iter().map(f64::from).collect();
        Ok(Array2::from_shape_vec((self.len, self.dim), data).expect("queue shape"))
    }
}

/// The three per-level queues.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueSet {
    pub queues: [NegativeQueue; 3],
}

impl QueueSet {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(QueueSet {
            queues: [
                NegativeQueue::new(Level::Frame, capacity, dim)?,
                NegativeQueue::new(Level::Subword, capacity, dim)?,
                NegativeQueue::new(Level::Word, capacity, dim)?,
            ],
        })
    }

    pub fn get(&self, level: Level) -> &NegativeQueue {
        &self.queues[level.index()]
    }

    pub fn get_mut(&mut self, level: Level) -> &mut NegativeQueue {
        &mut self.queues[level.index()]
    }

    /// True once every queue holds at least two entries.
    pub fn warm(&self) -> bool {
        self.queues.iter().all(|q| q.len() >= 2)
    }
}
