//! Momentum-contrast instance discrimination: the negative key queue and the
//! contrastive loss.

use crate::error::{Error, Result};
use crate::nn;
use crate::tape::*;
use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};
use std::sync::Once;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    /// Softmax temperature; the standard momentum-contrast default.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    /// Keep the positive term in the softmax denominator (standard InfoNCE).
    #[serde(default = "default_true")]
    pub include_positive_in_denominator: bool,
}

fn default_temperature() -> f64 {
    0.07
}
fn default_capacity() -> usize {
    1024
}
fn default_true() -> bool {
    true
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: default_temperature(),
            queue_capacity: default_capacity(),
            include_positive_in_denominator: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("contrast: temperature must be > 0".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("contrast: queue_capacity must be > 0".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of unit-norm key embeddings. Stored rows never carry
/// gradient history.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    buffer: Array2<f64>, // (capacity, proj_dim) ring
    capacity: usize,
    head: usize,
    fill: usize,
}

fn check_unit_rows(rows: &ndarray::ArrayView2<f64>, what: &str) -> Result<()> {
    for r in rows.rows() {
        let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::Numerics(format!("{what}: row norm {n} not unit")));
        }
    }
    Ok(())
}

impl NegativeQueue {
    pub fn new(capacity: usize, proj_dim: usize) -> NegativeQueue {
        NegativeQueue {
            buffer: Array2::zeros((capacity, proj_dim)),
            capacity,
            head: 0,
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn proj_dim(&self) -> usize {
        self.buffer.ncols()
    }

    /// Append key rows in batch order, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, keys: &Array2<f64>) -> Result<()> {
        let b = keys.nrows();
        if b > self.capacity {
            return Err(Error::Data(format!(
                "enqueue of {b} rows exceeds queue capacity {}",
                self.capacity
            )));
        }
        if b == 0 {
            return Ok(());
        }
        check_unit_rows(&keys.view(), "enqueue")?;
        for row in keys.rows() {
            self.buffer.row_mut(self.head).assign(&row);
            self.head = (self.head + 1) % self.capacity;
        }
        self.fill = (self.fill + b).min(self.capacity);
        Ok(())
    }

    /// Current contents, oldest first.
    pub fn snapshot(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.fill, self.buffer.ncols()));
        let start = (self.head + self.capacity - self.fill) % self.capacity;
        for i in 0..self.fill {
            out.row_mut(i).assign(&self.buffer.row((start + i) % self.capacity));
        }
        out
    }

    pub(crate) fn state(&self) -> (Array2<f64>, usize, usize) {
        (self.buffer.clone(), self.head, self.fill)
    }

    pub(crate) fn from_state(buffer: Array2<f64>, head: usize, fill: usize) -> NegativeQueue {
        let capacity = buffer.nrows();
        NegativeQueue { buffer, capacity, head, fill }
    }
}

static EMPTY_QUEUE_WARN: Once = Once::new();

/// InfoNCE over [positive | queue negatives], summed over the batch.
///
/// `q_emb` is the differentiable main-encoder path. `k_emb` participates in
/// the graph as given: the caller keeps the momentum encoder out of the
/// gradient by passing its weights as constants, while any upstream
/// dependence of the key values (e.g. on the view parameters that produced
/// the key images) is preserved. Queue negatives are plain constants.
pub fn contrastive_loss(
    q_emb: &Var,
    k_emb: &Var,
    queue: &NegativeQueue,
    cfg: &ContrastConfig,
) -> Result<Var> {
    cfg.validate()?;
    let qa = q_emb.array().view().into_dimensionality::<Ix2>().unwrap();
    let ka = k_emb.array().view().into_dimensionality::<Ix2>().unwrap();
    if qa.dim() != ka.dim() {
        return Err(Error::Data("contrastive_loss: q/k shape mismatch".into()));
    }
    check_unit_rows(&qa, "contrastive_loss q")?;
    check_unit_rows(&ka, "contrastive_loss k")?;

    let inv_t = 1.0 / cfg.temperature;
    // positive logit: row-wise q.k
    let pos = scale(&sum_rows(&mul(q_emb, k_emb)), inv_t); // (B, 1)

    if queue.fill == 0 {
        EMPTY_QUEUE_WARN.call_once(|| {
            log::warn!("contrastive_loss: empty queue, positive-only loss is 0");
        });
        if cfg.include_positive_in_denominator {
            let b = pos.shape()[0];
            return Ok(nn::cross_entropy_sum(&pos, &vec![0usize; b]));
        }
        return Err(Error::Config(
            "contrastive_loss: empty queue with positive excluded from denominator".into(),
        ));
    }

    let negs = scale(
        &matmul(q_emb, &transpose2(&Var::constant(queue.snapshot().into_dyn()))),
        inv_t,
    ); // (B, fill)

    let loss = if cfg.include_positive_in_denominator {
        let logits = concat_cols(&pos, &negs);
        let b = logits.shape()[0];
        nn::cross_entropy_sum(&logits, &vec![0usize; b])
    } else {
        // literal form: -sum log( e^pos / sum_j e^neg_j )
        sum_all(&sub(&nn::logsumexp_rows(&negs), &pos))
    };
    Ok(loss)
}

/// Reference list-model used by the queue tests.
pub fn fifo_reference(capacity: usize, batches: &[Array2<f64>]) -> Vec<Vec<f64>> {
    let mut list: Vec<Vec<f64>> = Vec::new();
    for b in batches {
        for row in b.rows() {
            list.push(row.to_vec());
        }
    }
    let keep = list.len().min(capacity);
    list.split_off(list.len() - keep)
}
