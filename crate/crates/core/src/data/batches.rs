use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use super::augment::{AugmentationPolicy, Normalization};
use super::set::LabeledImageSet;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

/// One mini-batch of normalized images.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// (B, C, H, W).
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the samples in the source set.
    pub indices: Vec<usize>,
}

/// Sample order of one epoch, keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::stream(seed, &format!("shuffle/{epoch}")));
    order
}

/// Everything needed to materialize any batch of any epoch independently.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    set: Arc<LabeledImageSet>,
    batch_size: usize,
    seed: u64,
    augment: Option<AugmentationPolicy>,
    norm: Normalization,
}

impl BatchPlan {
    pub fn new(
        set: Arc<LabeledImageSet>,
        batch_size: usize,
        seed: u64,
        augment: Option<AugmentationPolicy>,
        norm: Normalization,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > set.len() {
            return Err(Error::config(format!(
                "batch size {batch_size} must lie in 1..={}",
                set.len()
            )));
        }
        Ok(BatchPlan {
            set,
            batch_size,
            seed,
            augment,
            norm,
        })
    }

    /// Batches per epoch; the last partial batch is kept.
    pub fn len(&self) -> usize {
        self.set.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds batch `b` of `epoch` from `order`. Each sample's augmentation
    /// draws from its own stream keyed by `(seed, epoch, sample index)`.
    pub fn build(&self, order: &[usize], epoch: usize, b: usize) -> Batch {
        let start = b * self.batch_size;
        let indices = order[start..(start + self.batch_size).min(order.len())].to_vec();
        let shape = self.set.image_shape();
        let per = self.set.image_len();
        let mut data = vec![0.0f32; indices.len() * per];
        for (slot, &i) in data.chunks_exact_mut(per).zip(&indices) {
            match &self.augment {
                Some(policy) => {
                    let mut rng = seeds::stream(self.seed, &format!("augment/{epoch}/{i}"));
                    let img = policy.apply(self.set.image(i), shape, &mut rng);
                    self.norm.apply(&img, shape, slot);
                }
                None => self.norm.apply(self.set.image(i), shape, slot),
            }
        }
        let (c, h, w) = shape;
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("shape"),
            labels: indices.iter().map(|&i| self.set.labels()[i]).collect(),
            indices,
        }
    }

    /// Batches of `epoch` in order, produced by `workers` background threads
    /// (inline when `workers == 0`). Output never depends on `workers`.
    pub fn epoch(&self, epoch: usize, workers: usize) -> EpochBatches {
        let order = Arc::new(epoch_order(self.set.len(), self.seed, epoch));
        let total = self.len();
        if workers == 0 {
            return EpochBatches {
                inner: Inner::Inline {
                    plan: self.clone(),
                    order,
                    epoch,
                },
                next: 0,
                total,
            };
        }
        let mut receivers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(2);
            let plan = self.clone();
            let order = Arc::clone(&order);
            handles.push(std::thread::spawn(move || {
                for b in (w..total).step_by(workers) {
                    if tx.send(plan.build(&order, epoch, b)).is_err() {
                        break;
                    }
                }
            }));
            receivers.push(rx);
        }
        EpochBatches {
            inner: Inner::Workers { receivers, handles },
            next: 0,
            total,
        }
    }
}

enum Inner {
    Inline {
        plan: BatchPlan,
        order: Arc<Vec<usize>>,
        epoch: usize,
    },
    Workers {
        receivers: Vec<Receiver<Batch>>,
        handles: Vec<JoinHandle<()>>,
    },
}

/// Iterator over one epoch's batches.
pub struct EpochBatches {
    inner: Inner,
    next: usize,
    total: usize,
}

impl Iterator for EpochBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.total {
            return None;
        }
        let b = self.next;
        self.next += 1;
        match &self.inner {
            Inner::Inline { plan, order, epoch } => Some(plan.build(order, *epoch, b)),
            Inner::Workers { receivers, .. } => receivers[b % receivers.len()].recv().ok(),
        }
    }
}

impl Drop for EpochBatches {
    fn drop(&mut self) {
        if let Inner::Workers { receivers, handles } = &mut self.inner {
            receivers.clear();
            for h in handles.drain(..) {
                let _ = h.join();
            }
        }
    }
}
