use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::adversary::AdversarialRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Clean,
    Augmented,
}

/// One element of a batch: the sample id plus where to find its data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub id: u64,
    pub origin: Origin,
    /// Index into the dataset examples (clean) or the record slice (augmented).
    pub index: usize,
}

/// One shuffled epoch over clean samples and accepted cache records.
///
/// Every clean sample and every accepted record appears exactly once; the
/// final partial batch is emitted.
#[derive(Debug, Clone)]
pub struct MixedBatches {
    order: Vec<BatchEntry>,
    batch_size: usize,
    pos: usize,
}

impl MixedBatches {
    /// Total number of elements in the epoch.
    pub fn epoch_len(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for MixedBatches {
    type Item = Vec<BatchEntry>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

pub fn mixed_batches(
    dataset: &Dataset,
    records: &[AdversarialRecord],
    batch_size: usize,
    seed: u64,
) -> Result<MixedBatches> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<BatchEntry> = dataset
        .examples
        .iter()
        .enumerate()
        .map(|(index, e)| BatchEntry { id: e.id, origin: Origin::Clean, index })
        .collect();
    for (index, r) in records.iter().enumerate() {
        if dataset.position_of(r.sample_id).is_none() {
            return Err(Error::DanglingReference(r.sample_id));
        }
        if r.accepted {
            order.push(BatchEntry { id: r.sample_id, origin: Origin::Augmented, index });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(MixedBatches { order, batch_size, pos: 0 })
}
