//! Mixed labeled/unlabeled batches and the per-epoch schedule.

use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::types::{LabeledSample, UnlabeledSample};

/// `B` labeled and `mu * B` unlabeled samples consumed by one optimizer step.
#[derive(Debug, Clone)]
pub struct MixedBatch<'a> {
    pub labeled: Vec<&'a LabeledSample>,
    pub unlabeled: Vec<&'a UnlabeledSample>,
}

impl MixedBatch<'_> {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index form of one batch: positions into the labeled and unlabeled pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws from a pool in shuffled order, reshuffling whenever it runs dry.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, r: &mut rng::Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(r);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, r: &mut rng::Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(r);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Schedule for one epoch: `ceil(n_unlabeled / (mu * B))` batches, every
/// unlabeled index visited at least once, the final batch topped up from the
/// start of the same permutation. The labeled pool cycles with a fresh
/// shuffle each time it is exhausted.
pub fn epoch_schedule(
    n_labeled: usize,
    n_unlabeled: usize,
    mu: usize,
    b: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<BatchIndices>> {
    if n_labeled == 0 || b == 0 {
        return Err(Error::Dataset("labeled pool and B must be nonempty".into()));
    }
    let per_batch = mu * b;
    if per_batch > 0 && n_unlabeled == 0 {
        return Err(Error::Dataset(format!(
            "mu * B = {per_batch} unlabeled samples per batch but the unlabeled pool is empty"
        )));
    }
    let mut r = rng::stream(seed, &[tag::BATCHES, epoch as u64]);
    let mut unl: Vec<usize> = (0..n_unlabeled).collect();
    unl.shuffle(&mut r);
    let mut labeled = Cycler::new(n_labeled, &mut r);
    let steps = if per_batch == 0 {
        n_labeled.div_ceil(b)
    } else {
        n_unlabeled.div_ceil(per_batch)
    };
    Ok((0..steps)
        .map(|s| BatchIndices {
            labeled: labeled.take(b, &mut r),
            unlabeled: (0..per_batch).map(|j| unl[(s * per_batch + j) % n_unlabeled]).collect(),
        })
        .collect())
}

/// Labeled-only schedule: `ceil(n_labeled / B)` batches.
pub fn labeled_schedule(n_labeled: usize, b: usize, seed: u64, epoch: usize) -> Result<Vec<BatchIndices>> {
    epoch_schedule(n_labeled, 0, 0, b, seed, epoch)
}

/// Materializes the schedule of `epoch` as borrowed batches.
pub fn batch_stream<'a>(
    labeled: &'a [LabeledSample],
    unlabeled: &'a [UnlabeledSample],
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = MixedBatch<'a>> + 'a> {
    let plan = epoch_schedule(labeled.len(), unlabeled.len(), cfg.mu, cfg.labeled_per_batch, seed, epoch)?;
    Ok(plan.into_iter().map(move |ix| MixedBatch {
        labeled: ix.labeled.iter().map(|&i| &labeled[i]).collect(),
        unlabeled: ix.unlabeled.iter().map(|&i| &unlabeled[i]).collect(),
    }))
}
