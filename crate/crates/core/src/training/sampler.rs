use log::warn;
use rand::Rng;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};

/// Negative draws per triple before giving up on that user.
pub const MAX_NEGATIVE_TRIES: usize = 100;

/// BPR training triples `(user, positive item, negative item)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BprBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
    /// Triples abandoned because no negative was found within the try budget.
    pub skipped: usize,
}

impl BprBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Sorted unique users of the batch.
    pub fn unique_users(&self) -> Vec<usize> {
        unique(&self.users)
    }

    /// Sorted unique items (positives and negatives) of the batch.
    pub fn unique_items(&self) -> Vec<usize> {
        let mut all = self.pos_items.clone();
        all.extend(&self.neg_items);
        unique(&all)
    }
}

fn unique(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Draws `batch_size` triples: positives uniformly over training edges, negatives
/// uniformly over items with rejection against the user's training items.
pub fn sample_bpr_batch<R: Rng + ?Sized>(split: &SplitDataset, batch_size: usize, rng: &mut R) -> Result<BprBatch> {
    let edges = &split.train_edges;
    if edges.is_empty() {
        return Err(Error::InvalidData("no training edges to sample from".into()));
    }
    let n_items = split.n_items();
    let mut batch = BprBatch {
        users: Vec::with_capacity(batch_size),
        pos_items: Vec::with_capacity(batch_size),
        neg_items: Vec::with_capacity(batch_size),
        skipped: 0,
    };
    let skip_limit = batch_size.max(1) * MAX_NEGATIVE_TRIES;
    while batch.len() < batch_size {
        let (u, pos) = edges[rng.random_range(0..edges.len())];
        let seen = &split.train_items_by_user[u];
        let neg = (0..MAX_NEGATIVE_TRIES)
            .map(|_| rng.random_range(0..n_items))
            .find(|j| seen.binary_search(j).is_err());
        match neg {
            Some(neg) => {
                batch.users.push(u);
                batch.pos_items.push(pos);
                batch.neg_items.push(neg);
            }
            None => {
                batch.skipped += 1;
                if batch.skipped > skip_limit {
                    return Err(Error::InvalidData(
                        "negative sampling failed repeatedly; users interact with (almost) every item".into(),
                    ));
                }
            }
        }
    }
    if batch.skipped > 0 {
        warn!("skipped {} triples with no admissible negative", batch.skipped);
    }
    Ok(batch)
}
