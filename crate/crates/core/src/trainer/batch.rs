use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::dataio::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

const BATCH_STREAM: u64 = 10;

/// Record indices of one batch, group by group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub records: Vec<usize>,
    pub identities: Vec<u32>,
}

/// Batch shape: `groups` identities with `per_group` images each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub groups: usize,
    pub per_group: usize,
}

/// Deterministic epoch schedule over an index.
///
/// Every identity's images are shuffled and cut into runs of `per_group`;
/// round `r` takes run `r` of every identity, shuffles the identities and
/// cuts them into batches. Within an epoch no image repeats. Identities
/// with fewer than `per_group` images never appear; identities beyond a
/// whole number of groups in a round rotate out with the shuffle.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    shape: BatchShape,
    by_identity: BTreeMap<u32, Vec<usize>>,
    rounds: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(index: &DatasetIndex, shape: BatchShape, seed: u64) -> Result<Self> {
        if shape.groups == 0 || shape.per_group == 0 {
            return Err(Error::config("batch groups and images per group must be positive"));
        }
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in index.records.iter().enumerate() {
            by_identity.entry(r.identity).or_default().push(i);
        }
        by_identity.retain(|_, v| v.len() >= shape.per_group);
        if by_identity.len() < shape.groups {
            return Err(Error::dataset(format!(
                "a batch needs {} identities with at least {} images each, found {}",
                shape.groups,
                shape.per_group,
                by_identity.len()
            )));
        }
        let rounds = by_identity
            .values()
            .map(|v| v.len() / shape.per_group)
            .min()
            .unwrap_or(0);
        Ok(Self {
            shape,
            by_identity,
            rounds,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.rounds * (self.by_identity.len() / self.shape.groups)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = derive_rng(self.seed, &[BATCH_STREAM, epoch as u64]);
        let mut runs: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (&id, recs) in &self.by_identity {
            let mut r = recs.clone();
            r.shuffle(&mut rng);
            runs.insert(id, r);
        }
        let ids: Vec<u32> = self.by_identity.keys().copied().collect();
        let (g, k) = (self.shape.groups, self.shape.per_group);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for round in 0..self.rounds {
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks_exact(g) {
                let mut records = Vec::with_capacity(g * k);
                let mut identities = Vec::with_capacity(g * k);
                for id in chunk {
                    records.extend_from_slice(&runs[id][round * k..(round + 1) * k]);
                    identities.extend(std::iter::repeat_n(*id, k));
                }
                out.push(Batch { records, identities });
            }
        }
        out
    }
}

/// Batch number `iteration` of the schedule, counting across epochs.
pub fn sample_batch(index: &DatasetIndex, shape: BatchShape, seed: u64, iteration: usize) -> Result<Batch> {
    let plan = BatchPlan::new(index, shape, seed)?;
    let per = plan.batches_per_epoch();
    Ok(plan.epoch(iteration / per).swap_remove(iteration % per))
}

/// `(anchor, positive, negative)` per batch item.
pub type Triple = (usize, usize, usize);

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch-hard mining: per anchor the farthest same-label item and the
/// nearest other-label item by squared distance. Ties go to the lowest
/// index.
pub fn mine_triplets(features: &[Tensor], labels: &[u32]) -> Result<Vec<Triple>> {
    if features.len() != labels.len() {
        return Err(Error::param(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Mining(
            "triplet mining needs at least two identities in the batch".into(),
        ));
    }
    let n = labels.len();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = sq_dist(&features[a].data, &features[j].data);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let p = pos.ok_or_else(|| {
            Error::Mining(format!(
                "item {} (identity {}) has no positive in the batch",
                a, labels[a]
            ))
        })?;
        out.push((a, p.0, neg.expect("two identities present").0));
    }
    Ok(out)
}
