//! Candidate selection strategies.
//!
//! The view-aware selector takes the `m1(t)` closest undecided same-camera
//! pairs and the `m2(t)` closest undecided cross-camera pairs, where both
//! counts step up at iteration `t0`. Random and k-means selectors are the
//! baselines.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::kmeans::{KMeansError, kmeans};
use crate::labels::LabelState;
use crate::metric::{DistanceCache, DistancePools, PoolEntry, ViewClass};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("iteration numbering starts at 1")]
    ZeroIteration,
    #[error("schedule should satisfy s1 > s3 and s4 > s2 (got s1={s1}, s2={s2}, s3={s3}, s4={s4}); set the override flag to run it anyway")]
    Ordering { s1: usize, s2: usize, s3: usize, s4: usize },
}

/// Per-iteration annotation counts: `m1 = s1, m2 = s3` before `t0`, then
/// `m1 = s2, m2 = s4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub s4: usize,
    pub t0: u32,
}

impl SamplingSchedule {
    /// Size-relative defaults: 0.2% of same-view pairs and 0.05% of
    /// cross-view pairs per early iteration, then half and four times those.
    pub fn scaled(same_view_pairs: usize, cross_view_pairs: usize) -> Self {
        let s1 = ((same_view_pairs as f64 * 0.002).round() as usize).max(1);
        let s3 = ((cross_view_pairs as f64 * 0.0005).round() as usize).max(1);
        Self {
            s1,
            s2: s1 / 2,
            s3,
            s4: 4 * s3,
            t0: 5,
        }
    }

    /// Checks the easy-to-hard ordering. With `allow_override` a violation
    /// is logged instead of rejected.
    pub fn validate(&self, allow_override: bool) -> Result<(), ScheduleError> {
        if self.s1 > self.s3 && self.s4 > self.s2 {
            return Ok(());
        }
        let err = ScheduleError::Ordering {
            s1: self.s1,
            s2: self.s2,
            s3: self.s3,
            s4: self.s4,
        };
        if allow_override {
            tracing::warn!("{err}");
            Ok(())
        } else {
            Err(err)
        }
    }

    pub fn counts(&self, t: u32) -> Result<(usize, usize), ScheduleError> {
        if t == 0 {
            return Err(ScheduleError::ZeroIteration);
        }
        Ok(if t < self.t0 {
            (self.s1, self.s3)
        } else {
            (self.s2, self.s4)
        })
    }
}

pub fn schedule_counts(t: u32, schedule: &SamplingSchedule) -> Result<(usize, usize), ScheduleError> {
    schedule.counts(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    pub iteration: u32,
    pub pairs: Vec<PoolEntry>,
}

impl CandidateBatch {
    pub fn new(iteration: u32, pairs: Vec<PoolEntry>) -> Self {
        Self { iteration, pairs }
    }

    /// `(same_view, cross_view)` sizes.
    pub fn counts(&self) -> (usize, usize) {
        let same = self.pairs.iter().filter(|e| e.pair.view == ViewClass::SameView).count();
        (same, self.pairs.len() - same)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The first `m` undecided entries of `pool` at or after `start`, and the
/// position just past the last one taken.
pub fn take_undecided(
    pool: &[PoolEntry],
    state: &LabelState,
    start: usize,
    m: usize,
) -> (Vec<PoolEntry>, usize) {
    let mut out = Vec::with_capacity(m.min(pool.len()));
    let mut pos = start;
    while out.len() < m && pos < pool.len() {
        let e = &pool[pos];
        if !state.is_decided_at(e.a_index as usize, e.b_index as usize) {
            out.push(*e);
        }
        pos += 1;
    }
    (out, pos)
}

pub fn select_view_aware(
    pools: &DistancePools,
    state: &LabelState,
    t: u32,
    schedule: &SamplingSchedule,
) -> Result<CandidateBatch, ScheduleError> {
    let (m1, m2) = schedule.counts(t)?;
    let (mut pairs, _) = take_undecided(&pools.same_view, state, 0, m1);
    pairs.extend(take_undecided(&pools.cross_view, state, 0, m2).0);
    Ok(CandidateBatch::new(t, pairs))
}

fn pool_order(x: &PoolEntry, y: &PoolEntry) -> Ordering {
    x.distance
        .total_cmp(&y.distance)
        .then(x.pair.a.cmp(&y.pair.a))
        .then(x.pair.b.cmp(&y.pair.b))
}

/// Ablation: the `m1(t) + m2(t)` closest undecided pairs regardless of view.
pub fn select_mixed(
    pools: &DistancePools,
    state: &LabelState,
    t: u32,
    schedule: &SamplingSchedule,
) -> Result<CandidateBatch, ScheduleError> {
    let (m1, m2) = schedule.counts(t)?;
    let m = m1 + m2;
    let (same, _) = take_undecided(&pools.same_view, state, 0, m);
    let (cross, _) = take_undecided(&pools.cross_view, state, 0, m);
    let mut merged: Vec<PoolEntry> = same.into_iter().chain(cross).collect();
    merged.sort_by(pool_order);
    merged.truncate(m);
    Ok(CandidateBatch::new(t, merged))
}

/// Uniform sample without replacement from all undecided pairs.
pub fn select_random(
    cache: &DistanceCache,
    state: &LabelState,
    budget: usize,
    t: u32,
    seed: u64,
) -> CandidateBatch {
    let n = state.tracklet_count();
    let undecided: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !state.is_decided_at(i, j))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = budget.min(undecided.len());
    let pairs = index::sample(&mut rng, undecided.len(), amount)
        .into_iter()
        .map(|p| {
            let (i, j) = undecided[p];
            PoolEntry {
                pair: state.pair_at(i, j),
                a_index: i as u32,
                b_index: j as u32,
                distance: cache.at(i, j),
            }
        })
        .collect();
    CandidateBatch::new(t, pairs)
}

/// Mean image feature of each tracklet.
pub fn tracklet_means(manifest: &DatasetManifest, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    manifest
        .tracklets()
        .iter()
        .map(|t| {
            let mut mean = vec![0.0; manifest.dimension()];
            for &img in &t.images {
                mean.iter_mut().zip(&features[img]).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= t.images.len() as f64);
            mean
        })
        .collect()
}

/// Ranks tracklets by the distance of their mean feature to their k-means
/// center, closest first, and returns up to `budget` of those not yet in
/// `labeled` (dense indices). Ties go to the lower tracklet id.
pub fn select_kmeans(
    manifest: &DatasetManifest,
    features: &[Vec<f64>],
    labeled: &BTreeSet<usize>,
    k: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>, KMeansError> {
    let means = tracklet_means(manifest, features);
    let fit = kmeans(&means, k, seed)?;
    let mut order: Vec<usize> = (0..means.len()).filter(|i| !labeled.contains(i)).collect();
    order.sort_by(|&x, &y| fit.distances[x].total_cmp(&fit.distances[y]).then(x.cmp(&y)));
    order.truncate(budget);
    Ok(order)
}

/// Turns identity-labeling of `selected` tracklets into pair queries: each
/// new tracklet is compared against one representative of every cluster
/// seen so far, closest cluster first. `labeled` grows to include the new
/// tracklets.
pub fn identity_queries(
    selected: &[usize],
    labeled: &mut BTreeSet<usize>,
    state: &LabelState,
    cache: &DistanceCache,
    t: u32,
) -> CandidateBatch {
    let mut pairs = Vec::new();
    for &new in selected {
        let mut reps: Vec<usize> = Vec::new();
        let mut seen_clusters = BTreeSet::new();
        for &l in labeled.iter() {
            if seen_clusters.insert(state.cluster_at(l)) {
                reps.push(l);
            }
        }
        reps.sort_by(|&x, &y| cache.at(new, x).total_cmp(&cache.at(new, y)).then(x.cmp(&y)));
        for rep in reps {
            let (i, j) = if new < rep { (new, rep) } else { (rep, new) };
            pairs.push(PoolEntry {
                pair: state.pair_at(i, j),
                a_index: i as u32,
                b_index: j as u32,
                distance: cache.at(i, j),
            });
        }
        labeled.insert(new);
    }
    CandidateBatch::new(t, pairs)
}
