//! Tracklet pseudo-labels and the pairwise constraint graph.
//!
//! Every tracklet starts in its own cluster. A `Match` verdict merges the two
//! clusters and marks every cross pair as must-link; a `NoMatch` verdict marks
//! every cross pair between the two clusters as cannot-link. Both relations
//! are kept closed: must-link is transitive, and cannot-link always holds
//! between whole clusters. Pairs that become decided as a side effect are
//! reported back as auto-annotations.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CameraId, DatasetManifest, TrackletId};
use crate::dbscan::dbscan;
use crate::metric::{PairKey, ViewClass};

pub type ClusterId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Match,
    #[serde(rename = "nomatch")]
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("unknown tracklet {0}")]
    UnknownTracklet(TrackletId),
    #[error("pair {pair} is already known as {existing:?}; verdict {verdict:?} contradicts it")]
    Contradiction {
        pair: PairKey,
        existing: Verdict,
        verdict: Verdict,
    },
    #[error("pair {pair} was already decided as {existing:?}")]
    AlreadyKnown { pair: PairKey, existing: Verdict },
}

/// A pair decided by closure rather than by a direct query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoPair {
    pub pair: PairKey,
    pub verdict: Verdict,
}

const UNKNOWN: i8 = 0;
const MUST: i8 = 1;
const CANNOT: i8 = -1;

/// Dense symmetric relation over tracklet indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintGraph {
    n: usize,
    relation: Vec<i8>,
    must_count: usize,
    cannot_count: usize,
}

impl ConstraintGraph {
    fn new(n: usize) -> Self {
        Self {
            n,
            relation: vec![UNKNOWN; n * n],
            must_count: 0,
            cannot_count: 0,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Verdict> {
        match self.relation[i * self.n + j] {
            MUST => Some(Verdict::Match),
            CANNOT => Some(Verdict::NoMatch),
            _ => None,
        }
    }

    fn set(&mut self, i: usize, j: usize, v: Verdict) {
        let code = match v {
            Verdict::Match => MUST,
            Verdict::NoMatch => CANNOT,
        };
        debug_assert_eq!(self.relation[i * self.n + j], UNKNOWN);
        self.relation[i * self.n + j] = code;
        self.relation[j * self.n + i] = code;
        match v {
            Verdict::Match => self.must_count += 1,
            Verdict::NoMatch => self.cannot_count += 1,
        }
    }

    pub fn must_link_count(&self) -> usize {
        self.must_count
    }

    pub fn cannot_link_count(&self) -> usize {
        self.cannot_count
    }

    pub fn decided_count(&self) -> usize {
        self.must_count + self.cannot_count
    }

    /// Index pairs `(i, j)`, `i < j`, carrying the given relation.
    pub fn pairs(&self, verdict: Verdict) -> Vec<(usize, usize)> {
        let code = match verdict {
            Verdict::Match => MUST,
            Verdict::NoMatch => CANNOT,
        };
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.relation[i * self.n + j] == code)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationCounters {
    /// Queries answered with a new decision.
    pub manual: u64,
    pub auto_positive: u64,
    pub auto_negative: u64,
    /// Queries for pairs that were already decided.
    pub already_known: u64,
}

impl AnnotationCounters {
    pub fn auto(&self) -> u64 {
        self.auto_positive + self.auto_negative
    }
}

/// Pseudo-labels, constraints and annotation counters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelState {
    ids: Vec<TrackletId>,
    cameras: Vec<CameraId>,
    index: HashMap<TrackletId, usize>,
    assignments: Vec<ClusterId>,
    members: BTreeMap<ClusterId, Vec<usize>>,
    graph: ConstraintGraph,
    generation: u64,
    counters: AnnotationCounters,
}

impl LabelState {
    /// One singleton cluster per tracklet, ids `1..=C` in tracklet order.
    pub fn init(manifest: &DatasetManifest) -> Self {
        Self::from_tracklets(manifest.tracklet_ids(), manifest.tracklet_cameras())
    }

    /// Like [`LabelState::init`] for a bare tracklet list; `ids` must be
    /// sorted ascending and unique.
    pub fn from_tracklets(ids: Vec<TrackletId>, cameras: Vec<CameraId>) -> Self {
        assert_eq!(ids.len(), cameras.len());
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let n = ids.len();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let assignments: Vec<ClusterId> = (1..=n as ClusterId).collect();
        let members = (0..n).map(|i| (assignments[i], vec![i])).collect();
        Self {
            ids,
            cameras,
            index,
            assignments,
            members,
            graph: ConstraintGraph::new(n),
            generation: 0,
            counters: AnnotationCounters::default(),
        }
    }

    pub fn tracklet_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[TrackletId] {
        &self.ids
    }

    pub fn index_of(&self, id: TrackletId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn counters(&self) -> AnnotationCounters {
        self.counters
    }

    pub fn graph(&self) -> &ConstraintGraph {
        &self.graph
    }

    pub fn cluster_count(&self) -> usize {
        self.members.len()
    }

    /// Cluster id per tracklet index.
    pub fn assignments(&self) -> &[ClusterId] {
        &self.assignments
    }

    pub fn cluster_at(&self, index: usize) -> ClusterId {
        self.assignments[index]
    }

    pub fn cluster_of(&self, id: TrackletId) -> Option<ClusterId> {
        self.index_of(id).map(|i| self.assignments[i])
    }

    /// Members (tracklet indices, ascending) of every cluster, by cluster id.
    pub fn clusters(&self) -> &BTreeMap<ClusterId, Vec<usize>> {
        &self.members
    }

    /// Cluster id of each image, through its tracklet.
    pub fn image_labels(&self, manifest: &DatasetManifest) -> Vec<ClusterId> {
        let mut out = vec![0; manifest.image_count()];
        for (ti, t) in manifest.tracklets().iter().enumerate() {
            for &img in &t.images {
                out[img] = self.assignments[ti];
            }
        }
        out
    }

    pub fn pair_at(&self, i: usize, j: usize) -> PairKey {
        let view = if self.cameras[i] == self.cameras[j] {
            ViewClass::SameView
        } else {
            ViewClass::CrossView
        };
        PairKey::new(self.ids[i], self.ids[j], view)
    }

    pub fn pair(&self, x: TrackletId, y: TrackletId) -> Result<PairKey, LabelError> {
        let i = self.index_of(x).ok_or(LabelError::UnknownTracklet(x))?;
        let j = self.index_of(y).ok_or(LabelError::UnknownTracklet(y))?;
        Ok(self.pair_at(i, j))
    }

    pub fn relation_at(&self, i: usize, j: usize) -> Option<Verdict> {
        self.graph.get(i, j)
    }

    pub fn relation(&self, pair: &PairKey) -> Option<Verdict> {
        let i = self.index_of(pair.a)?;
        let j = self.index_of(pair.b)?;
        self.graph.get(i, j)
    }

    pub fn is_decided_at(&self, i: usize, j: usize) -> bool {
        self.graph.get(i, j).is_some()
    }

    pub fn is_decided(&self, pair: &PairKey) -> bool {
        self.relation(pair).is_some()
    }

    pub fn must_link(&self) -> Vec<PairKey> {
        self.graph
            .pairs(Verdict::Match)
            .into_iter()
            .map(|(i, j)| self.pair_at(i, j))
            .collect()
    }

    pub fn cannot_link(&self) -> Vec<PairKey> {
        self.graph
            .pairs(Verdict::NoMatch)
            .into_iter()
            .map(|(i, j)| self.pair_at(i, j))
            .collect()
    }

    /// Total number of tracklet pairs, decided or not.
    pub fn pair_count(&self) -> usize {
        let n = self.ids.len();
        n * n.saturating_sub(1) / 2
    }

    pub fn undecided_count(&self) -> usize {
        self.pair_count() - self.graph.decided_count()
    }

    /// Records one answered query and closes both relations.
    ///
    /// Returns the pairs decided as a consequence, excluding `pair` itself.
    /// On error the state is unchanged except for the already-known counter.
    pub fn apply_annotation(
        &mut self,
        pair: &PairKey,
        verdict: Verdict,
    ) -> Result<Vec<AutoPair>, LabelError> {
        let i = self.index_of(pair.a).ok_or(LabelError::UnknownTracklet(pair.a))?;
        let j = self.index_of(pair.b).ok_or(LabelError::UnknownTracklet(pair.b))?;
        if let Some(existing) = self.graph.get(i, j) {
            if existing == verdict {
                self.counters.already_known += 1;
                return Err(LabelError::AlreadyKnown {
                    pair: *pair,
                    existing,
                });
            }
            return Err(LabelError::Contradiction {
                pair: *pair,
                existing,
                verdict,
            });
        }
        self.counters.manual += 1;
        let ca = self.assignments[i];
        let cb = self.assignments[j];
        let mut auto = Vec::new();
        match verdict {
            Verdict::NoMatch => {
                self.mark_between(ca, cb, Verdict::NoMatch, (i, j), &mut auto);
            }
            Verdict::Match => {
                self.mark_between(ca, cb, Verdict::Match, (i, j), &mut auto);
                // Cannot-links held by either side now hold for the union.
                let rep_a = self.members[&ca][0];
                let rep_b = self.members[&cb][0];
                let others: Vec<(ClusterId, bool, bool)> = self
                    .members
                    .iter()
                    .filter(|(&c, _)| c != ca && c != cb)
                    .map(|(&c, m)| {
                        (
                            c,
                            self.graph.get(rep_a, m[0]) == Some(Verdict::NoMatch),
                            self.graph.get(rep_b, m[0]) == Some(Verdict::NoMatch),
                        )
                    })
                    .collect();
                for (c, neg_a, neg_b) in others {
                    if neg_a && !neg_b {
                        self.mark_between(cb, c, Verdict::NoMatch, (i, j), &mut auto);
                    } else if neg_b && !neg_a {
                        self.mark_between(ca, c, Verdict::NoMatch, (i, j), &mut auto);
                    }
                }
                let (keep, gone) = if ca < cb { (ca, cb) } else { (cb, ca) };
                let moved = self.members.remove(&gone).expect("cluster exists");
                for &t in &moved {
                    self.assignments[t] = keep;
                }
                let kept = self.members.get_mut(&keep).expect("cluster exists");
                kept.extend(moved);
                kept.sort_unstable();
            }
        }
        for a in &auto {
            match a.verdict {
                Verdict::Match => self.counters.auto_positive += 1,
                Verdict::NoMatch => self.counters.auto_negative += 1,
            }
        }
        Ok(auto)
    }

    /// Marks every cross pair of clusters `x` and `y`, collecting all but
    /// `queried` as auto-annotations.
    fn mark_between(
        &mut self,
        x: ClusterId,
        y: ClusterId,
        verdict: Verdict,
        queried: (usize, usize),
        auto: &mut Vec<AutoPair>,
    ) {
        let xs = self.members[&x].clone();
        let ys = self.members[&y].clone();
        for &p in &xs {
            for &q in &ys {
                debug_assert!(self.graph.get(p, q).is_none());
                self.graph.set(p, q, verdict);
                if (p, q) != queried && (q, p) != queried {
                    auto.push(AutoPair {
                        pair: self.pair_at(p, q),
                        verdict,
                    });
                }
            }
        }
    }

    /// Rebuilds cluster assignments by DBSCAN over the merge distance (0 for
    /// must-link pairs, 1 otherwise). Noise points become singletons. Cluster
    /// ids are renumbered `1..` in order of each cluster's lowest tracklet
    /// index. Advances the generation.
    pub fn merge_labels(&mut self, eps: f64, min_pts: usize) {
        let n = self.ids.len();
        let graph = &self.graph;
        let labels = dbscan(n, eps, min_pts, |i, j| {
            if i == j || graph.get(i, j) == Some(Verdict::Match) {
                0.0
            } else {
                1.0
            }
        });
        // noise points get their own group
        let mut group_of: Vec<usize> = Vec::with_capacity(n);
        let dense_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut next_noise = dense_clusters;
        for l in &labels {
            match l {
                Some(c) => group_of.push(*c),
                None => {
                    group_of.push(next_noise);
                    next_noise += 1;
                }
            }
        }
        let mut renumber: HashMap<usize, ClusterId> = HashMap::new();
        let mut members: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
        for (t, g) in group_of.into_iter().enumerate() {
            let next = renumber.len() as ClusterId + 1;
            let id = *renumber.entry(g).or_insert(next);
            self.assignments[t] = id;
            members.entry(id).or_default().push(t);
        }
        self.members = members;
        self.generation += 1;
    }
}

/// Union-find oracle for must-link components.
#[cfg(test)]
pub(crate) fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

/// True when two labelings induce the same partition.
#[cfg(test)]
pub(crate) fn same_partition<A: Eq + std::hash::Hash + Copy, B: Eq + std::hash::Hash + Copy>(
    x: &[A],
    y: &[B],
) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    x.len() == y.len()
        && x.iter().zip(y).all(|(a, b)| {
            *fwd.entry(*a).or_insert(*b) == *b && *back.entry(*b).or_insert(*a) == *a
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn manifest(c: usize) -> DatasetManifest {
        let images = (0..c)
            .map(|t| ImageRecord {
                image_id: t as u64,
                tracklet_id: t as u32 + 1,
                camera_id: (t % 2) as u32,
                feature: vec![t as f64],
                image_path: None,
                identity: None,
            })
            .collect();
        DatasetManifest::new(1, 2, images).unwrap()
    }

    fn key(s: &LabelState, a: u32, b: u32) -> PairKey {
        s.pair(a, b).unwrap()
    }

    fn pairset(pairs: &[AutoPair]) -> BTreeSet<[u32; 2]> {
        pairs.iter().map(|p| p.pair.ids()).collect()
    }

    #[test]
    fn init_is_singletons() {
        let m = manifest(5);
        let s = LabelState::init(&m);
        assert_eq!(s.cluster_count(), 5);
        assert_eq!(s.assignments(), &[1, 2, 3, 4, 5]);
        assert_eq!(s.generation(), 0);
        assert_eq!(s.graph().decided_count(), 0);
        assert_eq!(s.image_labels(&m), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn singleton_match_merges_without_auto() {
        let mut s = LabelState::init(&manifest(3));
        let auto = s.apply_annotation(&key(&s, 1, 2), Verdict::Match).unwrap();
        assert!(auto.is_empty());
        assert_eq!(s.cluster_of(1), s.cluster_of(2));
        assert_eq!(s.cluster_count(), 2);
        assert_eq!(s.counters().manual, 1);
    }

    #[test]
    fn cluster_match_auto_annotates_cross_product() {
        // a=1, b=2, c=3, d=4
        let mut s = LabelState::init(&manifest(4));
        s.apply_annotation(&key(&s, 1, 3), Verdict::Match).unwrap();
        s.apply_annotation(&key(&s, 2, 4), Verdict::Match).unwrap();
        let auto = s.apply_annotation(&key(&s, 1, 2), Verdict::Match).unwrap();
        assert_eq!(pairset(&auto), BTreeSet::from([[1, 4], [2, 3], [3, 4]]));
        assert!(auto.iter().all(|a| a.verdict == Verdict::Match));
        assert_eq!(s.cluster_count(), 1);
        assert_eq!(s.graph().must_link_count(), 6);
        assert_eq!(s.counters().manual, 3);
        assert_eq!(s.counters().auto_positive, 3);
    }

    #[test]
    fn no_match_propagates_to_cluster() {
        // clusters {a, c} and {b}
        let mut s = LabelState::init(&manifest(3));
        s.apply_annotation(&key(&s, 1, 3), Verdict::Match).unwrap();
        let auto = s.apply_annotation(&key(&s, 1, 2), Verdict::NoMatch).unwrap();
        assert_eq!(pairset(&auto), BTreeSet::from([[2, 3]]));
        let cannot: BTreeSet<[u32; 2]> = s.cannot_link().iter().map(|p| p.ids()).collect();
        assert_eq!(cannot, BTreeSet::from([[1, 2], [2, 3]]));
    }

    #[test]
    fn match_inherits_cannot_links() {
        let mut s = LabelState::init(&manifest(3));
        s.apply_annotation(&key(&s, 1, 3), Verdict::NoMatch).unwrap();
        let auto = s.apply_annotation(&key(&s, 1, 2), Verdict::Match).unwrap();
        assert_eq!(auto, vec![AutoPair { pair: key(&s, 2, 3), verdict: Verdict::NoMatch }]);
        assert_eq!(s.undecided_count(), 0);
    }

    #[test]
    fn contradiction_and_already_known() {
        let mut s = LabelState::init(&manifest(3));
        s.apply_annotation(&key(&s, 1, 2), Verdict::Match).unwrap();
        s.apply_annotation(&key(&s, 2, 3), Verdict::Match).unwrap();
        let before = s.clone();
        let err = s.apply_annotation(&key(&s, 1, 3), Verdict::NoMatch).unwrap_err();
        assert!(matches!(err, LabelError::Contradiction { existing: Verdict::Match, .. }));
        assert_eq!(s, before);
        let err = s.apply_annotation(&key(&s, 1, 3), Verdict::Match).unwrap_err();
        assert!(matches!(err, LabelError::AlreadyKnown { .. }));
        assert_eq!(s.counters().manual, 2);
        assert_eq!(s.counters().already_known, 1);
        assert!(matches!(
            s.apply_annotation(&PairKey::new(1, 99, ViewClass::SameView), Verdict::Match),
            Err(LabelError::UnknownTracklet(99))
        ));
    }

    #[test]
    fn merge_with_no_links_keeps_singletons() {
        let mut s = LabelState::init(&manifest(4));
        s.apply_annotation(&key(&s, 1, 2), Verdict::NoMatch).unwrap();
        s.merge_labels(0.01, 2);
        assert_eq!(s.assignments(), &[1, 2, 3, 4]);
        assert_eq!(s.generation(), 1);
    }

    #[test]
    fn merge_chain_and_path() {
        let mut s = LabelState::init(&manifest(4));
        s.apply_annotation(&key(&s, 1, 2), Verdict::Match).unwrap();
        s.apply_annotation(&key(&s, 2, 3), Verdict::Match).unwrap();
        s.merge_labels(0.01, 2);
        assert_eq!(s.assignments(), &[1, 1, 1, 2]);

        let mut s = LabelState::init(&manifest(51));
        for t in 1..51 {
            s.apply_annotation(&key(&s, t, t + 1), Verdict::Match).unwrap();
        }
        s.merge_labels(0.01, 2);
        assert_eq!(s.cluster_count(), 1);
        assert_eq!(s.clusters()[&1].len(), 51);
    }

    fn random_ops(c: usize) -> impl Strategy<Value = Vec<(usize, usize, bool)>> {
        prop::collection::vec((0..c, 0..c, prop::bool::weighted(0.4)), 0..3 * c)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn closure_invariants_hold(c in 2usize..20, ops in random_ops(20)) {
            let m = manifest(c);
            let mut s = LabelState::init(&m);
            let mut positives = Vec::new();
            let (mut musts, mut cannots) = (0, 0);
            for (x, y, is_match) in ops {
                let (x, y) = (x % c, y % c);
                if x == y { continue; }
                let pair = s.pair_at(x, y);
                let v = if is_match { Verdict::Match } else { Verdict::NoMatch };
                if s.apply_annotation(&pair, v).is_ok() && is_match {
                    positives.push((x, y));
                }
                prop_assert!(s.graph().must_link_count() >= musts);
                prop_assert!(s.graph().cannot_link_count() >= cannots);
                musts = s.graph().must_link_count();
                cannots = s.graph().cannot_link_count();
            }
            // must-link is exactly "same component"; cannot-link is cluster-wide
            let comp = components(c, &positives);
            for i in 0..c {
                for j in i + 1..c {
                    let rel = s.relation_at(i, j);
                    prop_assert_eq!(rel == Some(Verdict::Match), comp[i] == comp[j]);
                    prop_assert_eq!(s.cluster_at(i) == s.cluster_at(j), comp[i] == comp[j]);
                    if rel == Some(Verdict::NoMatch) {
                        for &p in &s.clusters()[&s.cluster_at(i)] {
                            for &q in &s.clusters()[&s.cluster_at(j)] {
                                prop_assert_eq!(s.relation_at(p, q), Some(Verdict::NoMatch));
                            }
                        }
                    }
                }
            }
            let before = s.assignments().to_vec();
            s.merge_labels(0.01, 2);
            prop_assert!(same_partition(&before, s.assignments()));
            prop_assert!(same_partition(&comp, s.assignments()));
        }
    }
}
