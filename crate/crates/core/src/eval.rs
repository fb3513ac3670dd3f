//! Annotation accounting and re-ID scoring.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CameraId, DatasetManifest, GroundTruth, IdentityId, TrackletId};
use crate::labels::{LabelState, Verdict};
use crate::ledger::{LedgerRecord, Source};
use crate::metric::{DistanceCache, MetricError, PackedTracklets};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query set is empty")]
    EmptyQuery,
    #[error("gallery set is empty")]
    EmptyGallery,
    #[error("unknown tracklet {0}")]
    UnknownTracklet(TrackletId),
    #[error("no query has a valid gallery match")]
    NoValidQueries,
    #[error("ground truth covers {truth} tracklets, the manifest has {manifest}")]
    TruthSize { truth: usize, manifest: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub tp_manual: u64,
    pub auto_count: u64,
    #[serde(rename = "T_pa")]
    pub t_pa: Option<f64>,
    #[serde(rename = "AR")]
    pub ar: Option<f64>,
    #[serde(rename = "gained_TP_ratio")]
    pub gained_tp_ratio: Option<f64>,
}

pub fn budget_report(state: &LabelState, truth: Option<&GroundTruth>, t_pa: Option<f64>) -> BudgetReport {
    let c = state.counters();
    BudgetReport {
        tp_manual: c.manual,
        auto_count: c.auto(),
        t_pa,
        ar: t_pa.map(|t| c.manual as f64 / t),
        gained_tp_ratio: truth.map(|g| gained_tp_ratio(state, g)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpaEstimate {
    pub mean: f64,
    /// Sample standard deviation of the per-run totals.
    pub std: f64,
    pub totals: Vec<u64>,
}

impl TpaEstimate {
    /// Spread of single runs relative to the mean.
    pub fn relative_std(&self) -> f64 {
        if self.mean == 0.0 { 0.0 } else { self.std / self.mean }
    }

    /// Standard error of the mean relative to the mean.
    pub fn relative_error(&self) -> f64 {
        self.relative_std() / (self.totals.len() as f64).sqrt()
    }
}

/// Manual annotations one random-order pass needs to decide every pair.
fn tpa_run(identities: &[IdentityId], seed: u64, run: u64) -> u64 {
    let n = identities.len();
    let ids: Vec<TrackletId> = (0..n as TrackletId).collect();
    let mut state = LabelState::from_tracklets(ids, vec![0 as CameraId; n]);
    let mut pairs: Vec<(u32, u32)> = (0..n as u32).flat_map(|i| (i + 1..n as u32).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    // the first undecided pair of a uniform permutation is uniform among
    // the undecided ones, at every step
    pairs.shuffle(&mut rng);
    let mut manual = 0;
    for (i, j) in pairs {
        if state.undecided_count() == 0 {
            break;
        }
        let (i, j) = (i as usize, j as usize);
        if state.is_decided_at(i, j) {
            continue;
        }
        let verdict = if identities[i] == identities[j] { Verdict::Match } else { Verdict::NoMatch };
        let pair = state.pair_at(i, j);
        state.apply_annotation(&pair, verdict).expect("truthful answers never conflict");
        manual += 1;
    }
    manual
}

/// Monte-Carlo estimate of the manual annotations needed to label the whole
/// set by random querying with full closure. `identities` is indexed by
/// tracklet.
pub fn estimate_t_pa(identities: &[IdentityId], runs: usize, seed: u64) -> TpaEstimate {
    assert!(runs >= 1, "at least one run");
    let totals: Vec<u64> = (0..runs as u64).into_par_iter().map(|r| tpa_run(identities, seed, r)).collect();
    let mean = totals.iter().sum::<u64>() as f64 / runs as f64;
    let std = if runs > 1 {
        let ss: f64 = totals.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
        (ss / (runs - 1) as f64).sqrt()
    } else {
        0.0
    };
    TpaEstimate { mean, std, totals }
}

/// Fraction of true-positive pairs known as must-link. 1 when the truth
/// has no positive pairs.
pub fn gained_tp_ratio(state: &LabelState, truth: &GroundTruth) -> f64 {
    let total = truth.true_pair_count();
    if total == 0 {
        return 1.0;
    }
    let mut gained = 0usize;
    for members in state.clusters().values() {
        for (x, &p) in members.iter().enumerate() {
            for &q in &members[x + 1..] {
                if truth.identity_at(p) == truth.identity_at(q) && state.relation_at(p, q) == Some(Verdict::Match) {
                    gained += 1;
                }
            }
        }
    }
    gained as f64 / total as f64
}

/// Manual annotations spent when the gained-TP ratio first reaches
/// `target`, reading the ledger in order.
pub fn annotations_to_reach(records: &[LedgerRecord], truth: &GroundTruth, target: f64) -> Option<u64> {
    let total = truth.true_pair_count();
    if total == 0 || target <= 0.0 {
        return Some(0);
    }
    let mut manual = 0;
    let mut gained = 0usize;
    for r in records {
        if r.source == Source::Manual {
            manual += 1;
        }
        if r.verdict == Verdict::Match {
            let [a, b] = r.pair;
            if truth.identity_of(a).is_some() && truth.identity_of(a) == truth.identity_of(b) {
                gained += 1;
            }
        }
        if gained as f64 / total as f64 >= target {
            return Some(manual);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protocol {
    /// Drop gallery entries from the query's camera that share its identity.
    pub exclude_same_camera: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            exclude_same_camera: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidReport {
    /// `cmc[k - 1]` is the rank-k rate.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
    /// Queries with no valid gallery match, left out of the averages.
    pub skipped: Vec<TrackletId>,
}

impl ReidReport {
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

fn resolve(manifest: &DatasetManifest, ids: &[TrackletId]) -> Result<Vec<usize>, EvalError> {
    ids.iter()
        .map(|&id| manifest.tracklet_index(id).ok_or(EvalError::UnknownTracklet(id)))
        .collect()
}

/// Scores one query: the first-hit rank (1-based) and average precision,
/// or `None` when no valid gallery entry matches.
fn score_query<F: Fn(usize, usize) -> f64>(
    q: usize,
    gallery: &[usize],
    ids: &[TrackletId],
    cameras: &[CameraId],
    truth: &GroundTruth,
    protocol: Protocol,
    dist: &F,
) -> Option<(usize, f64)> {
    let qid = truth.identity_at(q);
    let mut ranked: Vec<(f64, TrackletId, bool)> = gallery
        .iter()
        .filter(|&&g| g != q)
        .filter(|&&g| !(protocol.exclude_same_camera && cameras[g] == cameras[q] && truth.identity_at(g) == qid))
        .map(|&g| (dist(q, g), ids[g], truth.identity_at(g) == qid))
        .collect();
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &(_, _, relevant)) in ranked.iter().enumerate() {
        if relevant {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos + 1);
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

/// CMC and mAP with a caller-supplied distance over dense tracklet indices.
pub fn evaluate_reid_with<F>(
    manifest: &DatasetManifest,
    truth: &GroundTruth,
    query: &[TrackletId],
    gallery: &[TrackletId],
    protocol: Protocol,
    dist: F,
) -> Result<ReidReport, EvalError>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if query.is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    if truth.len() != manifest.tracklet_count() {
        return Err(EvalError::TruthSize {
            truth: truth.len(),
            manifest: manifest.tracklet_count(),
        });
    }
    let qs = resolve(manifest, query)?;
    let gs = resolve(manifest, gallery)?;
    let ids = manifest.tracklet_ids();
    let cameras = manifest.tracklet_cameras();
    let scores: Vec<Option<(usize, f64)>> = qs
        .par_iter()
        .map(|&q| score_query(q, &gs, &ids, &cameras, truth, protocol, &dist))
        .collect();
    let mut counts = vec![0usize; gs.len().max(1)];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    for (&q, s) in qs.iter().zip(&scores) {
        match s {
            Some((first, ap)) => {
                counts[first - 1] += 1;
                ap_sum += ap;
                evaluated += 1;
            }
            None => skipped.push(ids[q]),
        }
    }
    if evaluated == 0 {
        return Err(EvalError::NoValidQueries);
    }
    let mut cmc = Vec::with_capacity(counts.len());
    let mut running = 0;
    for c in counts {
        running += c;
        cmc.push(running as f64 / evaluated as f64);
    }
    Ok(ReidReport {
        cmc,
        map: ap_sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Ranks with a precomputed distance cache.
pub fn evaluate_reid_cached(
    cache: &DistanceCache,
    manifest: &DatasetManifest,
    truth: &GroundTruth,
    query: &[TrackletId],
    gallery: &[TrackletId],
    protocol: Protocol,
) -> Result<ReidReport, EvalError> {
    evaluate_reid_with(manifest, truth, query, gallery, protocol, |i, j| cache.at(i, j))
}

/// Ranks by set-to-set distance over `features` (image order).
pub fn evaluate_reid(
    manifest: &DatasetManifest,
    features: &[Vec<f64>],
    truth: &GroundTruth,
    query: &[TrackletId],
    gallery: &[TrackletId],
    k: usize,
    protocol: Protocol,
) -> Result<ReidReport, EvalError> {
    if k == 0 {
        return Err(MetricError::ZeroK.into());
    }
    let packed = PackedTracklets::new(manifest, features)?;
    evaluate_reid_with(manifest, truth, query, gallery, protocol, |i, j| {
        packed.distance(i, j, k, &mut Vec::new())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use crate::labels::components;
    use crate::metric::{PairKey, ViewClass};
    use proptest::prelude::*;

    #[test]
    fn t_pa_trivial_cases() {
        assert_eq!(estimate_t_pa(&[0, 1], 5, 1).mean, 1.0);
        assert_eq!(estimate_t_pa(&[4, 4], 5, 1).mean, 1.0);
        assert_eq!(estimate_t_pa(&[7, 7, 7], 20, 3).mean, 2.0);
        let e = estimate_t_pa(&[7, 7, 7], 20, 3);
        assert_eq!(e.std, 0.0);
        assert_eq!(estimate_t_pa(&[0, 1, 2], 9, 0).mean, 3.0);
    }

    #[test]
    fn t_pa_bounds_and_stability() {
        let ids: Vec<IdentityId> = (0..20).map(|i| i % 5).collect();
        let e = estimate_t_pa(&ids, 50, 11);
        let (c, k) = (20.0, 5.0);
        let lower = (c - k) + k * (k - 1.0) / 2.0;
        assert!(e.mean >= lower && e.mean <= c * (c - 1.0) / 2.0, "{}", e.mean);
        assert!(e.totals.iter().all(|&t| t as f64 >= lower));
        assert!(e.relative_error() < 0.10, "{}", e.relative_error());
        assert_eq!(e, estimate_t_pa(&ids, 50, 11));
        // independent estimates agree to well within the stated error
        let means: Vec<f64> = (0..10).map(|s| estimate_t_pa(&ids, 50, 100 + s).mean).collect();
        let avg = means.iter().sum::<f64>() / 10.0;
        let sd = (means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!(sd / avg < 0.10, "{}", sd / avg);
    }

    fn line_manifest(cams: &[u32], xs: &[f64], identities: &[u32]) -> DatasetManifest {
        let images = xs
            .iter()
            .enumerate()
            .map(|(t, &x)| ImageRecord {
                image_id: t as u64,
                tracklet_id: t as u32,
                camera_id: cams[t],
                feature: vec![x],
                image_path: None,
                identity: Some(identities[t]),
            })
            .collect();
        DatasetManifest::new(1, 2, images).unwrap()
    }

    #[test]
    fn gained_ratio_counts_closure() {
        // identity 0: tracklets 0,1,2; identity 1: 3,4
        let m = line_manifest(&[0, 1, 0, 1, 0], &[0.0, 1.0, 2.0, 3.0, 4.0], &[0, 0, 0, 1, 1]);
        let truth = m.ground_truth().unwrap();
        let mut s = LabelState::init(&m);
        assert_eq!(gained_tp_ratio(&s, &truth), 0.0);
        s.apply_annotation(&PairKey::new(0, 1, ViewClass::CrossView), Verdict::Match).unwrap();
        assert_eq!(gained_tp_ratio(&s, &truth), 0.25);
        // merging {0,1} with {2} gains |A|*|B| = 2 pairs
        s.apply_annotation(&PairKey::new(1, 2, ViewClass::CrossView), Verdict::Match).unwrap();
        assert_eq!(gained_tp_ratio(&s, &truth), 0.75);
        s.apply_annotation(&PairKey::new(3, 4, ViewClass::CrossView), Verdict::Match).unwrap();
        assert_eq!(gained_tp_ratio(&s, &truth), 1.0);
        let r = budget_report(&s, Some(&truth), Some(6.0));
        assert_eq!((r.tp_manual, r.auto_count, r.ar), (3, 1, Some(0.5)));
    }

    proptest! {
        #[test]
        fn gained_ratio_matches_component_count(
            identities in proptest::collection::vec(0u32..4, 2..12),
            picks in proptest::collection::vec((0usize..12, 0usize..12), 0..30),
        ) {
            let n = identities.len();
            let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let cams: Vec<u32> = (0..n as u32).map(|i| i % 2).collect();
            let m = line_manifest(&cams, &xs, &identities);
            let truth = m.ground_truth().unwrap();
            let mut s = LabelState::init(&m);
            let mut edges = Vec::new();
            let mut prev = 0.0;
            for (a, b) in picks {
                let (a, b) = (a % n, b % n);
                if a == b || identities[a] != identities[b] {
                    continue;
                }
                let p = s.pair_at(a.min(b), a.max(b));
                let _ = s.apply_annotation(&p, Verdict::Match);
                edges.push((a, b));
                let r = gained_tp_ratio(&s, &truth);
                prop_assert!(r >= prev && r <= 1.0);
                prev = r;
            }
            // oracle: same-identity pairs joined by the union-find components
            let comp = components(n, &edges);
            let mut gained = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if comp[i] == comp[j] { gained += 1; }
                }
            }
            let total = truth.true_pair_count();
            let expected = if total == 0 { 1.0 } else { gained as f64 / total as f64 };
            prop_assert_eq!(gained_tp_ratio(&s, &truth), expected);
        }
    }

    #[test]
    fn perfect_separation_scores_one() {
        // pairs at the same point, pairs 10 apart
        let m = line_manifest(&[0, 1, 0, 1, 0, 1], &[0.0, 0.0, 10.0, 10.0, 20.0, 20.0], &[0, 0, 1, 1, 2, 2]);
        let truth = m.ground_truth().unwrap();
        let all = m.tracklet_ids();
        let r = evaluate_reid(&m, &m.features(), &truth, &all, &all, 1, Protocol::default()).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.evaluated, 6);
    }

    #[test]
    fn match_ranked_third_of_ten() {
        // query 0 at 0; gallery 1..=10 at increasing distance; the match
        // (identity 0) is tracklet 3, third closest
        let mut xs = vec![0.0];
        let mut ids = vec![0];
        for g in 1..=10u32 {
            xs.push(g as f64);
            ids.push(if g == 3 { 0 } else { g });
        }
        let cams: Vec<u32> = std::iter::once(0).chain(std::iter::repeat_n(1, 10)).collect();
        let m = line_manifest(&cams, &xs, &ids);
        let truth = m.ground_truth().unwrap();
        let gallery: Vec<u32> = (1..=10).collect();
        let r = evaluate_reid(&m, &m.features(), &truth, &[0], &gallery, 1, Protocol::default()).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 0.0);
        assert_eq!(r.rank(3), 1.0);
        assert_eq!(r.rank(5), 1.0);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_matches_are_excluded_by_default() {
        // query 0 (cam 0) has its same-camera twin at distance 0 and the
        // cross-camera match at distance 2, behind a distractor at 1
        let m = line_manifest(&[0, 0, 1, 1], &[0.0, 0.0, 1.0, 2.0], &[0, 0, 5, 0]);
        let truth = m.ground_truth().unwrap();
        let r = evaluate_reid(&m, &m.features(), &truth, &[0], &[1, 2, 3], 1, Protocol::default()).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 1.0);
        let loose = Protocol { exclude_same_camera: false };
        let r = evaluate_reid(&m, &m.features(), &truth, &[0], &[1, 2, 3], 1, loose).unwrap();
        assert_eq!(r.rank(1), 1.0);
        // hits at ranks 1 and 3
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn queries_without_matches_are_reported() {
        let m = line_manifest(&[0, 1, 1], &[0.0, 1.0, 2.0], &[0, 1, 1]);
        let truth = m.ground_truth().unwrap();
        let r = evaluate_reid(&m, &m.features(), &truth, &[0, 1], &[0, 1, 2], 1, Protocol { exclude_same_camera: false }).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(r.evaluated, 1);
        assert!(matches!(
            evaluate_reid(&m, &m.features(), &truth, &[0], &[1, 2], 1, Protocol::default()),
            Err(EvalError::NoValidQueries)
        ));
        assert!(matches!(
            evaluate_reid(&m, &m.features(), &truth, &[], &[1], 1, Protocol::default()),
            Err(EvalError::EmptyQuery)
        ));
        assert!(matches!(
            evaluate_reid(&m, &m.features(), &truth, &[9], &[1], 1, Protocol::default()),
            Err(EvalError::UnknownTracklet(9))
        ));
    }

    proptest! {
        #[test]
        fn metrics_ignore_gallery_order(
            xs in proptest::collection::vec(-5.0f64..5.0, 4..14),
            rot in 0usize..14,
        ) {
            let n = xs.len();
            let identities: Vec<u32> = (0..n as u32).map(|i| i % 3).collect();
            let cams: Vec<u32> = (0..n as u32).map(|i| (i / 3) % 2).collect();
            let m = line_manifest(&cams, &xs, &identities);
            let truth = m.ground_truth().unwrap();
            let all = m.tracklet_ids();
            let mut shuffled = all.clone();
            shuffled.rotate_left(rot % n);
            shuffled.reverse();
            let a = evaluate_reid(&m, &m.features(), &truth, &all, &all, 1, Protocol { exclude_same_camera: false });
            let b = evaluate_reid(&m, &m.features(), &truth, &all, &shuffled, 1, Protocol { exclude_same_camera: false });
            prop_assert_eq!(a.as_ref().ok(), b.as_ref().ok());
            if let Ok(r) = a {
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!((0.0..=1.0).contains(&r.map));
            }
        }
    }

    #[test]
    fn ledger_crossing_point() {
        let m = line_manifest(&[0, 1, 0, 1], &[0.0, 1.0, 2.0, 3.0], &[0, 0, 1, 1]);
        let truth = m.ground_truth().unwrap();
        let rec = |seq, pair, verdict, source| LedgerRecord { seq, iteration: 1, pair, verdict, source, timestamp: 0 };
        let records = vec![
            rec(0, [0, 2], Verdict::NoMatch, Source::Manual),
            rec(1, [0, 1], Verdict::Match, Source::Manual),
            rec(2, [1, 2], Verdict::NoMatch, Source::Auto),
            rec(3, [2, 3], Verdict::Match, Source::Manual),
        ];
        assert_eq!(annotations_to_reach(&records, &truth, 0.5), Some(2));
        assert_eq!(annotations_to_reach(&records, &truth, 1.0), Some(3));
        assert_eq!(annotations_to_reach(&records[..2], &truth, 1.0), None);
    }
}
