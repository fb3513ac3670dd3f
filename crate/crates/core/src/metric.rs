//! Tracklet dissimilarity and the per-view pools of candidate pairs.
//!
//! The set-to-set distance between two tracklets is the mean of the `k`
//! smallest Euclidean distances over all cross image pairs. Pools hold every
//! tracklet pair ordered by that distance, split into same-camera and
//! cross-camera pairs.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, TrackletId};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("set-to-set distance needs two non-empty image sets")]
    EmptySet,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("image vectors have different lengths ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("embedding covers {found} images, manifest has {expected}")]
    Coverage { expected: usize, found: usize },
    #[error("distance cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewClass {
    SameView,
    CrossView,
}

/// An unordered tracklet pair, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub a: TrackletId,
    pub b: TrackletId,
    pub view: ViewClass,
}

impl PairKey {
    /// # Panics
    /// If `x == y`.
    pub fn new(x: TrackletId, y: TrackletId, view: ViewClass) -> Self {
        assert_ne!(x, y, "a pair needs two distinct tracklets");
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        Self { a, b, view }
    }

    /// Builds the key for two tracklets of `manifest`, deriving the view
    /// class from their cameras.
    pub fn in_manifest(manifest: &DatasetManifest, x: TrackletId, y: TrackletId) -> Option<Self> {
        if x == y {
            return None;
        }
        let cx = manifest.tracklets()[manifest.tracklet_index(x)?].camera_id;
        let cy = manifest.tracklets()[manifest.tracklet_index(y)?].camera_id;
        let view = if cx == cy {
            ViewClass::SameView
        } else {
            ViewClass::CrossView
        };
        Some(Self::new(x, y, view))
    }

    pub fn ids(&self) -> [TrackletId; 2] {
        [self.a, self.b]
    }
}

impl std::fmt::Display for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

#[inline]
fn euclidean(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean of the `k` smallest values in `dists` (all of them when fewer than
/// `k`). The selected values are summed in ascending order so the result does
/// not depend on the order the distances were produced in.
fn mean_of_smallest(dists: &mut [f64], k: usize) -> f64 {
    let k = k.min(dists.len());
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    }
    let head = &mut dists[..k];
    head.sort_unstable_by(f64::total_cmp);
    head.iter().sum::<f64>() / k as f64
}

/// Mean of the `k` smallest image-pair Euclidean distances between two
/// tracklets.
pub fn set_to_set_distance<P, Q>(p: &[P], q: &[Q], k: usize) -> Result<f64, MetricError>
where
    P: AsRef<[f64]>,
    Q: AsRef<[f64]>,
{
    if p.is_empty() || q.is_empty() {
        return Err(MetricError::EmptySet);
    }
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let dim = p[0].as_ref().len();
    let mut dists = Vec::with_capacity(p.len() * q.len());
    for x in p {
        let x = x.as_ref();
        if x.len() != dim {
            return Err(MetricError::DimensionMismatch(dim, x.len()));
        }
        for y in q {
            let y = y.as_ref();
            if y.len() != dim {
                return Err(MetricError::DimensionMismatch(dim, y.len()));
            }
            dists.push(euclidean(x, y));
        }
    }
    Ok(mean_of_smallest(&mut dists, k))
}

/// Features of each tracklet packed contiguously, so pair loops stay in cache.
pub(crate) struct PackedTracklets {
    dim: usize,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl PackedTracklets {
    pub(crate) fn new(
        manifest: &DatasetManifest,
        features: &[Vec<f64>],
    ) -> Result<Self, MetricError> {
        if features.len() != manifest.image_count() {
            return Err(MetricError::Coverage {
                expected: manifest.image_count(),
                found: features.len(),
            });
        }
        let dim = manifest.dimension();
        let mut offsets = Vec::with_capacity(manifest.tracklet_count() + 1);
        let mut data = Vec::with_capacity(features.len() * dim);
        offsets.push(0);
        for t in manifest.tracklets() {
            for &img in &t.images {
                let f = &features[img];
                if f.len() != dim {
                    return Err(MetricError::DimensionMismatch(dim, f.len()));
                }
                data.extend_from_slice(f);
            }
            offsets.push(data.len());
        }
        Ok(Self { dim, offsets, data })
    }

    fn tracklet(&self, i: usize) -> std::slice::ChunksExact<'_, f64> {
        self.data[self.offsets[i]..self.offsets[i + 1]].chunks_exact(self.dim)
    }

    pub(crate) fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn distance(&self, i: usize, j: usize, k: usize, buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        for x in self.tracklet(i) {
            for y in self.tracklet(j) {
                buf.push(euclidean(x, y));
            }
        }
        mean_of_smallest(buf, k)
    }
}

#[inline]
fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// All pairwise tracklet distances under one embedding version.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCache {
    ids: Vec<TrackletId>,
    stamp: u64,
    values: Vec<f64>,
}

impl DistanceCache {
    pub fn compute(
        manifest: &DatasetManifest,
        features: &[Vec<f64>],
        k: usize,
        stamp: u64,
    ) -> Result<Self, MetricError> {
        if k == 0 {
            return Err(MetricError::ZeroK);
        }
        let packed = PackedTracklets::new(manifest, features)?;
        let n = packed.len();
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut buf = Vec::new();
                let row: Vec<f64> = (i + 1..n).map(|j| packed.distance(i, j, k, &mut buf)).collect();
                row.into_iter()
            })
            .collect();
        Ok(Self {
            ids: manifest.tracklet_ids(),
            stamp,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn ids(&self) -> &[TrackletId] {
        &self.ids
    }

    /// Distance by dense tracklet index; zero on the diagonal.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            Ordering::Equal => 0.0,
            Ordering::Less => self.values[condensed_index(self.ids.len(), i, j)],
            Ordering::Greater => self.values[condensed_index(self.ids.len(), j, i)],
        }
    }

    pub fn get(&self, pair: &PairKey) -> Option<f64> {
        let i = self.ids.binary_search(&pair.a).ok()?;
        let j = self.ids.binary_search(&pair.b).ok()?;
        Some(self.at(i, j))
    }

    /// Upper-triangle values in row-major order.
    pub fn condensed(&self) -> &[f64] {
        &self.values
    }

    /// Median of the squared off-diagonal distances.
    pub fn median_squared(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        let mut sq: Vec<f64> = self.values.iter().map(|d| d * d).collect();
        let mid = sq.len() / 2;
        sq.select_nth_unstable_by(mid, f64::total_cmp);
        let upper = sq[mid];
        if sq.len() % 2 == 1 {
            upper
        } else {
            let lower = sq[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lower + upper) / 2.0
        }
    }

    pub fn write_file(&self, path: &Path, manifest_hash: &[u8; 32]) -> Result<(), MetricError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&CACHE_VERSION.to_le_bytes())?;
        out.write_all(manifest_hash)?;
        out.write_all(&self.stamp.to_le_bytes())?;
        out.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for id in &self.ids {
            out.write_all(&id.to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a cache file if it was written for this manifest and stamp;
    /// `Ok(None)` on a key mismatch.
    pub fn read_file(
        path: &Path,
        manifest_hash: &[u8; 32],
        stamp: u64,
    ) -> Result<Option<Self>, MetricError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(MetricError::Cache("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CACHE_VERSION {
            return Err(MetricError::Cache(format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 32];
        input.read_exact(&mut hash)?;
        let file_stamp = read_u64(&mut input)?;
        if &hash != manifest_hash || file_stamp != stamp {
            return Ok(None);
        }
        let n = read_u64(&mut input)? as usize;
        let ids = (0..n).map(|_| read_u32(&mut input)).collect::<Result<Vec<_>, _>>()?;
        let values = (0..n * n.saturating_sub(1) / 2)
            .map(|_| read_u64(&mut input).map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(Self {
            ids,
            stamp: file_stamp,
            values,
        }))
    }
}

const CACHE_MAGIC: &[u8; 4] = b"RADC";
const CACHE_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// A candidate pair in a pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolEntry {
    pub pair: PairKey,
    /// Dense tracklet indices of `pair.a` and `pair.b`.
    pub a_index: u32,
    pub b_index: u32,
    pub distance: f64,
}

fn pool_order(x: &PoolEntry, y: &PoolEntry) -> Ordering {
    x.distance
        .total_cmp(&y.distance)
        .then(x.pair.a.cmp(&y.pair.a))
        .then(x.pair.b.cmp(&y.pair.b))
}

#[derive(Debug, Clone)]
pub struct DistancePools {
    pub cache: DistanceCache,
    /// Ascending by distance, ties by `(a, b)`.
    pub same_view: Vec<PoolEntry>,
    pub cross_view: Vec<PoolEntry>,
}

impl DistancePools {
    pub fn len(&self) -> usize {
        self.same_view.len() + self.cross_view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn entry(manifest: &DatasetManifest, cameras: &[u32], i: usize, j: usize, d: f64) -> PoolEntry {
    let ts = manifest.tracklets();
    let view = if cameras[i] == cameras[j] {
        ViewClass::SameView
    } else {
        ViewClass::CrossView
    };
    PoolEntry {
        pair: PairKey::new(ts[i].tracklet_id, ts[j].tracklet_id, view),
        a_index: i as u32,
        b_index: j as u32,
        distance: d,
    }
}

/// Computes every pairwise distance and both sorted pools.
pub fn build_distance_pools(
    manifest: &DatasetManifest,
    features: &[Vec<f64>],
    k: usize,
    stamp: u64,
) -> Result<DistancePools, MetricError> {
    let cache = DistanceCache::compute(manifest, features, k, stamp)?;
    let n = cache.len();
    let cameras = manifest.tracklet_cameras();
    let mut same_view = Vec::new();
    let mut cross_view = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let e = entry(manifest, &cameras, i, j, cache.at(i, j));
            match e.pair.view {
                ViewClass::SameView => same_view.push(e),
                ViewClass::CrossView => cross_view.push(e),
            }
        }
    }
    same_view.par_sort_unstable_by(pool_order);
    cross_view.par_sort_unstable_by(pool_order);
    Ok(DistancePools {
        cache,
        same_view,
        cross_view,
    })
}

/// Like [`build_distance_pools`] but keeps only the `limit` smallest pairs of
/// each pool and never materializes the full distance matrix. The retained
/// prefixes are identical to the full pools' first `limit` entries.
pub fn build_top_pools(
    manifest: &DatasetManifest,
    features: &[Vec<f64>],
    k: usize,
    limit: usize,
) -> Result<(Vec<PoolEntry>, Vec<PoolEntry>), MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let packed = PackedTracklets::new(manifest, features)?;
    let n = packed.len();
    let cameras = manifest.tracklet_cameras();
    let truncate = |mut v: Vec<PoolEntry>| {
        if v.len() > limit {
            if limit > 0 {
                v.select_nth_unstable_by(limit - 1, pool_order);
            }
            v.truncate(limit);
        }
        v
    };
    let rows: Vec<(Vec<PoolEntry>, Vec<PoolEntry>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut buf = Vec::new();
            let (same, cross): (Vec<_>, Vec<_>) = (i + 1..n)
                .map(|j| entry(manifest, &cameras, i, j, packed.distance(i, j, k, &mut buf)))
                .partition(|e| e.pair.view == ViewClass::SameView);
            (truncate(same), truncate(cross))
        })
        .collect();
    let (same, cross): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let finish = |parts: Vec<Vec<PoolEntry>>| {
        let mut v = truncate(parts.into_iter().flatten().collect());
        v.sort_unstable_by(pool_order);
        v
    };
    Ok((finish(same), finish(cross)))
}
