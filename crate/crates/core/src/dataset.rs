//! Embedding datasets: image records grouped into single-camera tracklets.
//!
//! A manifest is a line-delimited JSON file. The first line is a header
//! `{"dimension": D, "camera_count": k}`; every following line is one image:
//!
//! ```text
//! {"image_id": 0, "tracklet_id": 3, "camera_id": 1, "feature": [0.1, ...], "image_path": "a.jpg", "identity": 7}
//! ```
//!
//! `image_path` and `identity` are optional. Ground-truth identities are kept
//! inside the manifest but the rest of the engine only sees them through
//! [`GroundTruth`], which the orchestrator hands to the oracle and the
//! evaluation code alone. [`DatasetManifest::without_identities`] produces the
//! stripped view used everywhere else.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ImageId = u64;
pub type TrackletId = u32;
pub type CameraId = u32;
pub type IdentityId = u32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: feature has {found} values, header declares dimension {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate image_id {image_id}")]
    DuplicateImage { line: usize, image_id: ImageId },
    #[error("line {line}: image {image_id} is on camera {found} but tracklet {tracklet_id} is on camera {expected}")]
    MixedCamera {
        line: usize,
        image_id: ImageId,
        tracklet_id: TrackletId,
        expected: CameraId,
        found: CameraId,
    },
    #[error("tracklet {tracklet_id} has no images")]
    EmptyTracklet { tracklet_id: TrackletId },
    #[error("line {line}: tracklet {tracklet_id} mixes identities {first} and {second}")]
    MixedIdentity {
        line: usize,
        tracklet_id: TrackletId,
        first: IdentityId,
        second: IdentityId,
    },
    #[error("manifest declares {declared} cameras but uses {used}")]
    CameraCount { declared: usize, used: usize },
    #[error("manifest has no images")]
    Empty,
    #[error("invalid synthetic parameters: {0}")]
    InvalidParameters(String),
}

/// One image and its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub tracklet_id: TrackletId,
    pub camera_id: CameraId,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tracklet {
    pub tracklet_id: TrackletId,
    pub camera_id: CameraId,
    /// Indices into [`DatasetManifest::images`], in file order.
    pub images: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    dimension: usize,
    camera_count: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Scale every feature vector to unit L2 norm on ingest.
    pub l2_normalize: bool,
}

/// A validated, immutable dataset. Tracklets are sorted by id; a tracklet's
/// position in that order is its dense index, used throughout the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    dimension: usize,
    camera_count: usize,
    images: Vec<ImageRecord>,
    tracklets: Vec<Tracklet>,
    index: HashMap<TrackletId, usize>,
}

impl DatasetManifest {
    /// Validates `images` and derives the tracklet partition.
    pub fn new(
        dimension: usize,
        camera_count: usize,
        images: Vec<ImageRecord>,
    ) -> Result<Self, DatasetError> {
        // Line numbers in errors count the header as line 1.
        if images.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen = HashSet::with_capacity(images.len());
        let mut groups: BTreeMap<TrackletId, (CameraId, Vec<usize>)> = BTreeMap::new();
        let mut identities: HashMap<TrackletId, IdentityId> = HashMap::new();
        let mut cameras = BTreeSet::new();
        for (pos, img) in images.iter().enumerate() {
            let line = pos + 2;
            if img.feature.len() != dimension {
                return Err(DatasetError::DimensionMismatch {
                    line,
                    expected: dimension,
                    found: img.feature.len(),
                });
            }
            if img.feature.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::Malformed {
                    line,
                    message: "feature contains a non-finite value".into(),
                });
            }
            if !seen.insert(img.image_id) {
                return Err(DatasetError::DuplicateImage {
                    line,
                    image_id: img.image_id,
                });
            }
            let entry = groups
                .entry(img.tracklet_id)
                .or_insert_with(|| (img.camera_id, Vec::new()));
            if entry.0 != img.camera_id {
                return Err(DatasetError::MixedCamera {
                    line,
                    image_id: img.image_id,
                    tracklet_id: img.tracklet_id,
                    expected: entry.0,
                    found: img.camera_id,
                });
            }
            entry.1.push(pos);
            if let Some(id) = img.identity {
                match identities.get(&img.tracklet_id) {
                    Some(&first) if first != id => {
                        return Err(DatasetError::MixedIdentity {
                            line,
                            tracklet_id: img.tracklet_id,
                            first,
                            second: id,
                        })
                    }
                    _ => {
                        identities.insert(img.tracklet_id, id);
                    }
                }
            }
            cameras.insert(img.camera_id);
        }
        if camera_count == 0 || cameras.len() > camera_count {
            return Err(DatasetError::CameraCount {
                declared: camera_count,
                used: cameras.len(),
            });
        }
        let tracklets: Vec<Tracklet> = groups
            .into_iter()
            .map(|(tracklet_id, (camera_id, images))| Tracklet {
                tracklet_id,
                camera_id,
                images,
            })
            .collect();
        if let Some(t) = tracklets.iter().find(|t| t.images.is_empty()) {
            return Err(DatasetError::EmptyTracklet {
                tracklet_id: t.tracklet_id,
            });
        }
        let index = tracklets
            .iter()
            .enumerate()
            .map(|(i, t)| (t.tracklet_id, i))
            .collect();
        Ok(Self {
            dimension,
            camera_count,
            images,
            tracklets,
            index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn camera_count(&self) -> usize {
        self.camera_count
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn tracklet_count(&self) -> usize {
        self.tracklets.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn tracklet_index(&self, id: TrackletId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn tracklet_ids(&self) -> Vec<TrackletId> {
        self.tracklets.iter().map(|t| t.tracklet_id).collect()
    }

    /// Camera of each tracklet, by dense index.
    pub fn tracklet_cameras(&self) -> Vec<CameraId> {
        self.tracklets.iter().map(|t| t.camera_id).collect()
    }

    /// The manifest's own features, in image order.
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|i| i.feature.clone()).collect()
    }

    pub fn has_identities(&self) -> bool {
        self.images.iter().any(|i| i.identity.is_some())
    }

    /// Copy of the manifest with every identity removed.
    pub fn without_identities(&self) -> Self {
        let mut stripped = self.clone();
        for img in &mut stripped.images {
            img.identity = None;
        }
        stripped
    }

    /// Per-tracklet identities, if every tracklet carries one.
    pub fn ground_truth(&self) -> Option<GroundTruth> {
        let identities = self
            .tracklets
            .iter()
            .map(|t| self.images[t.images[0]].identity)
            .collect::<Option<Vec<_>>>()?;
        Some(GroundTruth {
            ids: self.tracklet_ids(),
            identities,
        })
    }

    /// Replaces feature vectors, keeping everything else. `features` is in
    /// image order.
    pub fn with_features(&self, features: &[Vec<f64>]) -> Self {
        let mut out = self.clone();
        for (img, f) in out.images.iter_mut().zip(features) {
            img.feature.clone_from(f);
        }
        out
    }

    /// Stable content hash, used to key distance caches.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.dimension as u64).to_le_bytes());
        hasher.update((self.camera_count as u64).to_le_bytes());
        for img in &self.images {
            hasher.update(img.image_id.to_le_bytes());
            hasher.update(img.tracklet_id.to_le_bytes());
            hasher.update(img.camera_id.to_le_bytes());
            for v in &img.feature {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Tracklet identities, readable only by the oracle and evaluation code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    ids: Vec<TrackletId>,
    identities: Vec<IdentityId>,
}

impl GroundTruth {
    pub fn new(ids: Vec<TrackletId>, identities: Vec<IdentityId>) -> Self {
        assert_eq!(ids.len(), identities.len());
        Self { ids, identities }
    }

    /// Identity by dense tracklet index.
    pub fn identity_at(&self, index: usize) -> IdentityId {
        self.identities[index]
    }

    pub fn identity_of(&self, id: TrackletId) -> Option<IdentityId> {
        let pos = self.ids.binary_search(&id).ok()?;
        Some(self.identities[pos])
    }

    pub fn identities(&self) -> &[IdentityId] {
        &self.identities
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn identity_count(&self) -> usize {
        self.identities.iter().collect::<BTreeSet<_>>().len()
    }

    /// Number of tracklet pairs sharing an identity.
    pub fn true_pair_count(&self) -> usize {
        let mut sizes: HashMap<IdentityId, usize> = HashMap::new();
        for &id in &self.identities {
            *sizes.entry(id).or_default() += 1;
        }
        sizes.values().map(|&n| n * (n - 1) / 2).sum()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(
    path: &Path,
    options: LoadOptions,
) -> Result<DatasetManifest, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_manifest(BufReader::new(file), options).map_err(|e| match e {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_manifest(
    reader: impl BufRead,
    options: LoadOptions,
) -> Result<DatasetManifest, DatasetError> {
    let mut header: Option<Header> = None;
    let mut images = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: line_no,
                message: format!("bad header: {e}"),
            })?);
            continue;
        }
        let mut record: ImageRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if options.l2_normalize {
            l2_normalize(&mut record.feature);
        }
        images.push(record);
    }
    let header = header.ok_or(DatasetError::Empty)?;
    DatasetManifest::new(header.dimension, header.camera_count, images)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    write_manifest_to(manifest, &mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn write_manifest_to(manifest: &DatasetManifest, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        dimension: manifest.dimension,
        camera_count: manifest.camera_count,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for img in &manifest.images {
        writeln!(out, "{}", serde_json::to_string(img)?)?;
    }
    Ok(())
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// A count drawn per tracklet (or per identity-camera cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountDist {
    Fixed(usize),
    /// Uniform over the inclusive range.
    Uniform { min: usize, max: usize },
}

impl CountDist {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            CountDist::Fixed(n) => n,
            CountDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    fn min(&self) -> usize {
        match *self {
            CountDist::Fixed(n) => n,
            CountDist::Uniform { min, .. } => min,
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            CountDist::Fixed(n) => n > 0,
            CountDist::Uniform { min, max } => min > 0 && min <= max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub identities: usize,
    pub cameras: usize,
    pub tracklets_per_identity_per_camera: CountDist,
    pub images_per_tracklet: CountDist,
    pub dimension: usize,
    pub within_id_std: f64,
    pub cross_camera_shift_std: f64,
    pub seed: u64,
}

impl SyntheticParams {
    /// The desk-scale benchmark layout: 200 identities over 2 cameras, two
    /// 5-image tracklets per identity and camera, 32-dimensional features.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            identities: 200,
            cameras: 2,
            tracklets_per_identity_per_camera: CountDist::Fixed(2),
            images_per_tracklet: CountDist::Fixed(5),
            dimension: 32,
            within_id_std: 0.35,
            cross_camera_shift_std: 0.7,
            seed,
        }
    }
}

/// Multi-camera identities: image = identity base + (identity, camera)
/// offset + per-image noise, all Gaussian.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<DatasetManifest, DatasetError> {
    let p = params;
    if p.identities == 0 || p.cameras == 0 || p.dimension == 0 {
        return Err(DatasetError::InvalidParameters(
            "identities, cameras and dimension must be positive".into(),
        ));
    }
    if !p.tracklets_per_identity_per_camera.is_valid() || !p.images_per_tracklet.is_valid() {
        return Err(DatasetError::InvalidParameters(
            "count distributions must be positive".into(),
        ));
    }
    if !(p.within_id_std >= 0.0 && p.cross_camera_shift_std >= 0.0) {
        return Err(DatasetError::InvalidParameters(
            "standard deviations must be non-negative".into(),
        ));
    }
    debug_assert!(p.images_per_tracklet.min() > 0);

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let gaussian = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..p.dimension)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut images = Vec::new();
    let mut next_tracklet: TrackletId = 0;
    for identity in 0..p.identities {
        let base = gaussian(1.0, &mut rng);
        for camera in 0..p.cameras {
            let offset = gaussian(p.cross_camera_shift_std, &mut rng);
            let tracklets = p.tracklets_per_identity_per_camera.sample(&mut rng);
            for _ in 0..tracklets {
                let count = p.images_per_tracklet.sample(&mut rng);
                for _ in 0..count {
                    let noise = gaussian(p.within_id_std, &mut rng);
                    let feature = base
                        .iter()
                        .zip(&offset)
                        .zip(&noise)
                        .map(|((b, o), n)| b + o + n)
                        .collect();
                    images.push(ImageRecord {
                        image_id: images.len() as ImageId,
                        tracklet_id: next_tracklet,
                        camera_id: camera as CameraId,
                        feature,
                        image_path: None,
                        identity: Some(identity as IdentityId),
                    });
                }
                next_tracklet += 1;
            }
        }
    }
    DatasetManifest::new(p.dimension, p.cameras, images)
}
