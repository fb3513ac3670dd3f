//! Embedding refresh between iterations.
//!
//! The built-in refresher pulls every image feature toward the centroid of
//! its pseudo-label cluster. An external trainer can take its place by
//! reading the current labels and writing a new snapshot file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, ImageId, TrackletId};
use crate::labels::{ClusterId, LabelState};

#[derive(Debug, Error)]
pub enum HookError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("snapshot has no vector for image {0}")]
    MissingImage(ImageId),
    #[error("snapshot vector for image {image} has dimension {found}, expected {expected}")]
    Dimension { image: ImageId, expected: usize, found: usize },
    #[error("snapshot stamp {found} does not advance past {previous}")]
    Stamp { previous: u64, found: u64 },
    #[error("refresh strength must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("external trainer failed: {0}")]
    Trainer(String),
}

/// One embedding version: a vector per image, in manifest image order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSnapshot {
    pub stamp: u64,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSnapshot {
    /// The manifest's own features at stamp 0.
    pub fn initial(manifest: &DatasetManifest) -> Self {
        Self {
            stamp: 0,
            vectors: manifest.features(),
        }
    }
}

pub trait ModelHook: Send {
    fn refresh(
        &mut self,
        manifest: &DatasetManifest,
        snapshot: &EmbeddingSnapshot,
        state: &LabelState,
    ) -> Result<EmbeddingSnapshot, HookError>;
}

/// `v' = (1 - alpha) v + alpha * centroid(cluster(v))`, with the centroid
/// taken over all images of the cluster's tracklets.
pub fn centroid_refresh(
    manifest: &DatasetManifest,
    snapshot: &EmbeddingSnapshot,
    state: &LabelState,
    alpha: f64,
) -> Result<EmbeddingSnapshot, HookError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HookError::BadAlpha(alpha));
    }
    let dim = manifest.dimension();
    let tracklets = manifest.tracklets();
    let mut vectors = snapshot.vectors.clone();
    for members in state.clusters().values() {
        let mut centroid = vec![0.0; dim];
        let mut count = 0usize;
        for &t in members {
            for &img in &tracklets[t].images {
                centroid.iter_mut().zip(&snapshot.vectors[img]).for_each(|(c, x)| *c += x);
                count += 1;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= count as f64);
        for &t in members {
            for &img in &tracklets[t].images {
                for (v, c) in vectors[img].iter_mut().zip(&centroid) {
                    *v = (1.0 - alpha) * *v + alpha * c;
                }
            }
        }
    }
    Ok(EmbeddingSnapshot {
        stamp: snapshot.stamp + 1,
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidPull {
    pub alpha: f64,
}

impl ModelHook for CentroidPull {
    fn refresh(
        &mut self,
        manifest: &DatasetManifest,
        snapshot: &EmbeddingSnapshot,
        state: &LabelState,
    ) -> Result<EmbeddingSnapshot, HookError> {
        centroid_refresh(manifest, snapshot, state, self.alpha)
    }
}

/// Keeps the embedding fixed; only the stamp advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenModel;

impl ModelHook for FrozenModel {
    fn refresh(
        &mut self,
        _manifest: &DatasetManifest,
        snapshot: &EmbeddingSnapshot,
        _state: &LabelState,
    ) -> Result<EmbeddingSnapshot, HookError> {
        Ok(EmbeddingSnapshot {
            stamp: snapshot.stamp + 1,
            vectors: snapshot.vectors.clone(),
        })
    }
}

/// Runs `program args.. <manifest> <labels> <snapshot-in> <snapshot-out>`
/// in `workdir` and loads the snapshot it writes. The manifest carries no
/// identities; labels are JSON lines `{"tracklet_id", "cluster_id"}`.
#[derive(Debug, Clone)]
pub struct ExternalTrainer {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub workdir: PathBuf,
}

#[derive(Serialize)]
struct LabelLine {
    tracklet_id: TrackletId,
    cluster_id: ClusterId,
}

impl ModelHook for ExternalTrainer {
    fn refresh(
        &mut self,
        manifest: &DatasetManifest,
        snapshot: &EmbeddingSnapshot,
        state: &LabelState,
    ) -> Result<EmbeddingSnapshot, HookError> {
        std::fs::create_dir_all(&self.workdir)?;
        let manifest_path = self.workdir.join("train_manifest.jsonl");
        let labels_path = self.workdir.join("train_labels.jsonl");
        let in_path = self.workdir.join("snapshot_in.jsonl");
        let out_path = self.workdir.join("snapshot_out.jsonl");
        crate::dataset::write_manifest(&manifest.without_identities(), &manifest_path)
            .map_err(|e| HookError::Trainer(e.to_string()))?;
        let mut labels = BufWriter::new(File::create(&labels_path)?);
        for (i, &id) in state.ids().iter().enumerate() {
            let line = LabelLine {
                tracklet_id: id,
                cluster_id: state.cluster_at(i),
            };
            serde_json::to_writer(&mut labels, &line).map_err(std::io::Error::from)?;
            labels.write_all(b"\n")?;
        }
        labels.flush()?;
        write_snapshot(manifest, snapshot, &in_path)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&manifest_path)
            .arg(&labels_path)
            .arg(&in_path)
            .arg(&out_path)
            .current_dir(&self.workdir)
            .status()
            .map_err(|e| HookError::Trainer(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(HookError::Trainer(format!("exited with {status}")));
        }
        let next = read_snapshot(manifest, &out_path)?;
        if next.stamp <= snapshot.stamp {
            return Err(HookError::Stamp {
                previous: snapshot.stamp,
                found: next.stamp,
            });
        }
        Ok(next)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    stamp: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    image_id: ImageId,
    #[serde(skip_deserializing, default)]
    tracklet_id: TrackletId,
    #[serde(skip_deserializing, default)]
    camera_id: u32,
    feature: Vec<f64>,
}

pub fn write_snapshot(
    manifest: &DatasetManifest,
    snapshot: &EmbeddingSnapshot,
    path: &Path,
) -> Result<(), HookError> {
    // write then rename, so a crash never leaves a torn snapshot behind
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp)?);
    serde_json::to_writer(&mut out, &SnapshotHeader { stamp: snapshot.stamp }).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for (img, v) in manifest.images().iter().zip(&snapshot.vectors) {
        let line = SnapshotLine {
            image_id: img.image_id,
            tracklet_id: img.tracklet_id,
            camera_id: img.camera_id,
            feature: v.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    drop(out);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a snapshot and orders it by the manifest. Every manifest image must
/// be present with the manifest's dimension; extra images are ignored.
pub fn read_snapshot(manifest: &DatasetManifest, path: &Path) -> Result<EmbeddingSnapshot, HookError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(HookError::Malformed {
        line: 1,
        message: "empty file".into(),
    })??;
    let header: SnapshotHeader = serde_json::from_str(&header).map_err(|e| HookError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    let mut by_id: HashMap<ImageId, Vec<f64>> = HashMap::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SnapshotLine = serde_json::from_str(&line).map_err(|e| HookError::Malformed {
            line: n + 2,
            message: e.to_string(),
        })?;
        by_id.insert(rec.image_id, rec.feature);
    }
    let dim = manifest.dimension();
    let vectors = manifest
        .images()
        .iter()
        .map(|img| {
            let v = by_id.remove(&img.image_id).ok_or(HookError::MissingImage(img.image_id))?;
            if v.len() != dim {
                return Err(HookError::Dimension {
                    image: img.image_id,
                    expected: dim,
                    found: v.len(),
                });
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddingSnapshot {
        stamp: header.stamp,
        vectors,
    })
}
