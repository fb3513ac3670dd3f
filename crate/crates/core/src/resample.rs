//! Adaptive resampling: label propagation over the fully connected tracklet
//! graph, then a reciprocal nearest-cluster screen of the candidate batch.
//!
//! Propagation repeats `Z <- T Z`, row-normalizes, and resets the rows of
//! tracklets that sit in multi-member clusters to their one-hot labels.
//! `T` is normalized over its first index, `T_ij = w_ij / sum_k w_kj`, with
//! `w_ij = exp(-d_ij^2 / sigma)`.

use ndarray::{Array2, ArrayView1, Axis};
use thiserror::Error;

use crate::labels::{ClusterId, LabelState};
use crate::metric::DistanceCache;
use crate::sampler::CandidateBatch;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("transition matrix is {matrix}x{matrix} but the label state has {tracklets} tracklets")]
    SizeMismatch { matrix: usize, tracklets: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(pub Array2<f64>);

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.0.nrows()
    }
}

pub fn build_transition(distances: &DistanceCache, sigma: f64) -> Result<TransitionMatrix, ResampleError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ResampleError::BadSigma(sigma));
    }
    let n = distances.len();
    let mut w = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = distances.at(i, j);
        (-d * d / sigma).exp()
    });
    for mut col in w.axis_iter_mut(Axis(1)) {
        let total = col.sum();
        col.mapv_inplace(|x| x / total);
    }
    Ok(TransitionMatrix(w))
}

/// Per-tracklet distributions over the current clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    /// `C x N_c`; clamped rows are exact one-hot vectors.
    pub values: Array2<f64>,
    /// The last propagated distribution before clamping. Equal to `values`
    /// on free rows; on clamped rows it carries the neighborhood information
    /// that clamping discards. Used for ranking.
    pub affinity: Array2<f64>,
    /// Cluster id of each column, ascending.
    pub columns: Vec<ClusterId>,
    /// Column of each tracklet's own cluster.
    pub own_column: Vec<usize>,
    pub clamped: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
}

impl SoftLabelMatrix {
    /// Builds a matrix directly from values, for screening with externally
    /// computed distributions. `own_column[i]` names tracklet `i`'s cluster.
    pub fn from_values(values: Array2<f64>, own_column: Vec<usize>) -> Self {
        let columns = (1..=values.ncols() as ClusterId).collect();
        let clamped = vec![false; values.nrows()];
        Self {
            affinity: values.clone(),
            values,
            columns,
            own_column,
            clamped,
            iterations: 0,
            converged: true,
        }
    }
}

fn one_hot(state: &LabelState) -> (Array2<f64>, Vec<ClusterId>, Vec<usize>, Vec<bool>) {
    let columns: Vec<ClusterId> = state.clusters().keys().copied().collect();
    let n = state.tracklet_count();
    let mut own = vec![0; n];
    let mut clamped = vec![false; n];
    let mut z = Array2::zeros((n, columns.len()));
    for (col, members) in state.clusters().values().enumerate() {
        for &t in members {
            own[t] = col;
            clamped[t] = members.len() >= 2;
            z[[t, col]] = 1.0;
        }
    }
    (z, columns, own, clamped)
}

pub fn propagate(
    transition: &TransitionMatrix,
    state: &LabelState,
    max_iters: usize,
    tol: f64,
) -> Result<SoftLabelMatrix, ResampleError> {
    propagate_observed(transition, state, max_iters, tol, |_, _| {})
}

/// [`propagate`], calling `observe(iteration, z)` after every step.
pub fn propagate_observed<F>(
    transition: &TransitionMatrix,
    state: &LabelState,
    max_iters: usize,
    tol: f64,
    mut observe: F,
) -> Result<SoftLabelMatrix, ResampleError>
where
    F: FnMut(usize, &Array2<f64>),
{
    let t = &transition.0;
    if t.nrows() != state.tracklet_count() {
        return Err(ResampleError::SizeMismatch {
            matrix: t.nrows(),
            tracklets: state.tracklet_count(),
        });
    }
    let (mut z, columns, own_column, clamped) = one_hot(state);
    let mut affinity = z.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut next = t.dot(&z);
        for mut row in next.axis_iter_mut(Axis(0)) {
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        affinity.assign(&next);
        for (i, mut row) in next.axis_iter_mut(Axis(0)).enumerate() {
            if clamped[i] {
                row.fill(0.0);
                row[own_column[i]] = 1.0;
            }
        }
        let change = next
            .axis_iter(Axis(0))
            .zip(z.axis_iter(Axis(0)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        z = next;
        observe(iterations, &z);
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(SoftLabelMatrix {
        values: z,
        affinity,
        columns,
        own_column,
        clamped,
        iterations,
        converged,
    })
}

/// Column indices of the `k` largest entries, ties to the lower column.
fn top_k(row: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..row.len()).collect();
    let by_rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < cols.len() {
        cols.select_nth_unstable_by(k, by_rank);
        cols.truncate(k);
    }
    cols.sort_unstable_by(by_rank);
    cols
}

/// The `k` nearest clusters of every tracklet, ranked by propagated mass.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    neighbors: Vec<Vec<usize>>,
    own_column: Vec<usize>,
}

impl NeighborTable {
    pub fn new(soft: &SoftLabelMatrix, k: usize) -> Self {
        let neighbors = soft
            .affinity
            .axis_iter(Axis(0))
            .map(|row| top_k(row, k))
            .collect();
        Self {
            neighbors,
            own_column: soft.own_column.clone(),
        }
    }

    /// Column indices of tracklet `i`'s nearest clusters, best first.
    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Whether each tracklet's cluster is among the other's nearest.
    pub fn reciprocal(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].contains(&self.own_column[j]) && self.neighbors[j].contains(&self.own_column[i])
    }

    pub fn filter(&self, batch: &CandidateBatch) -> CandidateBatch {
        let pairs = batch
            .pairs
            .iter()
            .filter(|e| self.reciprocal(e.a_index as usize, e.b_index as usize))
            .copied()
            .collect();
        CandidateBatch::new(batch.iteration, pairs)
    }
}

/// Keeps the pairs whose tracklets are among each other's `k` nearest
/// clusters. Order is preserved.
pub fn reciprocal_filter(batch: &CandidateBatch, soft: &SoftLabelMatrix, k: usize) -> CandidateBatch {
    NeighborTable::new(soft, k).filter(batch)
}
