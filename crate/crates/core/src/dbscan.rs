//! DBSCAN over an arbitrary distance function.
//!
//! A point's neighborhood includes the point itself, so `min_pts = 2` makes
//! any point with one neighbor within `eps` a core point.

use std::collections::VecDeque;

/// Cluster label per point; `None` marks noise. Clusters are numbered from 0
/// in the order their first core point is reached when scanning points by
/// index.
pub fn dbscan<F>(n: usize, eps: f64, min_pts: usize, dist: F) -> Vec<Option<usize>>
where
    F: Fn(usize, usize) -> f64,
{
    let region = |p: usize| -> Vec<usize> { (0..n).filter(|&q| dist(p, q) <= eps).collect() };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0;
    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let neighbors = region(p);
        if neighbors.len() < min_pts {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[p] = Some(cluster);
        let mut frontier: VecDeque<usize> = neighbors.into_iter().collect();
        while let Some(q) = frontier.pop_front() {
            if labels[q].is_none() {
                // border or core, either way it joins
                labels[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let reach = region(q);
            if reach.len() >= min_pts {
                frontier.extend(reach.into_iter().filter(|&r| labels[r].is_none() || !visited[r]));
            }
        }
    }
    labels
}
