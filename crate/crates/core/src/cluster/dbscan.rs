//! Density-based clustering over a precomputed (or lazily computed)
//! distance source.
//!
//! Points are visited in ascending key order. A point is a core point when
//! at least `min_pts` points, itself included, lie within `eps`. Each
//! cluster is expanded completely before the next one starts, so a border
//! point reachable from several clusters ends up in the one whose first core
//! point has the smallest key. Cluster ids are assigned in creation order.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::distance::Distances;

pub const NOISE: i32 = -1;
const UNCLASSIFIED: i32 = -2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps: 0.08,
            min_pts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id per point, or [`NOISE`].
    pub labels: Vec<i32>,
    /// Number of non-noise clusters.
    pub k: usize,
    pub params: DbscanParams,
}

impl Clustering {
    pub fn from_labels(labels: Vec<i32>, params: DbscanParams) -> Self {
        let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        Clustering { labels, k, params }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.noise_count() as f64 / self.labels.len() as f64
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    /// Point indices in cluster `id`.
    pub fn members(&self, id: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == id as i32)
            .map(|(i, _)| i)
            .collect()
    }
}

fn region<D: Distances + ?Sized>(dm: &D, p: usize, eps: f64, out: &mut Vec<usize>) {
    out.clear();
    out.extend((0..dm.len()).filter(|&q| dm.distance(p, q) as f64 <= eps));
}

/// DBSCAN visiting points in index order.
pub fn dbscan<D: Distances + ?Sized>(dm: &D, params: DbscanParams) -> Clustering {
    let order: Vec<usize> = (0..dm.len()).collect();
    dbscan_ordered(dm, &order, params)
}

/// DBSCAN visiting points in the order given by `order` (a permutation of
/// `0..n`). Only the order in which clusters are started matters.
pub fn dbscan_ordered<D: Distances + ?Sized>(
    dm: &D,
    order: &[usize],
    params: DbscanParams,
) -> Clustering {
    let n = dm.len();
    assert_eq!(order.len(), n, "visit order must cover every point");
    let mut labels = vec![UNCLASSIFIED; n];
    let mut cluster = 0i32;
    let mut neighbors = Vec::new();
    let mut queue = VecDeque::new();

    let claim = |labels: &mut [i32], neighbors: &[usize], queue: &mut VecDeque<usize>, c: i32| {
        for &q in neighbors {
            match labels[q] {
                UNCLASSIFIED => {
                    labels[q] = c;
                    queue.push_back(q);
                }
                NOISE => labels[q] = c,
                _ => {}
            }
        }
    };

    for &p in order {
        if labels[p] != UNCLASSIFIED {
            continue;
        }
        region(dm, p, params.eps, &mut neighbors);
        if neighbors.len() < params.min_pts {
            labels[p] = NOISE;
            continue;
        }
        labels[p] = cluster;
        claim(&mut labels, &neighbors, &mut queue, cluster);
        while let Some(q) = queue.pop_front() {
            region(dm, q, params.eps, &mut neighbors);
            if neighbors.len() >= params.min_pts {
                claim(&mut labels, &neighbors, &mut queue, cluster);
            }
        }
        cluster += 1;
    }
    Clustering {
        labels,
        k: cluster as usize,
        params,
    }
}

/// One grid point of a parameter sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub params: DbscanParams,
    pub k: usize,
    pub noise_fraction: f64,
}

/// Runs DBSCAN on every `(eps, min_pts)` combination. The recommended entry
/// maximizes `k` among runs with `k >= 2` and noise fraction at most
/// `max_noise`, preferring less noise and then earlier grid position.
pub fn sweep<D: Distances + ?Sized>(
    dm: &D,
    eps_grid: &[f64],
    min_pts_grid: &[usize],
    max_noise: f64,
) -> (Vec<SweepEntry>, Option<SweepEntry>) {
    let mut entries = Vec::with_capacity(eps_grid.len() * min_pts_grid.len());
    for &eps in eps_grid {
        for &min_pts in min_pts_grid {
            let params = DbscanParams { eps, min_pts };
            let c = dbscan(dm, params);
            entries.push(SweepEntry {
                params,
                k: c.k,
                noise_fraction: c.noise_fraction(),
            });
        }
    }
    let best = entries
        .iter()
        .filter(|e| e.k >= 2 && e.noise_fraction <= max_noise)
        .fold(None::<SweepEntry>, |best, e| match best {
            Some(b) if (b.k, -b.noise_fraction) >= (e.k, -e.noise_fraction) => Some(b),
            _ => Some(*e),
        });
    (entries, best)
}
