//! Cluster selection from training-free statistics, and the quantile
//! baselines used for comparison.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{Clustering, DbscanParams};
use crate::error::{Error, Result};
use crate::searchspace::ArchId;
use crate::tfstats::TfStatRecord;

/// Average ranks (1-based, ascending) with ties sharing the mean of their
/// positions, normalized to `[0, 1]` so the largest value maps to 1.
/// A single value maps to 1.
pub fn normalized_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]].total_cmp(&values[order[start]]) == Ordering::Equal {
            end += 1;
        }
        // Positions start+1..=end share their mean rank.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = (rank - 1.0) / (n - 1) as f64;
        }
        start = end;
    }
    out
}

/// Mean of the four normalized ranks. NTK condition ranks lower-is-better;
/// linear regions and both NASWOT scores rank higher-is-better.
pub fn aggregate_scores(records: &[TfStatRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty statistics table".into()));
    }
    let column = |f: fn(&TfStatRecord) -> f64| normalized_ranks(&records.iter().map(f).collect::<Vec<_>>());
    let ranks = [
        column(|r| -r.ntk_cond),
        column(|r| r.lin_regions as f64),
        column(|r| r.naswot_v1),
        column(|r| r.naswot_v2),
    ];
    Ok((0..records.len())
        .map(|i| ranks.iter().map(|r| r[i]).sum::<f64>() / 4.0)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub id: usize,
    pub size: usize,
    pub mean_aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub clusters: Vec<ClusterScore>,
    pub chosen: usize,
    pub params: DbscanParams,
}

impl SelectionReport {
    pub fn chosen_score(&self) -> &ClusterScore {
        self.clusters.iter().find(|c| c.id == self.chosen).expect("chosen cluster is scored")
    }
}

/// Picks the cluster with the highest mean member aggregate. Ties go to the
/// larger cluster, then the lower id. Noise points are ignored.
pub fn select_cluster(clustering: &Clustering, aggregates: &[f64]) -> Result<SelectionReport> {
    if aggregates.len() != clustering.len() {
        return Err(Error::InvalidInput(format!(
            "{} aggregates for {} clustered points",
            aggregates.len(),
            clustering.len()
        )));
    }
    if clustering.k < 2 {
        return Err(Error::InsufficientClusters(clustering.k));
    }
    let mut sums = vec![0.0; clustering.k];
    let sizes = clustering.sizes();
    for (&l, &a) in clustering.labels.iter().zip(aggregates) {
        if l >= 0 {
            sums[l as usize] += a;
        }
    }
    let clusters: Vec<ClusterScore> = (0..clustering.k)
        .filter(|&c| sizes[c] > 0)
        .map(|c| ClusterScore {
            id: c,
            size: sizes[c],
            mean_aggregate: sums[c] / sizes[c] as f64,
        })
        .collect();
    let best = clusters
        .iter()
        .max_by(|a, b| {
            a.mean_aggregate
                .total_cmp(&b.mean_aggregate)
                .then(a.size.cmp(&b.size))
                .then(b.id.cmp(&a.id))
        })
        .ok_or(Error::InsufficientClusters(0))?;
    Ok(SelectionReport {
        chosen: best.id,
        clusters,
        params: clustering.params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantileStat {
    NaswotV2,
    Mac,
}

impl fmt::Display for QuantileStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantileStat::NaswotV2 => "naswot_v2",
            QuantileStat::Mac => "mac",
        })
    }
}

/// Equal-count buckets over one statistic, lowest values in bucket 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePartition {
    pub statistic: QuantileStat,
    pub buckets: usize,
    /// Architectures in ascending `(value, id)` order.
    pub order: Vec<ArchId>,
    /// Bucket index per entry of `order`.
    pub bucket: Vec<usize>,
    /// Largest value in each bucket.
    pub upper: Vec<f64>,
}

impl QuantilePartition {
    /// Members of bucket `b`, in ascending `(value, id)` order.
    pub fn members(&self, b: usize) -> Vec<ArchId> {
        self.order
            .iter()
            .zip(&self.bucket)
            .filter(|&(_, &x)| x == b)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn bucket_of(&self, id: ArchId) -> Option<usize> {
        self.order.iter().position(|&x| x == id).map(|i| self.bucket[i])
    }
}

/// Sorts by value (ties by id) and cuts the order into `buckets` runs whose
/// sizes differ by at most one.
pub fn quantile_partition(
    statistic: QuantileStat,
    ids: &[ArchId],
    values: &[f64],
    buckets: usize,
) -> Result<QuantilePartition> {
    if ids.len() != values.len() {
        return Err(Error::InvalidInput("ids and values differ in length".into()));
    }
    let n = ids.len();
    if buckets == 0 || n < buckets {
        return Err(Error::InvalidInput(format!("{n} values cannot fill {buckets} buckets")));
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!("NaN value for architecture {}", ids[i])));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(ids[a].cmp(&ids[b])));
    let bucket: Vec<usize> = (0..n).map(|pos| pos * buckets / n).collect();
    let upper = (0..buckets)
        .map(|b| values[idx[((b + 1) * n).div_ceil(buckets) - 1]])
        .collect();
    Ok(QuantilePartition {
        statistic,
        buckets,
        order: idx.iter().map(|&i| ids[i]).collect(),
        bucket,
        upper,
    })
}

/// Members of `bucket`, or of the top bucket when `None`, sorted by id.
pub fn baseline_subset(partition: &QuantilePartition, bucket: Option<usize>) -> Result<Vec<ArchId>> {
    let b = bucket.unwrap_or(partition.buckets - 1);
    if b >= partition.buckets {
        return Err(Error::InvalidInput(format!(
            "bucket {b} out of range 0..{}",
            partition.buckets
        )));
    }
    let mut out = partition.members(b);
    out.sort();
    Ok(out)
}
