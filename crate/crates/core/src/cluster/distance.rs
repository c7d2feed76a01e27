use std::io::{Read, Write};

use rayon::prelude::*;

use crate::compgraph::{CellFeatures, FreqVector, OpCounts, PathVector};
use crate::error::{Error, Result};

fn l1(a: &OpCounts, b: &OpCounts) -> u32 {
    a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y)).sum()
}

/// Topology-agnostic distance: L1 between op-frequency vectors.
pub fn dist_freq(a: &FreqVector, b: &FreqVector) -> u32 {
    l1(a.counts(), b.counts())
}

/// Path-aware distance: L1 between path-incidence vectors.
pub fn dist_path(a: &PathVector, b: &PathVector) -> u32 {
    l1(a.counts(), b.counts())
}

/// Which quantity a [`DistanceMatrix`] holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceKind {
    Freq,
    Path,
    Combined { alpha: f32 },
}

impl DistanceKind {
    /// Weight of the frequency distance; the file header stores only this.
    pub fn alpha(self) -> f32 {
        match self {
            DistanceKind::Freq => 1.0,
            DistanceKind::Path => 0.0,
            DistanceKind::Combined { alpha } => alpha,
        }
    }
}

/// Per-measure maxima of the two distances over a space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norms {
    pub freq: u32,
    pub path: u32,
}

impl Norms {
    /// Largest pairwise distance of each kind. Only distinct feature vectors
    /// matter, so the quadratic scan runs over the (small) set of those.
    pub fn of(features: &[CellFeatures]) -> Norms {
        let mut freqs: Vec<FreqVector> = features.iter().map(|f| f.freq).collect();
        let mut paths: Vec<PathVector> = features.iter().map(|f| f.path).collect();
        freqs.sort_by_key(|v| v.0);
        freqs.dedup();
        paths.sort_by_key(|v| v.0);
        paths.dedup();
        let max_pair = |n: usize, d: &dyn Fn(usize, usize) -> u32| {
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| d(i, j))
                .max()
                .unwrap_or(0)
        };
        Norms {
            freq: max_pair(freqs.len(), &|i, j| dist_freq(&freqs[i], &freqs[j])),
            path: max_pair(paths.len(), &|i, j| dist_path(&paths[i], &paths[j])),
        }
    }
}

/// Normalized convex combination of the two feature distances.
#[derive(Debug, Clone, Copy)]
pub struct CombinedMetric {
    alpha: f64,
    norms: Norms,
}

impl CombinedMetric {
    pub fn new(alpha: f64, norms: Norms) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
        }
        if norms.freq == 0 || norms.path == 0 {
            return Err(Error::DegenerateSpace(format!(
                "zero distance norm (freq max {}, path max {})",
                norms.freq, norms.path
            )));
        }
        Ok(CombinedMetric { alpha, norms })
    }

    pub fn for_space(features: &[CellFeatures], alpha: f64) -> Result<Self> {
        CombinedMetric::new(alpha, Norms::of(features))
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn norms(&self) -> Norms {
        self.norms
    }

    /// `alpha·d1/norm1 + (1−alpha)·d2/norm2`, rounded once to `f32`.
    pub fn distance(&self, a: &CellFeatures, b: &CellFeatures) -> f32 {
        let d1 = dist_freq(&a.freq, &b.freq) as f64 / self.norms.freq as f64;
        let d2 = dist_path(&a.path, &b.path) as f64 / self.norms.path as f64;
        (self.alpha * d1 + (1.0 - self.alpha) * d2) as f32
    }
}

/// Anything DBSCAN can query pairwise distances from.
pub trait Distances: Sync {
    fn len(&self) -> usize;

    fn distance(&self, i: usize, j: usize) -> f32;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Position of pair `(i, j)`, `i < j`, in a condensed upper triangle.
#[inline]
pub fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Condensed upper-triangular `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f32>,
    kind: DistanceKind,
}

pub const MATRIX_MAGIC: &[u8; 4] = b"CBRD";
pub const MATRIX_VERSION: u16 = 1;

impl DistanceMatrix {
    pub fn from_condensed(n: usize, values: Vec<f32>, kind: DistanceKind) -> Result<Self> {
        if values.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::InvalidInput(format!(
                "{} condensed entries do not fit n = {n}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidInput(format!("negative or NaN distance {v}")));
        }
        Ok(DistanceMatrix { n, values, kind })
    }

    /// Fills every pair with `dist`, rows in parallel. Each entry depends
    /// only on its pair, so the result does not depend on the thread count.
    pub fn build<F>(n: usize, kind: DistanceKind, dist: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> f32 + Sync,
    {
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 architectures, got {n}"
            )));
        }
        let mut values = vec![0f32; n * (n - 1) / 2];
        let mut rows = Vec::with_capacity(n - 1);
        let mut rest = values.as_mut_slice();
        for i in 0..n - 1 {
            let (row, tail) = rest.split_at_mut(n - 1 - i);
            rows.push((i, row));
            rest = tail;
        }
        rows.into_par_iter().for_each(|(i, row)| {
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = dist(i, i + 1 + k);
            }
        });
        Ok(DistanceMatrix { n, values, kind })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MATRIX_MAGIC)?;
        out.write_all(&MATRIX_VERSION.to_le_bytes())?;
        let n = u32::try_from(self.n)
            .map_err(|_| Error::InvalidInput("matrix too large for u32 header".into()))?;
        out.write_all(&n.to_le_bytes())?;
        out.write_all(&self.kind.alpha().to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::parse(0, "bad distance matrix magic"));
        }
        let mut b2 = [0u8; 2];
        input.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != MATRIX_VERSION {
            return Err(Error::parse(0, format!("unsupported matrix version {version}")));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        input.read_exact(&mut b4)?;
        let alpha = f32::from_le_bytes(b4);
        let count = n * n.saturating_sub(1) / 2;
        let mut raw = vec![0u8; count * 4];
        input.read_exact(&mut raw)?;
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::parse(0, "trailing bytes after distance matrix"));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        DistanceMatrix::from_condensed(n, values, DistanceKind::Combined { alpha })
    }
}

impl Distances for DistanceMatrix {
    fn len(&self) -> usize {
        self.n
    }

    #[inline]
    fn distance(&self, i: usize, j: usize) -> f32 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.values[condensed_index(self.n, i, j)],
            std::cmp::Ordering::Greater => self.values[condensed_index(self.n, j, i)],
        }
    }
}

/// Recomputes combined distances from feature vectors on every query,
/// for spaces whose condensed matrix does not fit in memory.
#[derive(Debug, Clone)]
pub struct OnTheFly<'a> {
    features: &'a [CellFeatures],
    metric: CombinedMetric,
}

impl<'a> OnTheFly<'a> {
    pub fn new(features: &'a [CellFeatures], metric: CombinedMetric) -> Self {
        OnTheFly { features, metric }
    }
}

impl Distances for OnTheFly<'_> {
    fn len(&self) -> usize {
        self.features.len()
    }

    #[inline]
    fn distance(&self, i: usize, j: usize) -> f32 {
        if i == j {
            0.0
        } else {
            self.metric.distance(&self.features[i], &self.features[j])
        }
    }
}

/// Condensed matrix of combined distances over `features`.
pub fn compute_distance_matrix(features: &[CellFeatures], alpha: f64) -> Result<DistanceMatrix> {
    if features.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 architectures, got {}",
            features.len()
        )));
    }
    let metric = CombinedMetric::for_space(features, alpha)?;
    DistanceMatrix::build(
        features.len(),
        DistanceKind::Combined {
            alpha: alpha as f32,
        },
        |i, j| metric.distance(&features[i], &features[j]),
    )
}
