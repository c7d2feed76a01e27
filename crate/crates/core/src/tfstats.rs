//! The four training-free statistics: NTK condition number, linear-region
//! count, and both NASWOT scores. Computed on a [`ToyNet`] or ingested
//! from a CSV table.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netengine::{
    distinct_codes, ActivationCode, Tensor, ToyNet, ToyNetConfig, STREAM_EVAL_BATCH,
    STREAM_REGION_BATCH,
};
use crate::searchspace::ArchId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatConfig {
    pub net: ToyNetConfig,
    /// Samples in the shared evaluation batch (NTK and both NASWOT scores).
    pub batch: usize,
    /// Samples used to count linear regions.
    pub regions_samples: usize,
    /// Damping added to correlation eigenvalues in the first NASWOT score.
    pub damping: f64,
    /// Relative eigenvalue floor below which a kernel counts as singular.
    pub eigen_tol: f64,
}

impl Default for StatConfig {
    fn default() -> Self {
        StatConfig {
            net: ToyNetConfig::default(),
            batch: 32,
            regions_samples: 1000,
            damping: 1e-5,
            eigen_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatSource {
    Computed,
    Ingested,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfStatRecord {
    pub arch_id: ArchId,
    /// `+inf` when the kernel was singular.
    pub ntk_cond: f64,
    pub lin_regions: u64,
    /// `-inf` when the score could not be computed.
    pub naswot_v1: f64,
    /// `-inf` when the score could not be computed.
    pub naswot_v2: f64,
    pub source: StatSource,
}

/// Sorted eigenvalues of a symmetric matrix.
fn eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `λ_max / λ_min` of a positive semi-definite kernel.
pub fn condition_number(kernel: DMatrix<f64>, eigen_tol: f64) -> Result<f64> {
    let ev = eigenvalues(kernel);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(hi > 0.0) || lo <= eigen_tol * hi {
        return Err(Error::SingularKernel {
            lambda_min: lo,
            lambda_max: hi,
        });
    }
    Ok(hi / lo)
}

/// Gram matrix `Θ[i, j] = ⟨g_i, g_j⟩` of per-sample gradients.
pub fn gram(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn ntk_matrix(net: &ToyNet, batch: &Tensor) -> Result<DMatrix<f64>> {
    Ok(gram(&net.per_sample_param_grads(batch)?))
}

/// Condition number of the empirical neural tangent kernel on `batch`.
pub fn ntk_condition(net: &ToyNet, batch: &Tensor, eigen_tol: f64) -> Result<f64> {
    if batch.n < 2 {
        return Err(Error::InvalidInput("NTK needs at least 2 samples".into()));
    }
    condition_number(ntk_matrix(net, batch)?, eigen_tol)
}

/// Distinct ReLU codes among the samples of `batch`.
pub fn linear_regions(net: &ToyNet, batch: &Tensor) -> Result<usize> {
    let trace = net.forward(batch)?;
    Ok(distinct_codes(&trace.relu_pattern))
}

/// `K[i, j] = N_A − hamming(c_i, c_j)`.
pub fn hamming_kernel(codes: &[ActivationCode]) -> DMatrix<f64> {
    let n = codes.len();
    let na = codes.first().map_or(0, ActivationCode::len) as f64;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = na - codes[i].hamming(&codes[j]) as f64;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `log|det K|` of the Hamming kernel of `codes`.
pub fn naswot_v2_from_codes(codes: &[ActivationCode], eigen_tol: f64) -> Result<f64> {
    if codes.len() < 2 {
        return Err(Error::InvalidInput("NASWOT needs at least 2 samples".into()));
    }
    let ev = eigenvalues(hamming_kernel(codes));
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(hi > 0.0) || lo <= eigen_tol * hi {
        return Err(Error::SingularKernel {
            lambda_min: lo,
            lambda_max: hi,
        });
    }
    Ok(ev.iter().map(|v| v.ln()).sum())
}

pub fn naswot_v2(net: &ToyNet, batch: &Tensor, eigen_tol: f64) -> Result<f64> {
    let trace = net.forward(batch)?;
    naswot_v2_from_codes(&trace.relu_pattern, eigen_tol)
}

/// Pearson correlation matrix between rows.
pub fn correlation(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let centered = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let c: Vec<f64> = r.iter().map(|v| v - mean).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::DegenerateJacobian(i));
            }
            Ok(c.into_iter().map(|v| v / norm).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(gram(&centered))
}

/// `−Σ_i [ln(σ_i + k) + 1/(σ_i + k)]` over the eigenvalues of the
/// correlation matrix of the per-sample Jacobians.
pub fn naswot_v1_from_jacobians(jacobians: &[Vec<f64>], damping: f64) -> Result<f64> {
    if jacobians.len() < 2 {
        return Err(Error::InvalidInput("NASWOT needs at least 2 samples".into()));
    }
    let ev = eigenvalues(correlation(jacobians)?);
    Ok(-ev
        .iter()
        .map(|&s| (s + damping).ln() + 1.0 / (s + damping))
        .sum::<f64>())
}

pub fn naswot_v1(net: &ToyNet, batch: &Tensor, damping: f64) -> Result<f64> {
    naswot_v1_from_jacobians(&net.input_jacobian(batch)?, damping)
}

/// Source of statistics keyed by architecture.
pub trait StatProvider: Sync {
    fn get(&self, id: ArchId) -> Result<TfStatRecord>;
}

/// Computes statistics on the toy network. Every architecture sees the
/// same Gaussian evaluation and region batches.
#[derive(Debug, Clone)]
pub struct ComputedStats {
    cfg: StatConfig,
    eval_batch: Tensor,
    region_batch: Tensor,
}

impl ComputedStats {
    pub fn new(cfg: StatConfig) -> Result<Self> {
        cfg.net.validate()?;
        if cfg.batch < 2 {
            return Err(Error::InvalidInput("statistics batch must hold at least 2 samples".into()));
        }
        if cfg.regions_samples < 1 {
            return Err(Error::InvalidInput("need at least 1 region sample".into()));
        }
        let shape = cfg.net.sample_shape();
        let eval_batch = Tensor::gaussian(cfg.batch, shape, cfg.net.seed, STREAM_EVAL_BATCH);
        let region_batch = Tensor::gaussian(cfg.regions_samples, shape, cfg.net.seed, STREAM_REGION_BATCH);
        Ok(ComputedStats {
            cfg,
            eval_batch,
            region_batch,
        })
    }

    pub fn config(&self) -> &StatConfig {
        &self.cfg
    }

    pub fn eval_batch(&self) -> &Tensor {
        &self.eval_batch
    }

    /// Failures map to the worst value of each statistic.
    pub fn compute(&self, id: ArchId) -> Result<TfStatRecord> {
        let net = ToyNet::instantiate(&id.cell(), &self.cfg.net)?;
        let finite_or = |r: Result<f64>, worst: f64| match r {
            Ok(v) if !v.is_nan() => Ok(v),
            Ok(_) | Err(Error::SingularKernel { .. }) | Err(Error::DegenerateJacobian(_)) => Ok(worst),
            Err(e) => Err(e),
        };
        let ntk_cond = finite_or(ntk_condition(&net, &self.eval_batch, self.cfg.eigen_tol), f64::INFINITY)?;
        let naswot_v1 = finite_or(naswot_v1(&net, &self.eval_batch, self.cfg.damping), f64::NEG_INFINITY)?;
        let naswot_v2 = finite_or(naswot_v2(&net, &self.eval_batch, self.cfg.eigen_tol), f64::NEG_INFINITY)?;
        let lin_regions = linear_regions(&net, &self.region_batch)? as u64;
        Ok(TfStatRecord {
            arch_id: id,
            ntk_cond,
            lin_regions,
            naswot_v1,
            naswot_v2,
            source: StatSource::Computed,
        })
    }
}

impl StatProvider for ComputedStats {
    fn get(&self, id: ArchId) -> Result<TfStatRecord> {
        self.compute(id)
    }
}

/// One result per architecture, in the order of `space`.
pub fn compute_all(space: &[ArchId], provider: &dyn StatProvider) -> Vec<Result<TfStatRecord>> {
    space.par_iter().map(|&id| provider.get(id)).collect()
}

pub const STATS_HEADER: &str = "arch_id,ntk_cond,lin_regions,naswot_v1,naswot_v2";

/// In-memory statistics table keyed by architecture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatTable {
    records: BTreeMap<ArchId, TfStatRecord>,
}

impl StatTable {
    pub fn from_records(records: impl IntoIterator<Item = TfStatRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            if map.insert(r.arch_id, r).is_some() {
                return Err(Error::DuplicateKey(r.arch_id.to_string()));
            }
        }
        Ok(StatTable { records: map })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ArchId> + '_ {
        self.records.keys().copied()
    }

    pub fn records(&self) -> impl Iterator<Item = &TfStatRecord> {
        self.records.values()
    }

    /// Records for `space` in order, failing on the first missing id.
    pub fn select(&self, space: &[ArchId]) -> Result<Vec<TfStatRecord>> {
        space.iter().map(|&id| self.get(id)).collect()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut rows = reader.records();
        match rows.next() {
            Some(Ok(h)) if h.iter().map(str::trim).eq(STATS_HEADER.split(',')) => {}
            _ => return Err(Error::parse(0, format!("expected header `{STATS_HEADER}`"))),
        }
        let mut records = BTreeMap::new();
        for row in rows {
            let row = row.map_err(|e| Error::parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 5 {
                return Err(Error::parse(line, format!("expected 5 fields, found {}", row.len())));
            }
            let bad = |what: &str, v: &str| Error::parse(line, format!("bad {what} `{v}`"));
            let arch_id: ArchId = row[0].parse().map_err(|_| bad("arch_id", &row[0]))?;
            let real = |i: usize, name: &str| -> Result<f64> {
                let v = row[i].trim().parse::<f64>().map_err(|_| bad(name, &row[i]))?;
                if v.is_nan() {
                    return Err(bad(name, &row[i]));
                }
                Ok(v)
            };
            let ntk_cond = real(1, "ntk_cond")?;
            if ntk_cond < 1.0 {
                return Err(bad("ntk_cond", &row[1]));
            }
            let lin_regions = row[2]
                .trim()
                .parse::<u64>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| bad("lin_regions", &row[2]))?;
            let naswot_v1 = real(3, "naswot_v1")?;
            let naswot_v2 = real(4, "naswot_v2")?;
            if naswot_v1 == f64::INFINITY || naswot_v2 == f64::INFINITY {
                return Err(Error::parse(line, "NASWOT scores cannot be +inf"));
            }
            let record = TfStatRecord {
                arch_id,
                ntk_cond,
                lin_regions,
                naswot_v1,
                naswot_v2,
                source: StatSource::Ingested,
            };
            if records.insert(arch_id, record).is_some() {
                return Err(Error::DuplicateKey(arch_id.to_string()));
            }
        }
        Ok(StatTable { records })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{STATS_HEADER}")?;
        for r in self.records.values() {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.arch_id, r.ntk_cond, r.lin_regions, r.naswot_v1, r.naswot_v2
            )?;
        }
        Ok(())
    }
}

impl StatProvider for StatTable {
    fn get(&self, id: ArchId) -> Result<TfStatRecord> {
        self.records.get(&id).copied().ok_or(Error::MissingStat(id))
    }
}

/// Loads a statistics CSV into a file-backed provider.
pub fn ingest_stats(path: &Path) -> Result<StatTable> {
    StatTable::read(std::fs::File::open(path)?)
}
