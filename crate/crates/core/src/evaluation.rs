//! Repeated NASWOT random search over a subset, scored against a table of
//! trained accuracies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::ArchId;
use crate::tfstats::StatProvider;

pub const ACCURACY_HEADER: &str = "arch_id,dataset,test_accuracy";

/// Test accuracies (percent) for one dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub dataset: String,
    pub values: BTreeMap<ArchId, f64>,
}

impl Accuracies {
    pub fn get(&self, id: ArchId) -> Result<f64> {
        self.values.get(&id).copied().ok_or(Error::MissingAccuracy(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Accuracies for every dataset found in the input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyTable {
    sets: BTreeMap<String, Accuracies>,
}

impl AccuracyTable {
    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn dataset(&self, name: &str) -> Option<&Accuracies> {
        self.sets.get(name)
    }

    /// The named dataset, or the only one present when `name` is `None`.
    pub fn resolve(&self, name: Option<&str>) -> Result<&Accuracies> {
        match name {
            Some(n) => self
                .dataset(n)
                .ok_or_else(|| Error::InvalidInput(format!("no accuracies for dataset `{n}`"))),
            None if self.sets.len() == 1 => Ok(self.sets.values().next().expect("one dataset")),
            None => Err(Error::InvalidInput(format!(
                "{} datasets present, pick one",
                self.sets.len()
            ))),
        }
    }

    /// Total number of rows across datasets.
    pub fn len(&self) -> usize {
        self.sets.values().map(Accuracies::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut rows = reader.records();
        match rows.next() {
            Some(Ok(h)) if h.iter().map(str::trim).eq(ACCURACY_HEADER.split(',')) => {}
            _ => return Err(Error::parse(0, format!("expected header `{ACCURACY_HEADER}`"))),
        }
        let mut sets: BTreeMap<String, Accuracies> = BTreeMap::new();
        for row in rows {
            let row = row.map_err(|e| Error::parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 3 {
                return Err(Error::parse(line, format!("expected 3 fields, found {}", row.len())));
            }
            let id: ArchId = row[0]
                .parse()
                .map_err(|_| Error::parse(line, format!("bad arch_id `{}`", &row[0])))?;
            let dataset = row[1].trim();
            if dataset.is_empty() {
                return Err(Error::parse(line, "empty dataset name"));
            }
            let acc = row[2]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=100.0).contains(v))
                .ok_or_else(|| Error::parse(line, format!("accuracy `{}` not in [0, 100]", &row[2])))?;
            let set = sets.entry(dataset.to_string()).or_insert_with(|| Accuracies {
                dataset: dataset.to_string(),
                values: BTreeMap::new(),
            });
            if set.values.insert(id, acc).is_some() {
                return Err(Error::DuplicateKey(format!("{id},{dataset}")));
            }
        }
        Ok(AccuracyTable { sets })
    }
}

pub fn ingest_accuracies(path: &Path) -> Result<AccuracyTable> {
    AccuracyTable::read(std::fs::File::open(path)?)
}

/// Score maximized by the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SearchScore {
    NaswotV1,
    #[default]
    NaswotV2,
}

/// Samples `n` architectures from `subset` (with replacement only when `n`
/// exceeds the subset) and returns the one with the best score, breaking
/// ties toward the lowest id.
pub fn naswot_search(
    subset: &[ArchId],
    provider: &dyn StatProvider,
    n: usize,
    seed: u64,
    score: SearchScore,
) -> Result<ArchId> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("empty subset".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n <= subset.len() {
        index::sample(&mut rng, subset.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..subset.len())).collect()
    };
    let mut best: Option<(f64, ArchId)> = None;
    for i in picks {
        let id = subset[i];
        let r = provider.get(id)?;
        let s = match score {
            SearchScore::NaswotV1 => r.naswot_v1,
            SearchScore::NaswotV2 => r.naswot_v2,
        };
        best = match best {
            Some((bs, bid)) if bs > s || (bs == s && bid <= id) => Some((bs, bid)),
            _ => Some((s, id)),
        };
    }
    Ok(best.expect("at least one sample").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub arch_id: ArchId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub subset_size: usize,
    pub sample_size: usize,
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for a single run.
    pub std: f64,
}

impl EvalReport {
    pub fn from_runs(subset: &str, subset_size: usize, sample_size: usize, runs: Vec<RunResult>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let (mean, median, std) = summary(&acc);
        EvalReport {
            subset: subset.to_string(),
            subset_size,
            sample_size,
            runs,
            mean,
            median,
            std,
        }
    }
}

/// Mean, median and sample standard deviation.
pub fn summary(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, median, std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub runs: usize,
    pub sample_size: usize,
    pub base_seed: u64,
    pub score: SearchScore,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            runs: 10,
            sample_size: 100,
            base_seed: 0,
            score: SearchScore::NaswotV2,
        }
    }
}

/// Runs the search with seeds `base_seed..base_seed + runs` and looks up the
/// accuracy of each winner.
pub fn evaluate_subset(
    name: &str,
    subset: &[ArchId],
    provider: &dyn StatProvider,
    accuracies: &Accuracies,
    params: SearchParams,
) -> Result<EvalReport> {
    if params.runs == 0 {
        return Err(Error::InvalidInput("need at least one run".into()));
    }
    for &id in subset {
        accuracies.get(id)?;
    }
    let runs = (0..params.runs as u64)
        .into_par_iter()
        .map(|r| {
            let seed = params.base_seed + r;
            let arch_id = naswot_search(subset, provider, params.sample_size, seed, params.score)?;
            Ok(RunResult {
                seed,
                arch_id,
                accuracy: accuracies.get(arch_id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(name, subset.len(), params.sample_size, runs))
}

pub fn subset_mean_accuracy(subset: &[ArchId], accuracies: &Accuracies) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("empty subset".into()));
    }
    let total = subset.iter().map(|&id| accuracies.get(id)).sum::<Result<f64>>()?;
    Ok(total / subset.len() as f64)
}

/// Side-by-side table with one column per report.
pub fn format_table(title: &str, reports: &[EvalReport]) -> String {
    let rows: [(&str, fn(&EvalReport) -> String); 5] = [
        ("Mean", |r| format!("{:.2}", r.mean)),
        ("Median", |r| format!("{:.2}", r.median)),
        ("Standard deviation", |r| format!("{:.2}", r.std)),
        ("Subset size", |r| r.subset_size.to_string()),
        ("Runs", |r| r.runs.len().to_string()),
    ];
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(title.len());
    let cells: Vec<Vec<String>> = rows.iter().map(|(_, f)| reports.iter().map(f).collect()).collect();
    let widths: Vec<usize> = reports
        .iter()
        .enumerate()
        .map(|(j, r)| cells.iter().map(|row| row[j].len()).max().unwrap_or(0).max(r.subset.len()))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{title:<label_w$}");
    for (r, w) in reports.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$}", r.subset);
    }
    out.push('\n');
    let total = label_w + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for ((label, _), row) in rows.iter().zip(&cells) {
        let _ = write!(out, "{label:<label_w$}");
        for (c, w) in row.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}
