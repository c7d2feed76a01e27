//! Run configuration: defaults, `key=value` files and overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cbred::evaluation::{SearchParams, SearchScore};
use cbred::netengine::ToyNetConfig;
use cbred::searchspace::OpKind;
use cbred::tfstats::StatConfig;
use cbred::cluster::DbscanParams;
use serde_json::{json, Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    /// Materialize the condensed matrix on disk.
    Matrix,
    /// Recompute distances from features when clustering.
    OnTheFly,
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMode::Matrix => "matrix",
            DistanceMode::OnTheFly => "onthefly",
        })
    }
}

impl FromStr for DistanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "matrix" => Ok(DistanceMode::Matrix),
            "onthefly" | "on-the-fly" => Ok(DistanceMode::OnTheFly),
            _ => Err(format!("unknown distance mode `{s}` (matrix|onthefly)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub opset: Vec<OpKind>,
    pub dedup: bool,
    pub alpha: f64,
    pub distance_mode: DistanceMode,
    pub eps: f64,
    pub min_pts: usize,
    pub net: ToyNetConfig,
    pub batch: usize,
    pub regions_samples: usize,
    pub damping: f64,
    pub eigen_tol: f64,
    pub stats_file: Option<PathBuf>,
    pub acc_file: Option<PathBuf>,
    pub dataset: Option<String>,
    pub search_n: usize,
    pub runs: usize,
    pub seed: u64,
    pub search_score: SearchScore,
    pub baseline_bucket: Option<usize>,
    pub artifacts_dir: PathBuf,
    /// 0 lets the thread pool pick.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stat = StatConfig::default();
        let search = SearchParams::default();
        RunConfig {
            opset: OpKind::ALL.to_vec(),
            dedup: true,
            alpha: 0.5,
            distance_mode: DistanceMode::Matrix,
            eps: DbscanParams::default().eps,
            min_pts: DbscanParams::default().min_pts,
            net: stat.net,
            batch: stat.batch,
            regions_samples: stat.regions_samples,
            damping: stat.damping,
            eigen_tol: stat.eigen_tol,
            stats_file: None,
            acc_file: None,
            dataset: None,
            search_n: search.sample_size,
            runs: search.runs,
            seed: search.base_seed,
            search_score: search.score,
            baseline_bucket: None,
            artifacts_dir: PathBuf::from("artifacts"),
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" | "-" => None,
        v => Some(v),
    }
}

pub const KEYS: &[&str] = &[
    "opset",
    "dedup",
    "alpha",
    "distance_mode",
    "eps",
    "min_pts",
    "net_resolution",
    "net_input_channels",
    "net_channels",
    "net_cells_per_stage",
    "net_stages",
    "net_classes",
    "net_seed",
    "batch",
    "regions_samples",
    "damping",
    "eigen_tol",
    "stats_file",
    "acc_file",
    "dataset",
    "search_n",
    "runs",
    "seed",
    "search_score",
    "baseline_bucket",
    "artifacts_dir",
    "threads",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        match key {
            "opset" => {
                let ops = value
                    .split(',')
                    .map(|s| parse::<OpKind>(key, s.trim()))
                    .collect::<CliResult<Vec<_>>>()?;
                if ops.is_empty() {
                    return Err(CliError::Config("opset: empty".into()));
                }
                self.opset = ops;
            }
            "dedup" => self.dedup = parse_bool(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "distance_mode" => self.distance_mode = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "min_pts" => self.min_pts = parse(key, value)?,
            "net_resolution" => self.net.input_resolution = parse(key, value)?,
            "net_input_channels" => self.net.input_channels = parse(key, value)?,
            "net_channels" => self.net.cell_channels = parse(key, value)?,
            "net_cells_per_stage" => self.net.cells_per_stage = parse(key, value)?,
            "net_stages" => self.net.stages = parse(key, value)?,
            "net_classes" => self.net.num_classes = parse(key, value)?,
            "net_seed" => self.net.seed = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "regions_samples" => self.regions_samples = parse(key, value)?,
            "damping" => self.damping = parse(key, value)?,
            "eigen_tol" => self.eigen_tol = parse(key, value)?,
            "stats_file" => self.stats_file = optional(value).map(PathBuf::from),
            "acc_file" => self.acc_file = optional(value).map(PathBuf::from),
            "dataset" => self.dataset = optional(value).map(str::to_string),
            "search_n" => self.search_n = parse(key, value)?,
            "runs" => self.runs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "search_score" => {
                self.search_score = match value {
                    "v1" | "naswot_v1" => SearchScore::NaswotV1,
                    "v2" | "naswot_v2" => SearchScore::NaswotV2,
                    _ => return Err(CliError::Config(format!("search_score: expected v1 or v2, got `{value}`"))),
                }
            }
            "baseline_bucket" => {
                self.baseline_bucket = match optional(value) {
                    None | Some("top") => None,
                    Some(v) => Some(parse(key, v)?),
                }
            }
            "artifacts_dir" => self.artifacts_dir = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn dbscan(&self) -> DbscanParams {
        DbscanParams {
            eps: self.eps,
            min_pts: self.min_pts,
        }
    }

    pub fn stat_config(&self) -> StatConfig {
        StatConfig {
            net: self.net.clone(),
            batch: self.batch,
            regions_samples: self.regions_samples,
            damping: self.damping,
            eigen_tol: self.eigen_tol,
        }
    }

    pub fn search(&self) -> SearchParams {
        SearchParams {
            runs: self.runs,
            sample_size: self.search_n,
            base_seed: self.seed,
            score: self.search_score,
        }
    }

    /// Value of `key` as recorded in manifests. External files are recorded
    /// by their contents hash (filled in by the caller), not their path.
    pub fn value(&self, key: &str) -> Value {
        match key {
            "opset" => json!(self.opset.iter().map(|o| o.name()).collect::<Vec<_>>()),
            "dedup" => json!(self.dedup),
            "alpha" => json!(self.alpha),
            "distance_mode" => json!(self.distance_mode.to_string()),
            "eps" => json!(self.eps),
            "min_pts" => json!(self.min_pts),
            "net_resolution" => json!(self.net.input_resolution),
            "net_input_channels" => json!(self.net.input_channels),
            "net_channels" => json!(self.net.cell_channels),
            "net_cells_per_stage" => json!(self.net.cells_per_stage),
            "net_stages" => json!(self.net.stages),
            "net_classes" => json!(self.net.num_classes),
            "net_seed" => json!(self.net.seed),
            "batch" => json!(self.batch),
            "regions_samples" => json!(self.regions_samples),
            "damping" => json!(self.damping),
            "eigen_tol" => json!(self.eigen_tol),
            "stats_file" => json!(self.stats_file.is_some()),
            "acc_file" => json!(self.acc_file.is_some()),
            "dataset" => json!(self.dataset),
            "search_n" => json!(self.search_n),
            "runs" => json!(self.runs),
            "seed" => json!(self.seed),
            "search_score" => json!(match self.search_score {
                SearchScore::NaswotV1 => "v1",
                SearchScore::NaswotV2 => "v2",
            }),
            "baseline_bucket" => json!(self.baseline_bucket),
            _ => Value::Null,
        }
    }

    /// Every key except `artifacts_dir` and `threads`, which do not affect
    /// results.
    pub fn provenance(&self) -> Map<String, Value> {
        KEYS.iter()
            .filter(|k| !matches!(**k, "artifacts_dir" | "threads"))
            .map(|k| (k.to_string(), self.value(k)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# demo\nalpha = 0.25\nopset=none,skip\n\nmin_pts=3 # trailing\nstats_file=none\n")
            .unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.opset, vec![OpKind::None, OpKind::Skip]);
        assert_eq!(cfg.min_pts, 3);
        assert!(cfg.stats_file.is_none());
        cfg.set("baseline_bucket", "2").unwrap();
        assert_eq!(cfg.baseline_bucket, Some(2));
        cfg.set("baseline_bucket", "top").unwrap();
        assert_eq!(cfg.baseline_bucket, None);
    }

    #[test]
    fn rejects_bad_lines() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_text("alpha"), Err(CliError::Config(_))));
        assert!(matches!(cfg.apply_text("colour=red"), Err(CliError::Config(_))));
        assert!(matches!(cfg.apply_text("eps=wide"), Err(CliError::Config(_))));
        assert!(matches!(cfg.apply_text("opset=none,lstm"), Err(CliError::Config(_))));
    }

    #[test]
    fn provenance_skips_plumbing() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        b.set("threads", "8").unwrap();
        b.set("artifacts_dir", "/tmp/elsewhere").unwrap();
        assert_eq!(a.provenance(), b.provenance());
        a.set("eps", "0.1").unwrap();
        assert_ne!(a.provenance(), b.provenance());
        assert_eq!(a.provenance().len(), KEYS.len() - 2);
        assert!(KEYS.iter().all(|k| *k == "artifacts_dir" || *k == "threads" || !a.value(k).is_null() || *k == "dataset" || *k == "baseline_bucket"));
    }
}
