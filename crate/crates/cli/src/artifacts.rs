//! Artifact layout, manifests and provenance checks.
//!
//! Every stage writes its files into the artifacts directory followed by a
//! `<stage>.manifest.json` sidecar. The manifest records a hash over the
//! configuration keys the stage depends on and the hashes of its upstream
//! stages, the serialized configuration, and the SHA-256 of each output.
//! A stage refuses to run unless every ancestor's manifest exists, matches
//! the hash the current configuration implies, and its outputs are intact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CELLS: &str = "cells.txt";
pub const FEATURES: &str = "features.csv";
pub const DISTANCES: &str = "distances.cbrd";
pub const CLUSTERS: &str = "clusters.csv";
pub const STATS: &str = "stats.csv";
pub const SELECTION: &str = "selection.json";
pub const EVALUATION: &str = "evaluation.json";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Enumerate,
    Distances,
    Cluster,
    Stats,
    Select,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Enumerate,
        Stage::Distances,
        Stage::Cluster,
        Stage::Stats,
        Stage::Select,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Enumerate => "enumerate",
            Stage::Distances => "distances",
            Stage::Cluster => "cluster",
            Stage::Stats => "stats",
            Stage::Select => "select",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Enumerate => &[],
            Stage::Distances => &[Stage::Enumerate],
            Stage::Cluster => &[Stage::Distances],
            Stage::Stats => &[Stage::Enumerate],
            Stage::Select => &[Stage::Cluster, Stage::Stats],
            Stage::Evaluate => &[Stage::Select],
            Stage::Report => &[Stage::Evaluate],
        }
    }

    /// Every stage this one transitively depends on, in pipeline order.
    pub fn ancestors(self) -> Vec<Stage> {
        let mut seen = Vec::new();
        let mut todo = self.upstream().to_vec();
        while let Some(s) = todo.pop() {
            if !seen.contains(&s) {
                seen.push(s);
                todo.extend_from_slice(s.upstream());
            }
        }
        seen.sort();
        seen
    }

    /// Configuration keys that change this stage's outputs.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Enumerate => &["opset", "dedup"],
            Stage::Distances => &["alpha", "distance_mode"],
            Stage::Cluster => &["eps", "min_pts"],
            Stage::Stats => &[
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
            ],
            Stage::Select => &["baseline_bucket"],
            Stage::Evaluate => &["acc_file", "dataset", "search_n", "runs", "seed", "search_score"],
            Stage::Report => &[],
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.manifest.json", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub hash: String,
    pub upstream: BTreeMap<String, String>,
    /// SHA-256 of external inputs (statistics or accuracy tables).
    pub inputs: BTreeMap<String, String>,
    pub config: Map<String, Value>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// External files read by `stage`, keyed by config key.
fn external_inputs(cfg: &RunConfig, stage: Stage) -> Vec<(&'static str, &Path)> {
    let mut out = Vec::new();
    if stage == Stage::Stats {
        if let Some(p) = &cfg.stats_file {
            out.push(("stats_file", p.as_path()));
        }
    }
    if stage == Stage::Evaluate {
        if let Some(p) = &cfg.acc_file {
            out.push(("acc_file", p.as_path()));
        }
    }
    out
}

fn input_hashes(cfg: &RunConfig, stage: Stage) -> CliResult<BTreeMap<String, String>> {
    external_inputs(cfg, stage)
        .into_iter()
        .map(|(k, p)| {
            let h = sha256_file(p).map_err(|e| CliError::Config(format!("{k} `{}`: {e}", p.display())))?;
            Ok((k.to_string(), h))
        })
        .collect()
}

/// Hash of `stage` implied by `cfg`, covering its whole upstream lineage.
pub fn expected_hash(cfg: &RunConfig, stage: Stage) -> CliResult<String> {
    let upstream = stage
        .upstream()
        .iter()
        .map(|&u| Ok((u.name().to_string(), expected_hash(cfg, u)?)))
        .collect::<CliResult<BTreeMap<_, _>>>()?;
    stage_hash(cfg, stage, &upstream, &input_hashes(cfg, stage)?)
}

fn stage_hash(
    cfg: &RunConfig,
    stage: Stage,
    upstream: &BTreeMap<String, String>,
    inputs: &BTreeMap<String, String>,
) -> CliResult<String> {
    let keys: Map<String, Value> = stage.keys().iter().map(|k| (k.to_string(), cfg.value(k))).collect();
    let doc = json!({
        "stage": stage.name(),
        "config": keys,
        "inputs": inputs,
        "upstream": upstream,
    });
    Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
}

/// Output directory of one stage run. Files are registered as they are
/// written; [`StageWriter::finish`] writes the manifest.
pub struct StageWriter<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl<'a> StageWriter<'a> {
    /// Verifies the upstream chain and drops any stale manifest of `stage`.
    pub fn begin(cfg: &'a RunConfig, stage: Stage) -> CliResult<Self> {
        verify_chain(cfg, stage)?;
        let dir = cfg.artifacts_dir.clone();
        fs::create_dir_all(&dir)?;
        let stale = dir.join(stage.manifest_name());
        if stale.exists() {
            fs::remove_file(stale)?;
        }
        Ok(StageWriter {
            cfg,
            stage,
            dir,
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write<F>(&mut self, name: &str, body: F) -> CliResult<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> CliResult<()>,
    {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        self.outputs.insert(name.to_string(), sha256_file(&path)?);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn finish(self) -> CliResult<Manifest> {
        let upstream = self
            .stage
            .upstream()
            .iter()
            .map(|&u| Ok((u.name().to_string(), read_manifest(&self.dir, self.stage, u)?.hash)))
            .collect::<CliResult<BTreeMap<_, _>>>()?;
        let inputs = input_hashes(self.cfg, self.stage)?;
        let manifest = Manifest {
            stage: self.stage.name().to_string(),
            hash: stage_hash(self.cfg, self.stage, &upstream, &inputs)?,
            upstream,
            inputs,
            config: self.cfg.provenance(),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join(self.stage.manifest_name()), text)?;
        Ok(manifest)
    }
}

fn read_manifest(dir: &Path, stage: Stage, needed: Stage) -> CliResult<Manifest> {
    let path = dir.join(needed.manifest_name());
    let text = fs::read_to_string(&path).map_err(|_| CliError::DependencyMissing {
        stage: stage.name(),
        missing: needed.manifest_name(),
        hint: needed.name(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::ProvenanceMismatch {
        stage: stage.name(),
        detail: format!("unreadable {}: {e}", needed.manifest_name()),
    })
}

/// Checks every ancestor of `stage`: manifest present, hash as implied by
/// `cfg`, outputs present and unmodified.
pub fn verify_chain(cfg: &RunConfig, stage: Stage) -> CliResult<()> {
    let dir = &cfg.artifacts_dir;
    for anc in stage.ancestors() {
        let m = read_manifest(dir, stage, anc)?;
        let want = expected_hash(cfg, anc)?;
        if m.hash != want {
            return Err(CliError::ProvenanceMismatch {
                stage: stage.name(),
                detail: format!(
                    "{} was produced under a different configuration (hash {}, expected {})",
                    anc.name(),
                    &m.hash[..12.min(m.hash.len())],
                    &want[..12]
                ),
            });
        }
        for (file, sha) in &m.outputs {
            let path = dir.join(file);
            if !path.exists() {
                return Err(CliError::DependencyMissing {
                    stage: stage.name(),
                    missing: file.clone(),
                    hint: anc.name(),
                });
            }
            if &sha256_file(&path)? != sha {
                return Err(CliError::ProvenanceMismatch {
                    stage: stage.name(),
                    detail: format!("{file} was modified after `{}` wrote it", anc.name()),
                });
            }
        }
    }
    Ok(())
}

/// Path of an upstream artifact, which [`verify_chain`] has vouched for.
pub fn input(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.artifacts_dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ancestors_are_transitive() {
        assert_eq!(
            Stage::Evaluate.ancestors(),
            vec![Stage::Enumerate, Stage::Distances, Stage::Cluster, Stage::Stats, Stage::Select]
        );
        assert!(Stage::Enumerate.ancestors().is_empty());
    }

    #[test]
    fn hash_tracks_lineage_only() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.set("eps", "0.5").unwrap();
        assert_eq!(expected_hash(&a, Stage::Distances).unwrap(), expected_hash(&b, Stage::Distances).unwrap());
        assert_ne!(expected_hash(&a, Stage::Cluster).unwrap(), expected_hash(&b, Stage::Cluster).unwrap());
        assert_ne!(expected_hash(&a, Stage::Report).unwrap(), expected_hash(&b, Stage::Report).unwrap());
        assert_eq!(expected_hash(&a, Stage::Stats).unwrap(), expected_hash(&b, Stage::Stats).unwrap());
        let mut c = RunConfig::default();
        c.set("threads", "3").unwrap();
        assert_eq!(expected_hash(&a, Stage::Report).unwrap(), expected_hash(&c, Stage::Report).unwrap());
    }

    #[test]
    fn every_key_belongs_to_one_stage() {
        let mut owned: Vec<&str> = Stage::ALL.iter().flat_map(|s| s.keys().iter().copied()).collect();
        owned.sort();
        let mut all: Vec<&str> = crate::config::KEYS
            .iter()
            .copied()
            .filter(|k| !matches!(*k, "artifacts_dir" | "threads"))
            .collect();
        all.sort();
        assert_eq!(owned, all);
    }
}
