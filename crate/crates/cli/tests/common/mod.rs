#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cbred::searchspace::SPACE_SIZE;
use cbred_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform accuracies in [40, 75) for every architecture of the full space.
pub fn write_synthetic_accuracies(path: &Path, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("arch_id,dataset,test_accuracy\n");
    for id in 0..SPACE_SIZE {
        let _ = writeln!(text, "{id},cifar100,{:.2}", rng.random_range(40.0..75.0));
    }
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// The {NONE, SKIP} subspace with DBSCAN settings that give several clusters.
pub fn smoke_config(artifacts: &Path, acc_file: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "opset=none,skip\n\
         eps=0.08\n\
         min_pts=3\n\
         search_n=5\n",
    )
    .unwrap();
    cfg.artifacts_dir = artifacts.to_path_buf();
    cfg.acc_file = Some(acc_file.to_path_buf());
    cfg
}

/// Smaller network and region batch for tests that run the stats stage often.
pub fn quick(mut cfg: RunConfig) -> RunConfig {
    cfg.apply_text("net_resolution=8\nnet_channels=4\nregions_samples=100\nbatch=8\n").unwrap();
    cfg
}

pub const PRODUCED: &[&str] = &[
    "cells.txt",
    "features.csv",
    "distances.cbrd",
    "clusters.csv",
    "stats.csv",
    "selection.json",
    "evaluation.json",
    "report.txt",
    "report.json",
    "enumerate.manifest.json",
    "distances.manifest.json",
    "cluster.manifest.json",
    "stats.manifest.json",
    "select.manifest.json",
    "evaluate.manifest.json",
    "report.manifest.json",
];

pub fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    PRODUCED
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}
