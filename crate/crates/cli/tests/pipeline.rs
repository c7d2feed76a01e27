mod common;

use std::fs;

use cbred_cli::stages::{cmd_cluster, cmd_evaluate, cmd_select, EvaluationArtifact, SelectionArtifact};
use cbred_cli::{run_pipeline, CliError, Stage};
use common::*;
use tempfile::tempdir;

#[test]
fn full_pipeline_emits_every_artifact() {
    let tmp = tempdir().unwrap();
    let acc = write_synthetic_accuracies(&tmp.path().join("acc.csv"), 3);
    let cfg = quick(smoke_config(&tmp.path().join("out"), &acc));
    let msgs = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(msgs.len(), 7);
    for f in PRODUCED {
        assert!(cfg.artifacts_dir.join(f).is_file(), "{f} missing");
    }
    let eval: EvaluationArtifact =
        serde_json::from_slice(&fs::read(cfg.artifacts_dir.join("evaluation.json")).unwrap()).unwrap();
    let names: Vec<&str> = eval.reports.iter().map(|r| r.subset.as_str()).collect();
    assert_eq!(names, ["Intrinsic", "TF-Q", "MAC-Q", "C-BRED"]);
    assert!(eval.reports.iter().all(|r| r.runs.len() == 10));
    let report = fs::read_to_string(cfg.artifacts_dir.join("report.txt")).unwrap();
    assert!(report.contains("Standard deviation"));
}

#[test]
fn evaluate_needs_clustering() {
    let tmp = tempdir().unwrap();
    let acc = write_synthetic_accuracies(&tmp.path().join("acc.csv"), 3);
    let cfg = quick(smoke_config(&tmp.path().join("out"), &acc));
    run_pipeline(&cfg, &[Stage::Enumerate, Stage::Distances, Stage::Stats]).unwrap();
    match cmd_evaluate(&cfg) {
        Err(CliError::DependencyMissing { missing, .. }) => assert_eq!(missing, "cluster.manifest.json"),
        other => panic!("expected a dependency error, got {other:?}"),
    }
    run_pipeline(&cfg, &[Stage::Cluster, Stage::Select, Stage::Evaluate]).unwrap();
    fs::remove_file(cfg.artifacts_dir.join("clusters.csv")).unwrap();
    match cmd_evaluate(&cfg) {
        Err(CliError::DependencyMissing { missing, .. }) => assert_eq!(missing, "clusters.csv"),
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn reruns_are_byte_identical_and_chains_are_checked() {
    let tmp = tempdir().unwrap();
    let acc = write_synthetic_accuracies(&tmp.path().join("acc.csv"), 3);
    let cfg = quick(smoke_config(&tmp.path().join("out"), &acc));
    run_pipeline(&cfg, &Stage::ALL).unwrap();
    let first = read_all(&cfg.artifacts_dir);
    for stage in Stage::ALL {
        run_pipeline(&cfg, &[stage]).unwrap();
    }
    assert_eq!(read_all(&cfg.artifacts_dir), first);

    let mut changed = cfg.clone();
    changed.eps = 0.06;
    assert!(matches!(cmd_select(&changed), Err(CliError::ProvenanceMismatch { .. })));
    cmd_cluster(&changed).unwrap();
    cmd_select(&changed).unwrap();
    assert!(matches!(cmd_select(&cfg), Err(CliError::ProvenanceMismatch { .. })));

    let clusters = cfg.artifacts_dir.join("clusters.csv");
    let mut text = fs::read_to_string(&clusters).unwrap();
    text.push('\n');
    fs::write(&clusters, text).unwrap();
    assert!(matches!(cmd_select(&changed), Err(CliError::ProvenanceMismatch { .. })));
}

#[test]
fn on_the_fly_distances_cluster_identically() {
    let tmp = tempdir().unwrap();
    let acc = write_synthetic_accuracies(&tmp.path().join("acc.csv"), 3);
    let cfg = smoke_config(&tmp.path().join("a"), &acc);
    run_pipeline(&cfg, &[Stage::Enumerate, Stage::Distances, Stage::Cluster]).unwrap();
    let mut lazy = smoke_config(&tmp.path().join("b"), &acc);
    lazy.set("distance_mode", "onthefly").unwrap();
    run_pipeline(&lazy, &[Stage::Enumerate, Stage::Distances, Stage::Cluster]).unwrap();
    assert!(!lazy.artifacts_dir.join("distances.cbrd").exists());
    assert_eq!(
        fs::read(cfg.artifacts_dir.join("clusters.csv")).unwrap(),
        fs::read(lazy.artifacts_dir.join("clusters.csv")).unwrap()
    );
}

#[test]
fn ingested_stats_reproduce_computed_selection() {
    let tmp = tempdir().unwrap();
    let acc = write_synthetic_accuracies(&tmp.path().join("acc.csv"), 3);
    let cfg = quick(smoke_config(&tmp.path().join("a"), &acc));
    run_pipeline(&cfg, &Stage::ALL).unwrap();
    let stats = tmp.path().join("stats.csv");
    fs::copy(cfg.artifacts_dir.join("stats.csv"), &stats).unwrap();

    let mut ingest = quick(smoke_config(&tmp.path().join("b"), &acc));
    ingest.stats_file = Some(stats);
    run_pipeline(&ingest, &Stage::ALL).unwrap();
    let sel = |dir: &std::path::Path| -> SelectionArtifact {
        serde_json::from_slice(&fs::read(dir.join("selection.json")).unwrap()).unwrap()
    };
    assert_eq!(sel(&cfg.artifacts_dir), sel(&ingest.artifacts_dir));
    assert_eq!(
        fs::read(cfg.artifacts_dir.join("report.txt")).unwrap(),
        fs::read(ingest.artifacts_dir.join("report.txt")).unwrap()
    );
}

#[test]
fn missing_stat_is_reported() {
    let tmp = tempdir().unwrap();
    let acc = write_synthetic_accuracies(&tmp.path().join("acc.csv"), 3);
    let stats = tmp.path().join("stats.csv");
    fs::write(&stats, "arch_id,ntk_cond,lin_regions,naswot_v1,naswot_v2\n0,1,1,1,1\n").unwrap();
    let mut cfg = smoke_config(&tmp.path().join("out"), &acc);
    cfg.stats_file = Some(stats);
    let err = run_pipeline(&cfg, &[Stage::Enumerate, Stage::Stats]).unwrap_err();
    assert!(matches!(err, CliError::Core(cbred::Error::MissingStat(_))), "{err}");
}
