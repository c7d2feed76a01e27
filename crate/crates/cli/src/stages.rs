//! One function per pipeline stage. Each reads upstream artifacts, writes
//! its own plus a manifest, and returns a short human-readable summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write as _};

use serde::{Deserialize, Serialize};

use cbred::cluster::{
    dbscan, read_clustering, sweep, write_clustering, Clustering, CombinedMetric, DistanceMatrix, Distances,
    OnTheFly, SweepEntry,
};
use cbred::compgraph::{write_features, CellFeatures};
use cbred::evaluation::{
    evaluate_subset, format_table, ingest_accuracies, subset_mean_accuracy, EvalReport, SearchParams,
};
use cbred::searchspace::{
    deduplicate, enumerate_space, mac_count, read_cell_list, write_cell_list, ArchId, CellSpec, MacroSkeleton,
};
use cbred::selection::{
    aggregate_scores, baseline_subset, quantile_partition, select_cluster, QuantileStat, SelectionReport,
};
use cbred::tfstats::{compute_all, ingest_stats, ComputedStats, StatSource, StatTable, TfStatRecord};

use crate::artifacts::{self, input, Stage, StageWriter};
use crate::config::{DistanceMode, RunConfig};
use crate::error::{CliError, CliResult};

/// Quantile buckets used by both baselines.
pub const BUCKETS: usize = 5;

/// Column names of the comparison table, in display order.
pub const INTRINSIC: &str = "Intrinsic";
pub const TF_Q: &str = "TF-Q";
pub const MAC_Q: &str = "MAC-Q";
pub const CBRED: &str = "C-BRED";

fn load_cells(cfg: &RunConfig) -> CliResult<Vec<CellSpec>> {
    Ok(read_cell_list(BufReader::new(File::open(input(cfg, artifacts::CELLS))?))?)
}

fn ids_of(cells: &[CellSpec]) -> Vec<ArchId> {
    cells.iter().map(CellSpec::encode).collect()
}

pub fn cmd_enumerate(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Enumerate)?;
    let all = enumerate_space(&cfg.opset)?;
    let cells = if cfg.dedup { deduplicate(&all) } else { all.clone() };
    let features: Vec<CellFeatures> = cells.iter().map(CellFeatures::of).collect();
    out.write(artifacts::CELLS, |w| Ok(write_cell_list(w, &cells)?))?;
    out.write(artifacts::FEATURES, |w| Ok(write_features(w, &features)?))?;
    out.finish()?;
    Ok(format!(
        "enumerated {} cells over {} ops, {} kept after deduplication",
        all.len(),
        cfg.opset.len(),
        cells.len()
    ))
}

/// Distance source for clustering: the stored matrix or on-the-fly.
fn with_distances<T>(cfg: &RunConfig, f: impl FnOnce(&dyn Distances) -> CliResult<T>) -> CliResult<T> {
    let cells = load_cells(cfg)?;
    match cfg.distance_mode {
        DistanceMode::Matrix => {
            let dm = DistanceMatrix::read_from(BufReader::new(File::open(input(cfg, artifacts::DISTANCES))?))?;
            if dm.len() != cells.len() {
                return Err(CliError::ProvenanceMismatch {
                    stage: "cluster",
                    detail: format!("{} cells but a {}-point distance matrix", cells.len(), dm.len()),
                });
            }
            f(&dm)
        }
        DistanceMode::OnTheFly => {
            let features: Vec<CellFeatures> = cells.iter().map(CellFeatures::of).collect();
            let metric = CombinedMetric::for_space(&features, cfg.alpha)?;
            f(&OnTheFly::new(&features, metric))
        }
    }
}

pub fn cmd_distances(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Distances)?;
    let cells = load_cells(cfg)?;
    let features: Vec<CellFeatures> = cells.iter().map(CellFeatures::of).collect();
    let metric = CombinedMetric::for_space(&features, cfg.alpha)?;
    let norms = metric.norms();
    let summary = match cfg.distance_mode {
        DistanceMode::Matrix => {
            let dm = cbred::cluster::compute_distance_matrix(&features, cfg.alpha)?;
            out.write(artifacts::DISTANCES, |w| Ok(dm.write_to(w)?))?;
            format!("{} pairwise distances", dm.values().len())
        }
        DistanceMode::OnTheFly => "distances will be computed on the fly".to_string(),
    };
    out.finish()?;
    Ok(format!(
        "{} cells, alpha {}, max freq distance {}, max path distance {}; {summary}",
        cells.len(),
        cfg.alpha,
        norms.freq,
        norms.path
    ))
}

fn describe_clustering(c: &Clustering) -> String {
    format!(
        "eps {} min_pts {}: {} clusters, {} noise points ({:.1}%), sizes {:?}",
        c.params.eps,
        c.params.min_pts,
        c.k,
        c.noise_count(),
        100.0 * c.noise_fraction(),
        c.sizes()
    )
}

pub fn cmd_cluster(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Cluster)?;
    let ids = ids_of(&load_cells(cfg)?);
    let clustering = with_distances(cfg, |d| Ok(dbscan(d, cfg.dbscan())))?;
    out.write(artifacts::CLUSTERS, |w| Ok(write_clustering(w, &ids, &clustering)?))?;
    out.finish()?;
    let mut msg = describe_clustering(&clustering);
    if clustering.k < 2 {
        msg.push_str("; fewer than two clusters, selection will fail (try `cbred sweep`)");
    }
    Ok(msg)
}

/// Grid search over DBSCAN parameters. Writes nothing.
pub fn cmd_sweep(
    cfg: &RunConfig,
    eps_grid: &[f64],
    min_pts_grid: &[usize],
    max_noise: f64,
) -> CliResult<(Vec<SweepEntry>, Option<SweepEntry>, String)> {
    artifacts::verify_chain(cfg, Stage::Cluster)?;
    let (entries, best) = with_distances(cfg, |d| Ok(sweep(d, eps_grid, min_pts_grid, max_noise)))?;
    let mut text = format!("{:>10} {:>8} {:>4} {:>7}\n", "eps", "min_pts", "k", "noise");
    for e in &entries {
        let _ = writeln!(
            text,
            "{:>10} {:>8} {:>4} {:>6.1}%",
            e.params.eps,
            e.params.min_pts,
            e.k,
            100.0 * e.noise_fraction
        );
    }
    match &best {
        Some(b) => {
            let _ = writeln!(text, "recommended: eps={} min_pts={}", b.params.eps, b.params.min_pts);
        }
        None => {
            let _ = writeln!(text, "no setting gives at least two clusters within the noise limit");
        }
    }
    Ok((entries, best, text))
}

pub fn cmd_stats(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Stats)?;
    let ids = ids_of(&load_cells(cfg)?);
    let (records, source) = match &cfg.stats_file {
        Some(path) => (ingest_stats(path)?.select(&ids)?, StatSource::Ingested),
        None => {
            let provider = ComputedStats::new(cfg.stat_config())?;
            let records = compute_all(&ids, &provider)
                .into_iter()
                .collect::<cbred::Result<Vec<TfStatRecord>>>()?;
            (records, StatSource::Computed)
        }
    };
    let sentinels = records
        .iter()
        .filter(|r| r.ntk_cond.is_infinite() || r.naswot_v1.is_infinite() || r.naswot_v2.is_infinite())
        .count();
    let table = StatTable::from_records(records)?;
    out.write(artifacts::STATS, |w| Ok(table.write(w)?))?;
    out.finish()?;
    Ok(format!(
        "{} statistics records ({}), {} with sentinel values",
        table.len(),
        match source {
            StatSource::Computed => "computed",
            StatSource::Ingested => "ingested",
        },
        sentinels
    ))
}

fn load_stats(cfg: &RunConfig) -> CliResult<StatTable> {
    Ok(StatTable::read(BufReader::new(File::open(input(cfg, artifacts::STATS))?))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub bucket: usize,
    /// Largest value in each bucket.
    pub upper: Vec<f64>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub space_size: usize,
    pub selection: SelectionReport,
    pub tf_q: QuantileSummary,
    pub mac_q: QuantileSummary,
    /// Architecture ids of each compared subset, sorted.
    pub subsets: BTreeMap<String, Vec<ArchId>>,
}

pub fn cmd_select(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Select)?;
    let cells = load_cells(cfg)?;
    let ids = ids_of(&cells);
    let (cluster_ids, clustering) =
        read_clustering(BufReader::new(File::open(input(cfg, artifacts::CLUSTERS))?), cfg.dbscan())?;
    if cluster_ids != ids {
        return Err(CliError::ProvenanceMismatch {
            stage: "select",
            detail: "clustering rows do not follow the cell list".into(),
        });
    }
    let records = load_stats(cfg)?.select(&ids)?;
    let aggregates = aggregate_scores(&records)?;
    let selection = select_cluster(&clustering, &aggregates)?;
    let chosen: Vec<ArchId> = clustering.members(selection.chosen).into_iter().map(|i| ids[i]).collect();

    let bucket = cfg.baseline_bucket.unwrap_or(BUCKETS - 1);
    let v2: Vec<f64> = records.iter().map(|r| r.naswot_v2).collect();
    let skel = MacroSkeleton::default();
    let macs: Vec<f64> = cells.iter().map(|c| mac_count(c, &skel) as f64).collect();
    let tf = quantile_partition(QuantileStat::NaswotV2, &ids, &v2, BUCKETS)?;
    let mac = quantile_partition(QuantileStat::Mac, &ids, &macs, BUCKETS)?;
    let summary = |p: &cbred::selection::QuantilePartition| QuantileSummary {
        bucket,
        upper: p.upper.clone(),
        sizes: (0..BUCKETS).map(|b| p.members(b).len()).collect(),
    };
    let artifact = SelectionArtifact {
        space_size: ids.len(),
        tf_q: summary(&tf),
        mac_q: summary(&mac),
        subsets: BTreeMap::from([
            (CBRED.to_string(), chosen),
            (TF_Q.to_string(), baseline_subset(&tf, Some(bucket))?),
            (MAC_Q.to_string(), baseline_subset(&mac, Some(bucket))?),
        ]),
        selection,
    };
    out.write_json(artifacts::SELECTION, &artifact)?;
    out.finish()?;
    let best = artifact.selection.chosen_score();
    Ok(format!(
        "selected cluster {} of {} ({} architectures, mean aggregate {:.4}); baselines use quantile bucket {}",
        best.id,
        artifact.selection.clusters.len(),
        best.size,
        best.mean_aggregate,
        bucket
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub dataset: String,
    pub params: SearchParams,
    /// One report per subset, in display order.
    pub reports: Vec<EvalReport>,
    /// Mean accuracy over every member of each subset.
    pub subset_mean_accuracy: BTreeMap<String, f64>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Evaluate)?;
    let acc_path = cfg
        .acc_file
        .as_ref()
        .ok_or_else(|| CliError::Config("evaluate needs an accuracy table (--acc-file)".into()))?;
    let table = ingest_accuracies(acc_path)?;
    let accs = table.resolve(cfg.dataset.as_deref())?;
    let stats = load_stats(cfg)?;
    let ids = ids_of(&load_cells(cfg)?);
    let sel: SelectionArtifact = serde_json::from_reader(BufReader::new(File::open(input(cfg, artifacts::SELECTION))?))?;
    let params = cfg.search();
    let mut reports = Vec::new();
    let mut means = BTreeMap::new();
    for name in [INTRINSIC, TF_Q, MAC_Q, CBRED] {
        let subset = if name == INTRINSIC { &ids } else { &sel.subsets[name] };
        reports.push(evaluate_subset(name, subset, &stats, accs, params)?);
        means.insert(name.to_string(), subset_mean_accuracy(subset, accs)?);
    }
    let artifact = EvaluationArtifact {
        dataset: accs.dataset.clone(),
        params,
        reports,
        subset_mean_accuracy: means,
    };
    out.write_json(artifacts::EVALUATION, &artifact)?;
    out.finish()?;
    Ok(artifact
        .reports
        .iter()
        .map(|r| format!("{}: mean {:.2} std {:.2}", r.subset, r.mean, r.std))
        .collect::<Vec<_>>()
        .join("; "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub subset: String,
    pub subset_size: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub subset_mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub dataset: String,
    pub runs: usize,
    pub sample_size: usize,
    pub columns: Vec<ReportColumn>,
    /// Column with the highest mean.
    pub best_mean: String,
    /// Column with the lowest standard deviation.
    pub lowest_std: String,
    /// Intrinsic std divided by C-BRED std.
    pub std_reduction: f64,
}

pub fn render_report(eval: &EvaluationArtifact) -> (String, ReportArtifact) {
    let mut text = format_table(&format!("{} accuracy", eval.dataset), &eval.reports);
    let columns: Vec<ReportColumn> = eval
        .reports
        .iter()
        .map(|r| ReportColumn {
            subset: r.subset.clone(),
            subset_size: r.subset_size,
            mean: r.mean,
            median: r.median,
            std: r.std,
            subset_mean_accuracy: eval.subset_mean_accuracy[&r.subset],
        })
        .collect();
    let pick = |better: fn(&ReportColumn, &ReportColumn) -> bool| {
        columns
            .iter()
            .fold(None::<&ReportColumn>, |b, c| match b {
                Some(b) if !better(c, b) => Some(b),
                _ => Some(c),
            })
            .map(|c| c.subset.clone())
            .unwrap_or_default()
    };
    let col = |name: &str| columns.iter().find(|c| c.subset == name);
    let std_reduction = match (col(INTRINSIC), col(CBRED)) {
        (Some(i), Some(c)) if c.std > 0.0 => i.std / c.std,
        (Some(i), Some(_)) if i.std > 0.0 => f64::INFINITY,
        _ => 1.0,
    };
    text.push('\n');
    for c in &columns {
        let _ = writeln!(
            text,
            "{:<10} subset mean accuracy {:>6.2} over {} architectures",
            c.subset, c.subset_mean_accuracy, c.subset_size
        );
    }
    let report = ReportArtifact {
        dataset: eval.dataset.clone(),
        runs: eval.params.runs,
        sample_size: eval.params.sample_size,
        best_mean: pick(|a, b| a.mean > b.mean),
        lowest_std: pick(|a, b| a.std < b.std),
        std_reduction,
        columns,
    };
    (text, report)
}

pub fn cmd_report(cfg: &RunConfig) -> CliResult<String> {
    let mut out = StageWriter::begin(cfg, Stage::Report)?;
    let eval: EvaluationArtifact =
        serde_json::from_reader(BufReader::new(File::open(input(cfg, artifacts::EVALUATION))?))?;
    let (text, report) = render_report(&eval);
    out.write(artifacts::REPORT_TXT, |w| Ok(w.write_all(text.as_bytes())?))?;
    out.write_json(artifacts::REPORT_JSON, &report)?;
    out.finish()?;
    Ok(text)
}

pub fn run_stage(cfg: &RunConfig, stage: Stage) -> CliResult<String> {
    match stage {
        Stage::Enumerate => cmd_enumerate(cfg),
        Stage::Distances => cmd_distances(cfg),
        Stage::Cluster => cmd_cluster(cfg),
        Stage::Stats => cmd_stats(cfg),
        Stage::Select => cmd_select(cfg),
        Stage::Evaluate => cmd_evaluate(cfg),
        Stage::Report => cmd_report(cfg),
    }
}
