//! Acceptance suite. Prints one PASS / FAIL / SKIP line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 8-10 need benchmark data:
//!   CBRED_ACC_FILE    accuracy table (`arch_id,dataset,test_accuracy`)
//!   CBRED_STATS_FILE  statistics table (`arch_id,ntk_cond,lin_regions,naswot_v1,naswot_v2`)
//!   CBRED_DATASET     dataset column to use (default `cifar100`)
//! They are reported as SKIP when the files are not provided.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use cbred::cluster::{dbscan, dist_freq, dist_path, DbscanParams, DistanceKind, DistanceMatrix, Distances, NOISE};
use cbred::compgraph::CellFeatures;
use cbred::evaluation::{ingest_accuracies, subset_mean_accuracy};
use cbred::netengine::{ActivationCode, Tensor, ToyNet, ToyNetConfig};
use cbred::searchspace::{edge_macs, mac_count, ArchId, CellSpec, MacroSkeleton, OpKind, SPACE_SIZE};
use cbred::selection::{aggregate_scores, select_cluster};
use cbred::tfstats::{naswot_v2_from_codes, StatSource, TfStatRecord};
use cbred::Error;
use cbred_cli::stages::{ReportArtifact, SelectionArtifact, CBRED, INTRINSIC};
use cbred_cli::{run_pipeline, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn random_cell(rng: &mut ChaCha8Rng) -> CellSpec {
    ArchId(rng.random_range(0..SPACE_SIZE)).cell()
}

fn metric_axioms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0;
    for _ in 0..1000 {
        let [a, b, c] = [(); 3].map(|_| CellFeatures::of(&random_cell(&mut rng)));
        let metrics: [fn(&CellFeatures, &CellFeatures) -> u32; 2] = [
            |x, y| dist_freq(&x.freq, &y.freq),
            |x, y| dist_path(&x.path, &y.path),
        ];
        for d in metrics {
            let ok = d(&a, &a) == 0 && d(&a, &b) == d(&b, &a) && d(&a, &c) <= d(&a, &b) + d(&b, &c);
            violations += usize::from(!ok);
        }
        let identical = (a.freq == b.freq) == (dist_freq(&a.freq, &b.freq) == 0)
            && (a.path == b.path) == (dist_path(&a.path, &b.path) == 0);
        violations += usize::from(!identical);
    }
    check(violations == 0, format!("1000 random triples, {violations} violations"))
}

/// Union-find over core points; components numbered by smallest core
/// index; border points join the adjacent component with the smallest one.
fn reference_dbscan(dm: &DistanceMatrix, eps: f64, min_pts: usize) -> Vec<i32> {
    let n = dm.len();
    let near = |i: usize, j: usize| dm.distance(i, j) as f64 <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut ids = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let r = find(&mut parent, i);
        let next = ids.len() as i32;
        ids.entry(r).or_insert(next);
    }
    (0..n)
        .map(|i| {
            let adjacent = (0..n).filter(|&j| core[j] && (j == i || near(i, j)));
            adjacent.map(|j| ids[&find(&mut parent, j)]).min().unwrap_or(NOISE)
        })
        .collect()
}

fn dbscan_reference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut clusters_seen = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=64);
        let pts: Vec<(i32, i32)> = (0..n).map(|_| (rng.random_range(0..24), rng.random_range(0..24))).collect();
        let dm = DistanceMatrix::build(n, DistanceKind::Path, |i, j| {
            ((pts[i].0 - pts[j].0).abs() + (pts[i].1 - pts[j].1).abs()) as f32
        })
        .unwrap();
        let eps = rng.random_range(1..8) as f64;
        let min_pts = rng.random_range(1..10);
        let got = dbscan(&dm, DbscanParams { eps, min_pts });
        clusters_seen += got.k;
        mismatches += usize::from(got.labels != reference_dbscan(&dm, eps, min_pts));
    }
    check(
        mismatches == 0,
        format!("200 instances ({clusters_seen} clusters in total), {mismatches} mismatches"),
    )
}

fn naswot_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for na in [1usize, 2, 7, 64, 513, 4096] {
        let a: Vec<bool> = (0..na).map(|_| rng.random()).collect();
        let b: Vec<bool> = a.iter().map(|x| !x).collect();
        let codes = [ActivationCode::from_bits(&a), ActivationCode::from_bits(&b)];
        match naswot_v2_from_codes(&codes, 1e-10) {
            Ok(s) => worst = worst.max((s - 2.0 * (na as f64).ln()).abs()),
            Err(e) => return Fail(format!("N_A={na}: {e}")),
        }
    }
    let a: Vec<bool> = (0..100).map(|_| rng.random()).collect();
    let dup = [ActivationCode::from_bits(&a), ActivationCode::from_bits(&a)];
    let singular = matches!(naswot_v2_from_codes(&dup, 1e-10), Err(Error::SingularKernel { .. }));
    check(
        worst <= 1e-9 && singular,
        format!("max |score - 2 ln N_A| = {worst:.2e}; duplicate codes singular: {singular}"),
    )
}

fn max_rel(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

fn finite_differences() -> Outcome {
    let start = Instant::now();
    let cfg = ToyNetConfig {
        input_resolution: 8,
        cell_channels: 4,
        seed: 11,
        ..ToyNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_jac, mut worst_ntk) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let cell = random_cell(&mut rng);
        let net = ToyNet::instantiate(&cell, &cfg).unwrap();
        let batch = Tensor::gaussian(3, cfg.sample_shape(), rng.random(), 0);
        let sums = |n: &ToyNet, x: &Tensor| -> Vec<f64> {
            let t = n.forward(x).unwrap();
            (0..x.n).map(|b| t.logits_row(b).iter().sum()).collect()
        };

        let h = 1e-6;
        let jac = net.input_jacobian(&batch).unwrap().concat();
        let fd_jac: Vec<f64> = (0..batch.data.len())
            .map(|k| {
                let (mut p, mut m) = (batch.clone(), batch.clone());
                p.data[k] += h;
                m.data[k] -= h;
                (sums(&net, &p).iter().sum::<f64>() - sums(&net, &m).iter().sum::<f64>()) / (2.0 * h)
            })
            .collect();
        worst_jac = worst_jac.max(max_rel(&jac, &fd_jac));

        let grads = net.per_sample_param_grads(&batch).unwrap();
        let mut fd = vec![vec![0.0; net.num_params()]; batch.n];
        for p in 0..net.num_params() {
            let (mut plus, mut minus) = (net.clone(), net.clone());
            plus.params_mut()[p] += h;
            minus.params_mut()[p] -= h;
            for (b, (x, y)) in sums(&plus, &batch).into_iter().zip(sums(&minus, &batch)).enumerate() {
                fd[b][p] = (x - y) / (2.0 * h);
            }
        }
        let gram = |g: &[Vec<f64>]| -> Vec<f64> {
            let mut out = Vec::new();
            for a in g {
                for b in g {
                    out.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
                }
            }
            out
        };
        worst_ntk = worst_ntk.max(max_rel(&gram(&grads), &gram(&fd)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_jac <= 1e-3 && worst_ntk <= 1e-3 && secs < 300.0,
        format!("10 cells: Jacobian rel err {worst_jac:.2e}, NTK rel err {worst_ntk:.2e}, {secs:.1}s"),
    )
}

fn planted_cluster() -> Outcome {
    let mut hits = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let clusters = 4;
        let per = 25;
        let planted = rng.random_range(0..clusters);
        // Well-separated 1-D blobs so DBSCAN recovers the planted grouping.
        let pos: Vec<f32> = (0..clusters * per)
            .map(|i| (i / per) as f32 * 10.0 + rng.random_range(0.0..1.0))
            .collect();
        let dm = DistanceMatrix::build(pos.len(), DistanceKind::Freq, |i, j| (pos[i] - pos[j]).abs()).unwrap();
        let clustering = dbscan(&dm, DbscanParams { eps: 1.0, min_pts: 3 });
        let records: Vec<TfStatRecord> = (0..pos.len())
            .map(|i| {
                let shift = if i / per == planted { 1.0 } else { 0.0 };
                let mut draw = || rng.random_range(0.0..2.0) + shift;
                TfStatRecord {
                    arch_id: ArchId(i as u32),
                    ntk_cond: 1.0 + 10.0 * (3.0 - draw()),
                    lin_regions: (100.0 * draw()) as u64 + 1,
                    naswot_v1: -50.0 + draw(),
                    naswot_v2: 200.0 + draw(),
                    source: StatSource::Ingested,
                }
            })
            .collect();
        let aggregates = aggregate_scores(&records).unwrap();
        if let Ok(sel) = select_cluster(&clustering, &aggregates) {
            let members = clustering.members(sel.chosen);
            hits += usize::from(!members.is_empty() && members.iter().all(|&i| i / per == planted));
        }
    }
    check(hits >= 95, format!("planted cluster chosen in {hits}/100 trials"))
}

fn pipeline_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let acc = common::write_synthetic_accuracies(&tmp.path().join("acc.csv"), 5);
    let start = Instant::now();
    let mut outputs = Vec::new();
    for (run, threads) in [1, 1, 8].into_iter().enumerate() {
        let mut cfg = common::smoke_config(&tmp.path().join(format!("run{run}")), &acc);
        cfg.threads = threads;
        if let Err(e) = run_pipeline(&cfg, &Stage::ALL) {
            return Fail(format!("pipeline run {run} failed: {e}"));
        }
        outputs.push(common::read_all(&cfg.artifacts_dir));
    }
    let same_runs = outputs[0] == outputs[1];
    let same_threads = outputs[0] == outputs[2];
    check(
        same_runs && same_threads,
        format!(
            "{} artifacts; repeat identical: {same_runs}; 1 vs 8 threads identical: {same_threads}; {:.1}s",
            outputs[0].len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn mac_examples() -> Outcome {
    let skel = MacroSkeleton::default();
    let conv3 = 9 * 16 * 16 * 32 * 32;
    let conv1 = 16 * 16 * 32 * 32;
    let stem = 9 * 3 * 16 * 32 * 32;
    let res1 = 9 * 16 * 32 * 16 * 16 + 9 * 32 * 32 * 16 * 16 + 16 * 32 * 16 * 16;
    let res2 = 9 * 32 * 64 * 8 * 8 + 9 * 64 * 64 * 8 * 8 + 32 * 64 * 8 * 8;
    let fixed: u64 = stem + res1 + res2 + 64 * 100;
    let mut single = [OpKind::None; 6];
    single[3] = OpKind::Conv3x3;
    // One 3x3 edge replicated in 5 cells per stage; every stage costs the same.
    let single_total = fixed + 5 * 3 * conv3;
    let got = [
        (edge_macs(OpKind::Conv3x3, 16, 32), conv3),
        (edge_macs(OpKind::Conv1x1, 16, 32), conv1),
        (mac_count(&CellSpec::uniform(OpKind::Skip), &skel), fixed),
        (mac_count(&CellSpec::new(single), &skel), single_total),
    ];
    check(
        got.iter().all(|(a, b)| a == b),
        format!(
            "conv3x3 edge {} / conv1x1 edge {} / all-skip {} / single conv3x3 edge {}",
            got[0].0, got[1].0, got[2].0, got[3].0
        ),
    )
}

struct RealData {
    acc: PathBuf,
    stats: Option<PathBuf>,
    dataset: String,
}

fn real_data() -> Option<RealData> {
    let acc = std::env::var_os("CBRED_ACC_FILE").map(PathBuf::from)?;
    Some(RealData {
        acc,
        stats: std::env::var_os("CBRED_STATS_FILE").map(PathBuf::from),
        dataset: std::env::var("CBRED_DATASET").unwrap_or_else(|_| "cifar100".into()),
    })
}

const NO_DATA: &str = "needs CBRED_ACC_FILE (external benchmark accuracies)";
const NO_STATS: &str = "needs CBRED_ACC_FILE and CBRED_STATS_FILE (external benchmark data)";

fn whole_space_mean(data: &Option<RealData>) -> Outcome {
    let Some(data) = data else { return Skip(NO_DATA.into()) };
    let table = match ingest_accuracies(&data.acc) {
        Ok(t) => t,
        Err(e) => return Fail(format!("cannot read accuracies: {e}")),
    };
    let Some(accs) = table.dataset(&data.dataset) else {
        return Fail(format!("no `{}` rows", data.dataset));
    };
    let all: Vec<ArchId> = (0..SPACE_SIZE).map(ArchId).collect();
    match subset_mean_accuracy(&all, accs) {
        Ok(m) => check((m - 64.0).abs() <= 1.0, format!("whole-space mean {m:.2} (target 64 +/- 1)")),
        Err(e) => Fail(e.to_string()),
    }
}

/// Full-space pipeline on ingested statistics, shared by criteria 9 and 10.
fn real_pipeline(data: &RealData, dir: &std::path::Path) -> Result<(SelectionArtifact, ReportArtifact), String> {
    let mut cfg = cbred_cli::RunConfig::default();
    cfg.artifacts_dir = dir.to_path_buf();
    cfg.acc_file = Some(data.acc.clone());
    cfg.stats_file = data.stats.clone();
    cfg.dataset = Some(data.dataset.clone());
    run_pipeline(&cfg, &Stage::ALL).map_err(|e| e.to_string())?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    let sel = serde_json::from_slice(&read("selection.json")?).map_err(|e| e.to_string())?;
    let rep = serde_json::from_slice(&read("report.json")?).map_err(|e| e.to_string())?;
    Ok((sel, rep))
}

fn main() {
    let data = real_data();
    let tmp = tempfile::tempdir().unwrap();
    let mut real: Option<Result<(SelectionArtifact, ReportArtifact, f64), String>> = None;
    let mut real_run = |data: &RealData| {
        real.get_or_insert_with(|| {
            let start = Instant::now();
            real_pipeline(data, tmp.path()).map(|(s, r)| (s, r, start.elapsed().as_secs_f64()))
        })
        .clone()
    };

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        results.push((id, name, outcome));
    };

    run(1, "distance metric axioms", &mut metric_axioms);
    run(2, "DBSCAN matches quadratic reference", &mut dbscan_reference);
    run(3, "NASWOT v2 closed forms", &mut naswot_closed_forms);
    run(4, "NTK and Jacobian finite differences", &mut finite_differences);
    run(5, "planted cluster recovery", &mut planted_cluster);
    run(6, "pipeline determinism", &mut pipeline_determinism);
    run(7, "MAC hand formulas", &mut mac_examples);
    run(8, "whole-space mean accuracy near 64", &mut || whole_space_mean(&data));
    run(9, "selected subset beats whole space by 4 points", &mut || {
        let Some(d) = data.as_ref().filter(|d| d.stats.is_some()) else { return Skip(NO_STATS.into()) };
        match real_run(d) {
            Err(e) => Fail(format!("pipeline failed: {e}")),
            Ok((sel, rep, _)) => {
                let col = |n: &str| rep.columns.iter().find(|c| c.subset == n).map(|c| c.subset_mean_accuracy);
                let (whole, chosen) = (col(INTRINSIC).unwrap_or(f64::NAN), col(CBRED).unwrap_or(f64::NAN));
                check(
                    chosen - whole >= 4.0,
                    format!(
                        "selected cluster of {} (of {}) averages {chosen:.2} vs {whole:.2}",
                        sel.selection.chosen_score().size,
                        sel.space_size
                    ),
                )
            }
        }
    });
    run(10, "search table ordering and std reduction", &mut || {
        let Some(d) = data.as_ref().filter(|d| d.stats.is_some()) else { return Skip(NO_STATS.into()) };
        match real_run(d) {
            Err(e) => Fail(format!("pipeline failed: {e}")),
            Ok((_, rep, secs)) => check(
                rep.best_mean == CBRED && rep.lowest_std == CBRED && rep.std_reduction >= 2.0 && secs < 1800.0,
                format!(
                    "best mean {}, lowest std {}, std reduction {:.2}x, pipeline {secs:.0}s",
                    rep.best_mean, rep.lowest_std, rep.std_reduction
                ),
            ),
        }
    });

    let mut failed = 0;
    for (id, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{id:>2}] {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
