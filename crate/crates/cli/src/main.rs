use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cbred_cli::{stages, with_threads, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "cbred", version, about = "Cluster-based reduction of cell search spaces")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// key=value configuration file, applied before flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    min_pts: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    regions_samples: Option<usize>,
    #[arg(long, global = true)]
    search_n: Option<usize>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    stats_file: Option<PathBuf>,
    #[arg(long, global = true)]
    acc_file: Option<PathBuf>,
    #[arg(long, global = true)]
    artifacts_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Quantile bucket (0-4, or `top`) evaluated by the baselines.
    #[arg(long, global = true)]
    baseline_bucket: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("eps", self.eps.map(|v| v.to_string())),
            ("min_pts", self.min_pts.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("regions_samples", self.regions_samples.map(|v| v.to_string())),
            ("search_n", self.search_n.map(|v| v.to_string())),
            ("runs", self.runs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("stats_file", path(&self.stats_file)),
            ("acc_file", path(&self.acc_file)),
            ("artifacts_dir", path(&self.artifacts_dir)),
            ("threads", self.threads.map(|v| v.to_string())),
            ("baseline_bucket", self.baseline_bucket.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate and deduplicate the cell space.
    Enumerate,
    /// Build the pairwise distance matrix.
    Distances,
    /// Cluster the space with DBSCAN.
    Cluster,
    /// Compute or ingest training-free statistics.
    Stats,
    /// Pick the best cluster and the quantile baselines.
    Select,
    /// Run the repeated NASWOT search on each subset.
    Evaluate,
    /// Render the comparison table.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Grid search over DBSCAN parameters on the current distances.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.04,0.06,0.08,0.1,0.15,0.2")]
        eps_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        min_pts_grid: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        max_noise: f64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = cli.opts.resolve()?;
    let stages = match &cli.command {
        Command::Enumerate => vec![Stage::Enumerate],
        Command::Distances => vec![Stage::Distances],
        Command::Cluster => vec![Stage::Cluster],
        Command::Stats => vec![Stage::Stats],
        Command::Select => vec![Stage::Select],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Report => vec![Stage::Report],
        Command::Pipeline => Stage::ALL.to_vec(),
        Command::Sweep {
            eps_grid,
            min_pts_grid,
            max_noise,
        } => {
            let (_, _, text) =
                with_threads(cfg.threads, || stages::cmd_sweep(&cfg, eps_grid, min_pts_grid, *max_noise))??;
            print!("{text}");
            return Ok(());
        }
    };
    for stage in stages {
        let msg = with_threads(cfg.threads, || stages::run_stage(&cfg, stage))?
            .with_context(|| format!("stage `{}` failed", stage.name()))?;
        println!("[{}] {}", stage.name(), msg.trim_end());
    }
    Ok(())
}
