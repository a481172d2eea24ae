//! The `alforge` command line.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use alforge_core::corpus::{generate_world, load_world, persist_world, World, WorldConfig};
use alforge_core::detector::bridge::{check_adapter, BridgeDetector};
use alforge_core::detector::{Detector, SimulatedDetector};
use alforge_core::engine::{load_report, reevaluate_iteration, run_into, Engine, RunConfig, RunMode, RunReport};
use alforge_core::oracle::{Annotator, HumanAnnotator, JobStore, OracleMode, SyntheticAnnotator, SystemClock};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::http_bridge::AnyTransport;
use crate::report::{metrics_table, training_table, trend_svg, trend_text};
use crate::service::{self, ServiceState};

pub const WORLD_FILE: &str = "world.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "alforge",
    version,
    about = "Active learning for sign detection on tiled panoramas"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and write its manifest.
    GenWorld(GenWorldArgs),
    /// Run the active-learning loop on a generated world.
    Run(RunArgs),
    /// Recompute one iteration's test metrics from a run directory.
    Eval(EvalArgs),
    /// Print the metrics table and trend plots of a run.
    Report(ReportArgs),
    /// Run with the human oracle, serving the job API to annotators.
    Serve(RunArgs),
    /// Check that a detector adapter speaks the bridge protocol.
    BridgeCheck(BridgeCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long, default_value_t = 200)]
    pub panoramas: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    pub prevalence: f64,
    #[arg(long, default_value_t = 0.5)]
    pub distractor_rate: f64,
    #[arg(long, default_value_t = 1.5)]
    pub distractors_per_sign: f64,
    #[arg(long, default_value_t = 13_312)]
    pub width: u32,
    #[arg(long, default_value_t = 6_656)]
    pub height: u32,
    #[arg(long, default_value_t = 1050)]
    pub tile: u32,
    /// Defaults to the tile size.
    #[arg(long)]
    pub stride: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Active,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Synthetic,
    Human,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Directory written by gen-world.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Active)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    #[arg(long, default_value_t = 7)]
    pub iterations: u32,
    /// High, low and none bucket shares of the budget.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.6,0.2")]
    pub proportions: Vec<f64>,
    /// Share of the low-bucket quota taken from the top of the bucket.
    #[arg(long, default_value_t = 0.5)]
    pub low_top_share: f64,
    #[arg(long, value_enum, default_value_t = OracleArg::Synthetic)]
    pub oracle: OracleArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.15)]
    pub initial_fraction: f64,
    #[arg(long, default_value_t = 0.6)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.8)]
    pub high_threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    pub low_threshold: f64,
    #[arg(long, default_value_t = 0.01)]
    pub pre_filter_conf: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 0.3)]
    pub final_conf: f64,
    #[arg(long, default_value_t = 0.5)]
    pub match_iou: f64,
    /// 0 disables the plateau stop.
    #[arg(long, default_value_t = 0.01)]
    pub plateau_epsilon: f64,
    #[arg(long, default_value_t = 2)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 0.0)]
    pub review_error_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub box_jitter: f64,
    /// Lease timeout for human jobs, in seconds.
    #[arg(long, default_value_t = 300)]
    pub lease_timeout: u64,
    /// External detector adapter: a shell command (stdio) or an http(s) URL.
    /// The built-in simulator is used when absent.
    #[arg(long)]
    pub detector: Option<String>,
    /// Port for the job API in human mode; 0 picks a free port.
    #[arg(long, env = "ALFORGE_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub iteration: u32,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the trend chart; defaults to RUN/trends.svg.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BridgeCheckArgs {
    /// Shell command or http(s) URL of the adapter.
    #[arg(long)]
    pub adapter: String,
    /// Scratch directory for the conformance manifest.
    #[arg(long)]
    pub workdir: Option<PathBuf>,
}

impl RunArgs {
    pub fn run_config(&self, world: &WorldConfig) -> Result<RunConfig> {
        let mut cfg = RunConfig {
            world: world.clone(),
            seed: self.seed,
            ..Default::default()
        };
        cfg.mode = match self.mode {
            ModeArg::Active => RunMode::Active,
            ModeArg::Random => RunMode::RandomBaseline,
        };
        cfg.plan.budget = self.budget;
        let p = &self.proportions;
        if p.len() != 3 {
            bail!("--proportions takes three comma-separated values");
        }
        cfg.plan.proportions = [p[0], p[1], p[2]];
        cfg.plan.low_top_share = self.low_top_share;
        cfg.max_iterations = self.iterations;
        cfg.initial_fraction = self.initial_fraction;
        cfg.train_ratio = self.train_ratio;
        cfg.thresholds.high_above = self.high_threshold;
        cfg.thresholds.low_floor = self.low_threshold;
        cfg.nms.pre_filter_conf = self.pre_filter_conf;
        cfg.nms.nms_iou = self.nms_iou;
        cfg.nms.final_conf = self.final_conf;
        cfg.match_iou = self.match_iou;
        cfg.plateau_epsilon = self.plateau_epsilon;
        cfg.plateau_patience = self.plateau_patience;
        cfg.oracle.mode = match self.oracle {
            OracleArg::Synthetic => OracleMode::Synthetic,
            OracleArg::Human => OracleMode::Human,
        };
        cfg.oracle.review_error_rate = self.review_error_rate;
        cfg.oracle.box_jitter = self.box_jitter;
        cfg.oracle.lease_timeout_secs = self.lease_timeout;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn gen_world(args: &GenWorldArgs) -> Result<World> {
    let cfg = WorldConfig {
        n_panoramas: args.panoramas,
        panorama_width: args.width,
        panorama_height: args.height,
        tile_size: args.tile,
        stride: args.stride.unwrap_or(args.tile),
        sign_prevalence: args.prevalence,
        distractor_rate: args.distractor_rate,
        distractors_per_sign: args.distractors_per_sign,
        seed: args.seed,
        ..Default::default()
    };
    let world = generate_world(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    persist_world(&world, &args.out.join(WORLD_FILE))?;
    Ok(world)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!(
                "run directory {} is not empty; pass --force to replace it",
                out.display()
            );
        }
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    Ok(())
}

/// Execute a run. With the human oracle, the job API is served for the
/// duration of the run and `on_serve` receives its base URL.
pub fn run(args: &RunArgs, on_serve: impl FnOnce(&str)) -> Result<RunReport> {
    let world = load_world(&args.world.join(WORLD_FILE))
        .with_context(|| format!("loading world from {}", args.world.display()))?;
    let cfg = args.run_config(&world.config)?;
    prepare_out(&args.out, args.force)?;
    fs::create_dir_all(&args.out)?;

    let detector: Box<dyn Detector> = match &args.detector {
        None => Box::new(SimulatedDetector::new(cfg.sim, cfg.seed)),
        Some(cmd) => {
            let bridge_dir = args.out.join("bridge");
            fs::create_dir_all(&bridge_dir)?;
            let transport = AnyTransport::open(cmd)?;
            Box::new(BridgeDetector::connect(
                transport,
                cfg.seed,
                bridge_dir.join("manifest.jsonl"),
            )?)
        }
    };

    let mut service = None;
    let annotator: Box<dyn Annotator> = match cfg.oracle.mode {
        OracleMode::Synthetic => Box::new(SyntheticAnnotator {
            cfg: cfg.oracle,
            seed: cfg.seed,
        }),
        OracleMode::Human => {
            let store = Arc::new(JobStore::new(
                Arc::new(SystemClock),
                Duration::from_secs(cfg.oracle.lease_timeout_secs),
            ));
            let listener = TcpListener::bind((args.host.as_str(), args.port))
                .with_context(|| format!("binding {}:{}", args.host, args.port))?;
            let handle = service::spawn(
                listener,
                ServiceState {
                    store: store.clone(),
                    world: Arc::new(world.clone()),
                },
            )?;
            on_serve(&handle.url());
            service = Some(handle);
            Box::new(HumanAnnotator::new(store))
        }
    };

    let mut engine = Engine::new(cfg, world, detector, annotator)?;
    let report = run_into(&mut engine, &args.out)?;
    if let Some(h) = service {
        h.stop()?;
    }
    Ok(report)
}

pub fn report_text(report: &RunReport) -> String {
    format!(
        "{}\n{}\n{}",
        metrics_table(report),
        training_table(report),
        trend_text(report)
    )
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(a) => {
            let w = gen_world(&a)?;
            let positives = w.images.iter().filter(|r| r.is_positive()).count();
            println!(
                "wrote {} tiles ({} with signs, {} signs) to {}",
                w.images.len(),
                positives,
                w.total_gt(),
                a.out.join(WORLD_FILE).display()
            );
        }
        Command::Run(a) => {
            let r = run(&a, |url| eprintln!("job api listening on {url}"))?;
            println!(
                "{} iterations, stopped: {:?}; results in {}",
                r.iterations.len(),
                r.stop_reason,
                a.out.display()
            );
        }
        Command::Serve(mut a) => {
            a.oracle = OracleArg::Human;
            let r = run(&a, |url| eprintln!("job api listening on {url}"))?;
            println!("{} iterations, stopped: {:?}", r.iterations.len(), r.stop_reason);
        }
        Command::Eval(a) => {
            let m = reevaluate_iteration(&a.run, a.iteration)?;
            if a.json {
                println!("{}", serde_json::to_string(&m)?);
            } else {
                println!(
                    "iteration {}: tp={} fn={} fp={} tpr={:.4} precision={:.4} f_score={:.4} mean_iou={:.4}",
                    m.iteration, m.tp, m.fn_, m.fp, m.tpr, m.precision, m.f_score, m.mean_iou
                );
            }
        }
        Command::Report(a) => {
            let r = load_report(&a.run)?;
            print!("{}", report_text(&r));
            let svg = a.svg.unwrap_or_else(|| a.run.join("trends.svg"));
            fs::write(&svg, trend_svg(&r)).with_context(|| format!("writing {}", svg.display()))?;
        }
        Command::BridgeCheck(a) => {
            let tmp;
            let workdir = match &a.workdir {
                Some(d) => d.clone(),
                None => {
                    tmp = std::env::temp_dir().join(format!("alforge-bridge-check-{}", std::process::id()));
                    tmp
                }
            };
            fs::create_dir_all(&workdir)?;
            let result = AnyTransport::open(&a.adapter).and_then(|t| check_adapter(t, &workdir));
            if a.workdir.is_none() {
                let _ = fs::remove_dir_all(&workdir);
            }
            let report = result?;
            for step in &report.steps {
                println!("ok  {step}");
            }
            println!("adapter {:?} conforms to the bridge protocol", report.adapter);
        }
    }
    Ok(())
}
