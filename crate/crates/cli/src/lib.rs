//! `edgecell` command-line driver: training, evaluation, benchmarks,
//! oracle checks and plots. Every output file carries the hash of the
//! resolved configuration.

pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use edgecell_core::engine::{self, BenchRow, BenchSpec, EngineError, EpisodeMetrics, SimConfig};
use edgecell_core::jsord::{self, random::InstanceShape, JsordError, OrchestrationSet, ORACLE_MAX_PAIRS};
use edgecell_core::lp::{self, oracle::vertex_enumeration};
use edgecell_core::nmac::{self, BaselineKind, Checkpoint, CriticMode, NmacError, Policy};
use edgecell_core::workload::derive_seed;

#[derive(Debug, Parser)]
#[command(name = "edgecell", version, about = "Edge-cloud resource cell simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true, env = "EDGECELL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Run seed, overriding the configuration.
    #[arg(long, global = true, env = "EDGECELL_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "EDGECELL_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, env = "EDGECELL_EPISODES")]
    pub episodes: Option<u64>,
    /// For `run`: train or eval.
    #[arg(long, global = true, value_enum, env = "EDGECELL_MODE")]
    pub mode: Option<ModeArg>,
    /// random, static_half or independent.
    #[arg(long, global = true, env = "EDGECELL_BASELINE")]
    pub baseline: Option<String>,
    /// Leave wall-clock times and creation stamps out of outputs.
    #[arg(long, global = true, env = "EDGECELL_NO_TIMESTAMP")]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Tiny,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train agents offline and save checkpoints.
    Train {
        /// Also save a checkpoint every N episodes (0 disables).
        #[arg(long, default_value_t = 50)]
        checkpoint_every: u64,
    },
    /// Evaluate a checkpoint or a fixed baseline.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// `train` or `eval` chosen by `--mode`.
    Run {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Channelized versus monolithic orchestration runtime.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "10")]
        nodes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "18")]
        services: Vec<usize>,
        /// Cells per instance; defaults to six per channel.
        #[arg(long)]
        cells: Option<usize>,
    },
    /// Render SVG charts from metrics or bench CSV files.
    Plot { files: Vec<PathBuf> },
    /// Compare greedy orchestration and the LP solver against exhaustive oracles.
    OracleCheck {
        #[arg(long, default_value_t = 500)]
        count: u64,
        /// Largest number of services per instance.
        #[arg(long, default_value_t = 3)]
        services: usize,
        /// Largest number of cells per instance.
        #[arg(long, default_value_t = 4)]
        cells: usize,
        #[arg(long, default_value_t = 3)]
        nodes: usize,
    },
    /// Write a configuration file to start from.
    Config {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config file {0} not found")]
    MissingConfig(PathBuf),
    #[error("config {path}: {message}")]
    BadConfig { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}: no rows")]
    NoRows(PathBuf),
    #[error("oracle check failed: {0}")]
    OracleFailed(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Nmac(#[from] NmacError),
    #[error(transparent)]
    Jsord(#[from] JsordError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingConfig(_) | Self::BadConfig { .. } | Self::Usage(_) => 2,
            Self::Engine(EngineError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Reads the configuration (or the defaults) and applies overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<(SimConfig, String), CliError> {
    let (mut cfg, path) = match &global.config {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingConfig(p.clone()));
            }
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let cfg: SimConfig = serde_json::from_str(&text).map_err(|e| CliError::BadConfig {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            (cfg, p.display().to_string())
        }
        None => (SimConfig::default(), "<defaults>".to_string()),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::BadConfig {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok((cfg, path))
}

pub fn config_hash(cfg: &SimConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config_path: &'a str,
    config_hash: &'a str,
    seed: u64,
    world_seed: u64,
    out: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_unix: Option<u64>,
}

struct Context {
    cfg: SimConfig,
    path: String,
    hash: String,
    out: PathBuf,
    no_timestamp: bool,
}

impl Context {
    fn new(global: &GlobalArgs) -> Result<Self, CliError> {
        let (cfg, path) = resolve_config(global)?;
        let hash = config_hash(&cfg);
        fs::create_dir_all(&global.out).map_err(|e| io_err(&global.out, e))?;
        Ok(Self {
            cfg,
            path,
            hash,
            out: global.out.clone(),
            no_timestamp: global.no_timestamp,
        })
    }

    fn manifest(&self, subcommand: &'static str) -> RunManifest<'_> {
        RunManifest {
            subcommand,
            config_path: &self.path,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            world_seed: self.cfg.world_seed,
            out: self.out.display().to_string(),
            created_unix: (!self.no_timestamp).then(now_unix),
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.out.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    fn write_metrics(&self, rows: &[EpisodeMetrics]) -> Result<PathBuf, CliError> {
        let rows: Vec<EpisodeMetrics> = rows
            .iter()
            .map(|r| EpisodeMetrics {
                wall_ms: if self.no_timestamp { 0.0 } else { r.wall_ms },
                ..r.clone()
            })
            .collect();
        let csv = engine::metrics_csv(&rows, self.cfg.channels(), &[("config_hash", self.hash.clone())]);
        self.write("metrics.csv", &csv)
    }

    fn write_summary(&self, subcommand: &'static str, rows: &[EpisodeMetrics]) -> Result<(), CliError> {
        let n = rows.len().max(1) as f64;
        let summary = serde_json::json!({
            "manifest": self.manifest(subcommand),
            "config": self.cfg,
            "episodes": rows.len(),
            "vacuous_episodes": rows.iter().filter(|r| r.vacuous).map(|r| r.episode).collect::<Vec<_>>(),
            "mean_reward": rows.iter().map(|r| r.reward_mean).sum::<f64>() / n,
            "mean_throughput_rate": rows.iter().map(|r| r.throughput_rate).sum::<f64>() / n,
            "mean_horizontal_share": rows.iter().map(|r| r.horizontal_share).sum::<f64>() / n,
        });
        self.write("summary.json", &serde_json::to_string_pretty(&summary).expect("json"))?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn parse_baseline(s: &str) -> Result<BaselineKind, CliError> {
    s.parse().map_err(CliError::Usage)
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    match cli.command {
        Command::Train { checkpoint_every } => cmd_train(&g, checkpoint_every),
        Command::Eval { checkpoint } => cmd_eval(&g, checkpoint),
        Command::Run { checkpoint } => match g.mode {
            Some(ModeArg::Train) => cmd_train(&g, 50),
            Some(ModeArg::Eval) => cmd_eval(&g, checkpoint),
            None => Err(CliError::Usage("run needs --mode train|eval".into())),
        },
        Command::Bench { nodes, services, cells } => cmd_bench(&g, &nodes, &services, cells),
        Command::Plot { files } => plot::cmd_plot(&files, &g.out, g.no_timestamp),
        Command::OracleCheck {
            count,
            services,
            cells,
            nodes,
        } => cmd_oracle_check(&g, count, services, cells, nodes),
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => SimConfig::default(),
                Preset::Tiny => SimConfig::reference_tiny(),
            };
            fs::create_dir_all(&g.out).map_err(|e| io_err(&g.out, e))?;
            let p = g.out.join("config.json");
            fs::write(&p, serde_json::to_string_pretty(&cfg).expect("json")).map_err(|e| io_err(&p, e))?;
            println!("wrote {}", p.display());
            Ok(())
        }
    }
}

fn cmd_train(g: &GlobalArgs, checkpoint_every: u64) -> Result<(), CliError> {
    let mut ctx = Context::new(g)?;
    if let Some(b) = &g.baseline {
        match parse_baseline(b)? {
            BaselineKind::Independent => ctx.cfg.training.critic_mode = CriticMode::Independent,
            other => return Err(CliError::Usage(format!("{other:?} is not trainable"))),
        }
        ctx.hash = config_hash(&ctx.cfg);
    }
    let episodes = g.episodes.unwrap_or(300);
    let dir = ctx.out.join("checkpoints");
    if checkpoint_every > 0 {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let (nmac, rows) = engine::train_with(&ctx.cfg, episodes, |ep, n| {
        if checkpoint_every > 0 && (ep + 1) % checkpoint_every == 0 {
            n.checkpoint().save(&dir.join(format!("ep{:05}.json", ep + 1)))?;
        }
        Ok(())
    })?;
    nmac.checkpoint().save(&ctx.out.join("checkpoint.json"))?;
    let p = ctx.write_metrics(&rows)?;
    ctx.write_summary("train", &rows)?;
    println!("trained {episodes} episodes; metrics in {}", p.display());
    Ok(())
}

fn cmd_eval(g: &GlobalArgs, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let ctx = Context::new(g)?;
    let episodes = g.episodes.unwrap_or(10);
    let mut policy: Box<dyn Policy> = match (&checkpoint, &g.baseline) {
        (Some(path), None) => {
            let ck = Checkpoint::load(path)?;
            let sim = engine::Simulator::new(ctx.cfg.clone())?;
            Box::new(ck.policy_for(sim.num_agents(), sim.state_dim())?)
        }
        (None, Some(b)) => nmac::baseline_policy(parse_baseline(b)?, derive_seed(ctx.cfg.seed, 6))
            .ok_or_else(|| {
                CliError::Usage("the independent baseline is evaluated from a checkpoint trained with --baseline independent".into())
            })?,
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --baseline".into())),
        (Some(_), Some(_)) => return Err(CliError::Usage("give --checkpoint or --baseline, not both".into())),
    };
    let rows = engine::evaluate(&ctx.cfg, policy.as_mut(), episodes)?;
    let p = ctx.write_metrics(&rows)?;
    ctx.write_summary("eval", &rows)?;
    println!("evaluated {episodes} episodes; metrics in {}", p.display());
    Ok(())
}

pub const BENCH_HEADER: &str = "mode,nodes,services,cells,channels,wall_ms,psi";

fn cmd_bench(g: &GlobalArgs, nodes: &[usize], services: &[usize], cells: Option<usize>) -> Result<(), CliError> {
    let ctx = Context::new(g)?;
    let channels = ctx.cfg.channels();
    let mut csv = format!("# config_hash: {}\n{BENCH_HEADER}\n", ctx.hash);
    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in nodes {
        for &s in services {
            let spec = BenchSpec {
                nodes: n,
                services: s,
                channels,
                cells: cells.unwrap_or(6 * channels),
                seed: ctx.cfg.seed,
            };
            for r in engine::run_bench(spec, &ctx.cfg)? {
                let wall = if ctx.no_timestamp { 0.0 } else { r.wall_ms };
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    r.mode, r.nodes, r.services, r.cells, r.channels, wall, r.psi
                );
                rows.push(r);
            }
        }
    }
    ctx.write("bench.csv", &csv)?;
    for pair in rows.chunks(2) {
        if let [c, m] = pair {
            let speedup = if c.wall_ms > 0.0 { m.wall_ms / c.wall_ms } else { f64::NAN };
            println!(
                "nodes {:>3} services {:>3}: channelized {:.1} ms, monolithic {:.1} ms, speedup {:.1}x",
                c.nodes, c.services, c.wall_ms, m.wall_ms, speedup
            );
        }
    }
    Ok(())
}

/// Outcome of [`oracle_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub count: u64,
    pub min_ratio: Option<f64>,
    pub mean_ratio: Option<f64>,
    pub worst_instance: Option<u64>,
    pub lp_max_gap: f64,
    pub lp_max_residual: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.min_ratio.is_none_or(|r| r >= 0.5) && self.lp_max_gap <= 1e-8
    }
}

/// Random small instances: greedy against the exhaustive optimum, and the
/// LP solver against vertex enumeration on instances of at most 8
/// variables.
pub fn oracle_check(
    count: u64,
    max_services: usize,
    max_cells: usize,
    max_nodes: usize,
    seed: u64,
) -> Result<OracleReport, CliError> {
    if max_services * max_cells > ORACLE_MAX_PAIRS {
        return Err(JsordError::TooLarge(max_services * max_cells).into());
    }
    if max_services == 0 || max_cells == 0 || max_nodes == 0 {
        return Err(CliError::Usage("sizes must be positive".into()));
    }
    let mut min_ratio: Option<(f64, u64)> = None;
    let mut sum = 0.0;
    let mut gap: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for k in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k));
        let shape = InstanceShape {
            services: rng.gen_range(1..=max_services),
            nodes: rng.gen_range(1..=max_nodes),
            cells: rng.gen_range(1..=max_cells),
        };
        let (inst, demand) = jsord::random::channel(&mut rng, shape);
        let (_, plan) = jsord::greedy_orchestrate(&inst, &demand)?;
        let (_, opt) = jsord::bruteforce_oracle(&inst, &demand)?;
        let ratio = if opt > 0.0 { plan.throughput_psi / opt } else { 1.0 };
        sum += ratio;
        if min_ratio.is_none_or(|(r, _)| ratio < r) {
            min_ratio = Some((ratio, k));
        }

        let lp_shape = loop {
            let s = InstanceShape {
                services: rng.gen_range(1..=2),
                nodes: rng.gen_range(1..=2),
                cells: rng.gen_range(1..=3),
            };
            if s.services * s.nodes * s.cells <= 8 {
                break s;
            }
        };
        let (small, d) = jsord::random::channel(&mut rng, lp_shape);
        let mut set = OrchestrationSet::empty(small.channel_id);
        for s in &small.services {
            for c in &small.cells {
                if rng.gen_bool(0.6) {
                    set.pairs.insert((s.key(), c.cell_id));
                }
            }
        }
        let program = jsord::build_dispatch_lp(&small, &set, &d);
        let sol = lp::solve_lp(&program).map_err(JsordError::from)?;
        if let Some((best, _)) = vertex_enumeration(&program) {
            gap = gap.max((sol.objective_value - best).abs());
        }
        let (rv, bv) = program.max_violation(&sol.y);
        residual = residual.max(rv).max(bv);
    }
    Ok(OracleReport {
        count,
        min_ratio: min_ratio.map(|(r, _)| r),
        mean_ratio: (count > 0).then(|| sum / count as f64),
        worst_instance: min_ratio.map(|(_, k)| k),
        lp_max_gap: gap,
        lp_max_residual: residual,
    })
}

fn cmd_oracle_check(g: &GlobalArgs, count: u64, services: usize, cells: usize, nodes: usize) -> Result<(), CliError> {
    let ctx = Context::new(g)?;
    let report = oracle_check(count, services, cells, nodes, ctx.cfg.seed)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "manifest": ctx.manifest("oracle-check"),
        "report": report,
    }))
    .expect("json");
    ctx.write("oracle_report.json", &text)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::OracleFailed(format!(
            "min ratio {:?}, lp gap {:e}",
            report.min_ratio, report.lp_max_gap
        )))
    }
}
