//! Command-line front end for the simulator: single runs, scenario sweeps and
//! dataset dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use metafl::aggregators::max_krum_f;
use metafl::datagen::write_samples;
use metafl::{run_experiment, ExperimentConfig, MetricsLog, Mode, Overrides, Rule, RunSummary, Scenario, Scheme, Topology, World};
use rayon::prelude::*;
use serde::Serialize;

pub const OUT_DIR_ENV: &str = "METAFL_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "metafl-out";

#[derive(Debug, Parser)]
#[command(name = "metafl", version, about = "Backdoor attacks against FL and Meta-FL, simulated")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment; writes metrics.csv and summary.json.
    Run(RunArgs),
    /// Run every scenario x mode x rule cell; writes one CSV per cell and summary.csv.
    /// Cells use the replacement attack unless a scheme other than none is configured.
    Sweep(SweepArgs),
    /// Print the fully resolved configuration as TOML.
    Config(CommonArgs),
    /// Write the generated train split, or one client's shard, as text.
    DumpData(DumpArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file; built-in defaults when omitted.
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $METAFL_OUT_DIR, then ./metafl-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// mfl-<cohorts>-<size> or fl-<size>.
    #[arg(long)]
    pub topology: Option<Topology>,
    /// attack-<frequency>-<k>.
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub rule: Option<Rule>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Train all clients each round and log the cohort-variance ratio.
    #[arg(long)]
    pub instrument: bool,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated attack scenarios.
    #[arg(long, value_delimiter = ',', default_value = "attack-1-3")]
    pub scenarios: Vec<Scenario>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,meta")]
    pub modes: Vec<Mode>,
    /// Comma-separated rules; defaults to the config's rule.
    #[arg(long, value_delimiter = ',')]
    pub rules: Vec<Rule>,
    #[arg(long, default_value = "mfl-15-5")]
    pub meta_topology: Topology,
    #[arg(long, default_value = "fl-5")]
    pub baseline_topology: Topology,
}

#[derive(Debug, Args, Clone)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dump this client's shard instead of the whole train split.
    #[arg(long)]
    pub client: Option<usize>,
    /// Apply the configured poisoning to the dumped shard.
    #[arg(long, requires = "client")]
    pub poisoned: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: None,
            topology: self.topology,
            scenario: self.scenario,
            scheme: self.scheme,
            mode: self.mode,
            rule: self.rule,
            rounds: self.rounds,
            instrument: self.instrument.then_some(true),
        }
    }

    /// Loads the config file, applies flags and validates.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p),
            None => Ok(ExperimentConfig::default()),
        }
        .map_err(|e| Failure::Config(e.into()))?;
        cfg.apply(&self.overrides());
        cfg.output_dir = Some(self.out_dir(&cfg).display().to_string());
        cfg.validate().map_err(|e| Failure::Config(e.into()))?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

/// Writes `bytes` to `path` through a sibling temp file so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(())
}

fn csv_bytes(log: &MetricsLog) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    Ok(buf)
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display())).map_err(runtime)
}

pub fn run(args: &RunArgs) -> CliResult<PathBuf> {
    let cfg = args.common.resolve()?;
    let dir = PathBuf::from(cfg.output_dir.as_deref().unwrap_or(DEFAULT_OUT_DIR));
    let log = run_experiment(&cfg).map_err(runtime)?;
    prepare_dir(&dir)?;
    let csv_path = dir.join("metrics.csv");
    write_atomic(&csv_path, &csv_bytes(&log).map_err(runtime)?).map_err(runtime)?;
    let summary = RunSummary::new(&cfg, &log).to_json();
    write_atomic(&dir.join("summary.json"), summary.as_bytes()).map_err(runtime)?;
    Ok(csv_path)
}

/// One sweep cell's configuration.
#[derive(Debug, Clone)]
pub struct Cell {
    pub scenario: Scenario,
    pub mode: Mode,
    pub rule: Rule,
    pub config: ExperimentConfig,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.csv", self.scenario, self.mode, self.rule)
    }
}

/// Expands the sweep grid. Krum's `f` is lowered to the largest value the
/// cell's aggregand count admits.
pub fn sweep_cells(base: &ExperimentConfig, args: &SweepArgs) -> CliResult<Vec<Cell>> {
    if args.scenarios.is_empty() || args.modes.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!("a sweep needs at least one scenario and one mode")));
    }
    let rules = if args.rules.is_empty() { vec![base.aggregator.rule] } else { args.rules.clone() };
    let mut cells = Vec::new();
    for &scenario in &args.scenarios {
        for &mode in &args.modes {
            for &rule in &rules {
                let mut config = base.clone();
                config.attack.set_scenario(scenario);
                config.aggregator.rule = rule;
                match mode {
                    Mode::Meta => args.meta_topology,
                    Mode::Baseline => args.baseline_topology,
                }
                .apply(&mut config.fl);
                config.fl.mode = mode;
                if rule == Rule::Krum {
                    let n = config.fl.aggregands_per_round();
                    if let Some(f) = max_krum_f(n) {
                        config.aggregator.f = config.aggregator.f.min(f);
                    }
                }
                cells.push(Cell { scenario, mode, rule, config });
            }
        }
    }
    Ok(cells)
}

/// One row of summary.csv.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CellSummary {
    pub scenario: String,
    pub mode: Mode,
    pub topology: String,
    pub rule: Rule,
    pub krum_f: Option<usize>,
    pub seed: u64,
    pub status: String,
    pub final_accuracy: Option<f64>,
    pub final_attack_success: Option<f64>,
    pub file: String,
    pub error: String,
}

fn run_cell(cell: &Cell, dir: &Path) -> CellSummary {
    let cfg = &cell.config;
    let mut row = CellSummary {
        scenario: cell.scenario.to_string(),
        mode: cell.mode,
        topology: cfg.topology().to_string(),
        rule: cell.rule,
        krum_f: (cell.rule == Rule::Krum).then_some(cfg.aggregator.f),
        seed: cfg.seed,
        status: "ok".into(),
        final_accuracy: None,
        final_attack_success: None,
        file: cell.file_name(),
        error: String::new(),
    };
    let result = cfg
        .validate()
        .and_then(|_| run_experiment(cfg))
        .map_err(anyhow::Error::from)
        .and_then(|log| {
            write_atomic(&dir.join(cell.file_name()), &csv_bytes(&log)?)?;
            Ok(log)
        });
    match result {
        Ok(log) => {
            row.final_accuracy = log.last().map(|r| r.accuracy);
            row.final_attack_success = log.last().map(|r| r.attack_success);
        }
        Err(e) => {
            row.status = "failed".into();
            row.error = format!("{e:#}");
        }
    }
    row
}

/// Runs every cell; failed cells are reported in the summary and do not stop
/// the sweep.
pub fn sweep(args: &SweepArgs) -> CliResult<(PathBuf, Vec<CellSummary>)> {
    let mut base = match &args.common.config {
        Some(p) => ExperimentConfig::from_path(p),
        None => Ok(ExperimentConfig::default()),
    }
    .map_err(|e| Failure::Config(e.into()))?;
    base.apply(&args.common.overrides());
    if base.attack.scheme == Scheme::None {
        base.attack.scheme = Scheme::Replacement;
    }
    let dir = args.common.out_dir(&base);
    base.output_dir = None;
    let cells = sweep_cells(&base, args)?;
    prepare_dir(&dir)?;
    let rows: Vec<CellSummary> = cells.par_iter().map(|c| run_cell(c, &dir)).collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(|e| runtime(anyhow::anyhow!("{e}")))?;
    let path = dir.join("summary.csv");
    write_atomic(&path, &bytes).map_err(runtime)?;
    Ok((path, rows))
}

pub fn dump_data(args: &DumpArgs) -> CliResult<PathBuf> {
    let cfg = args.common.resolve()?;
    let dir = PathBuf::from(cfg.output_dir.as_deref().unwrap_or(DEFAULT_OUT_DIR));
    let world = World::build(&cfg).map_err(runtime)?;
    let (name, samples) = match args.client {
        None => ("train.txt".to_string(), world.trainer.shards.iter().flat_map(|s| s.samples.clone()).collect::<Vec<_>>()),
        Some(id) => {
            let shard = world
                .trainer
                .shards
                .get(id)
                .ok_or_else(|| Failure::Config(anyhow::anyhow!("client {id} does not exist ({} clients)", cfg.fl.clients)))?;
            if args.poisoned {
                let a = &cfg.attack;
                let p = metafl::datagen::build_poisoned_shard(shard, a.base_label, a.target_label, a.poison_fraction, &a.trigger, cfg.seed)
                    .map_err(runtime)?;
                (format!("client_{id}_poisoned.txt"), p.samples)
            } else {
                (format!("client_{id}.txt"), shard.samples.clone())
            }
        }
    };
    let mut buf = Vec::new();
    write_samples(&samples, &mut buf).map_err(runtime)?;
    prepare_dir(&dir)?;
    let path = dir.join(name);
    write_atomic(&path, &buf).map_err(runtime)?;
    Ok(path)
}

/// Parses `argv` and executes; returns the process exit code.
pub fn main_with<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a).map(|p| println!("wrote {}", p.display())),
        Command::Sweep(a) => sweep(a).map(|(p, rows)| {
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("wrote {} ({} cells, {failed} failed)", p.display(), rows.len());
        }),
        Command::Config(a) => a.resolve().map(|c| print!("{}", c.to_toml_string())),
        Command::DumpData(a) => dump_data(a).map(|p| println!("wrote {}", p.display())),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.exit_code()
        }
    }
}
