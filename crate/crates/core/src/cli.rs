//! Command-line front end: `gen`, `truth`, `bench` and `report`.
//!
//! Bench settings resolve in the order command-line flag, `--config` file,
//! `PROXMMR_SEED` (seed only), built-in default.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{parse_methods, Method};
use crate::eval::{
    self, demand_grid, fmt_f64, noise_levels, read_records_csv, summarize, write_curves_csv,
    write_records_csv, write_summary_csv, write_timings_csv, BenchPlan, NoiseLevel, SummaryRow,
    TrainOverrides, TRUTH_SEED,
};
use crate::report::boxplot_svg;
use crate::scm::{
    demand_ground_truth, demand_sample, sprite_sample, sprite_test_grid, Dataset, DemandConfig,
    Experiment, SpriteConfig, SpriteWorld, DEMAND_TRUTH_MC,
};

pub const SEED_ENV: &str = "PROXMMR_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "proxmmr",
    version,
    about = "Proxy causal inference benchmarks with neural maximum moment restriction estimators"
)]
pub struct Cli {
    /// Worker threads for bench [default: available parallelism]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from a structural causal model and write it as CSV
    Gen(GenArgs),
    /// Write the ground-truth potential-outcome curve as CSV
    Truth(TruthArgs),
    /// Fit methods over replicates and write records and summary CSVs
    Bench(BenchArgs),
    /// Summarize a records CSV and optionally draw an SVG box plot
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Structural model: demand or sprite
    #[arg(long, default_value = "demand")]
    pub scm: Experiment,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Random seed
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Variance of each treatment-proxy noise term (demand)
    #[arg(long, default_value_t = 1.0)]
    pub var_z: f64,
    /// Variance of the outcome-proxy noise term (demand)
    #[arg(long, default_value_t = 1.0)]
    pub var_w: f64,
    /// Seed of the sprite outcome matrix
    #[arg(long, default_value_t = SpriteConfig::new(1, 0).b_seed)]
    pub b_seed: u64,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TruthArgs {
    /// Structural model: demand or sprite
    #[arg(long, default_value = "demand")]
    pub scm: Experiment,
    /// Monte Carlo draws per grid point (demand)
    #[arg(long, default_value_t = DEMAND_TRUTH_MC)]
    pub mc: usize,
    /// Monte Carlo seed (demand)
    #[arg(long, default_value_t = TRUTH_SEED)]
    pub seed: u64,
    /// Variance of the outcome-proxy noise term (demand)
    #[arg(long, default_value_t = 1.0)]
    pub var_w: f64,
    /// Seed of the sprite outcome matrix
    #[arg(long, default_value_t = SpriteConfig::new(1, 0).b_seed)]
    pub b_seed: u64,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Benchmark: demand or sprite [default: demand]
    #[arg(long)]
    pub experiment: Option<Experiment>,
    /// Training sample size [default: 1000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated methods: nmmr-u,nmmr-v,naive,ls,ls-qf,2sls [default: all for demand, nmmr-u,nmmr-v,naive for sprite]
    #[arg(long)]
    pub methods: Option<String>,
    /// Replicates per method and noise cell [default: 20]
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Base seed [default: $PROXMMR_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run every cell of the 9 x 8 demand noise grid [default: false]
    #[arg(long)]
    pub noise_grid: bool,
    /// Output directory [default: bench-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Learning rate [default: tuned per method]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight penalty coefficient [default: tuned per method]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Training epochs [default: tuned per method]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: tuned per method]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden layer width [default: tuned per method]
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of affine layers [default: tuned per method]
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Records CSV written by bench
    #[arg(long)]
    pub records: PathBuf,
    /// Summary CSV output path [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional SVG box plot output path
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Bench configuration file. Absent fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub methods: Option<Vec<Method>>,
    pub n_train: Option<usize>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub noise_grid: Option<bool>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainOverrides,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved bench settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedBench {
    pub plan: BenchPlan,
    pub out_dir: PathBuf,
}

fn default_methods(experiment: Experiment) -> Vec<Method> {
    match experiment {
        Experiment::Demand => Method::ALL.to_vec(),
        Experiment::Sprite => vec![Method::NmmrU, Method::NmmrV, Method::Naive],
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an integer"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve_bench(args: &BenchArgs, jobs: Option<usize>) -> Result<ResolvedBench> {
    let file = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let experiment = args
        .experiment
        .or(file.experiment)
        .unwrap_or(Experiment::Demand);
    let methods = match &args.methods {
        Some(list) => parse_methods(list)?,
        None => file
            .methods
            .clone()
            .unwrap_or_else(|| default_methods(experiment)),
    };
    let seed = match args.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let noise_grid = args.noise_grid || file.noise_grid.unwrap_or(false);
    if noise_grid && experiment != Experiment::Demand {
        return Err(Error::Config(
            "the noise grid is defined for the demand experiment only".into(),
        ));
    }
    let t = file.train;
    let overrides = TrainOverrides {
        lr: args.lr.or(t.lr),
        lambda: args.lambda.or(t.lambda),
        epochs: args.epochs.or(t.epochs),
        batch_size: args.batch_size.or(t.batch_size),
        width: args.width.or(t.width),
        depth: args.depth.or(t.depth),
    };
    let plan = BenchPlan::new(
        experiment,
        methods,
        args.n.or(file.n_train).unwrap_or(1000),
        args.replicates.or(file.replicates).unwrap_or(20),
        seed,
    )
    .with_noise(if noise_grid {
        noise_levels()
    } else {
        vec![NoiseLevel::DEFAULT]
    })
    .with_overrides(overrides)
    .with_jobs(jobs.unwrap_or(0));
    let out_dir = args
        .out
        .clone()
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("bench-out"));
    Ok(ResolvedBench { plan, out_dir })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::Io(io::Error::new(
            e.kind(),
            format!("cannot create {}: {e}", path.display()),
        ))
    })?))
}

fn write_dataset(
    data: &Dataset,
    experiment: Experiment,
    comment: &str,
    out: impl Write,
) -> Result<()> {
    let mut out = out;
    writeln!(out, "# {comment}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(data.csv_header(experiment))?;
    for i in 0..data.len() {
        w.write_record(data.csv_row(i).into_iter().map(fmt_f64))?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let (data, comment) = match args.scm {
        Experiment::Demand => {
            let cfg = DemandConfig::new(args.n, args.seed).with_noise(args.var_z, args.var_w);
            let comment = format!(
                "proxmmr gen scm=demand n={} seed={} var_z={} var_w={}",
                args.n,
                args.seed,
                fmt_f64(args.var_z),
                fmt_f64(args.var_w)
            );
            (demand_sample(&cfg)?, comment)
        }
        Experiment::Sprite => {
            let cfg = SpriteConfig {
                b_seed: args.b_seed,
                ..SpriteConfig::new(args.n, args.seed)
            };
            let world = SpriteWorld::new(cfg.d, cfg.b_seed)?;
            let comment = format!(
                "proxmmr gen scm=sprite n={} seed={} d={} b_seed={} pixel_noise_std={} outcome_noise_std={}",
                args.n,
                args.seed,
                cfg.d,
                cfg.b_seed,
                fmt_f64(cfg.pixel_noise_std),
                fmt_f64(cfg.outcome_noise_std)
            );
            (sprite_sample(&world, &cfg)?, comment)
        }
    };
    let mut out = create(&args.out)?;
    write_dataset(&data, args.scm, &comment, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn cmd_truth(args: &TruthArgs) -> Result<()> {
    let mut out = create(&args.out)?;
    match args.scm {
        Experiment::Demand => {
            let truth = demand_ground_truth(&demand_grid(), args.mc, args.seed, args.var_w)?;
            writeln!(
                out,
                "# proxmmr truth scm=demand mc={} seed={} var_w={}",
                args.mc,
                args.seed,
                fmt_f64(args.var_w)
            )?;
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["a_value", "ey_a", "mc_se"])?;
            let se = truth.std_err.as_ref();
            for i in 0..truth.grid.rows() {
                w.write_record([
                    fmt_f64(truth.grid[(i, 0)]),
                    fmt_f64(truth.values[(i, 0)]),
                    se.map(|s| fmt_f64(s[(i, 0)])).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
        }
        Experiment::Sprite => {
            let d = SpriteConfig::new(1, 0).d;
            let world = SpriteWorld::new(d, args.b_seed)?;
            let images = eval::sprite_grid_images(d)?;
            let values = world.structural(&images)?;
            writeln!(
                out,
                "# proxmmr truth scm=sprite d={d} b_seed={} exact",
                args.b_seed
            )?;
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record([
                "a_index", "scale", "rotation", "pos_x", "pos_y", "ey_a", "mc_se",
            ])?;
            for (i, (p, v)) in sprite_test_grid().into_iter().zip(values).enumerate() {
                w.write_record([
                    i.to_string(),
                    fmt_f64(p.scale),
                    fmt_f64(p.rotation),
                    fmt_f64(p.pos_x),
                    fmt_f64(p.pos_y),
                    fmt_f64(v),
                    "0".to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    out.flush()?;
    Ok(())
}

fn print_summary(rows: &[SummaryRow], out: &mut impl Write) -> Result<()> {
    writeln!(
        out,
        "{:<8} {:>7} {:>7} {:>7} {:>12} {:>12} {:>6} {:>8}",
        "method", "n", "var_z", "var_w", "median", "iqr", "count", "failed"
    )?;
    for r in rows {
        let noise = |f: fn(&NoiseLevel) -> f64| {
            r.noise
                .as_ref()
                .map(f)
                .map(fmt_f64)
                .unwrap_or_else(|| "-".into())
        };
        let num = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<8} {:>7} {:>7} {:>7} {:>12} {:>12} {:>6} {:>8}",
            r.method.name(),
            r.n_train,
            noise(|n| n.var_z),
            noise(|n| n.var_w),
            num(r.median),
            num(r.iqr),
            r.count,
            r.failures
        )?;
    }
    Ok(())
}

/// Runs the benchmark and writes `records.csv`, `summary.csv` and
/// `curves.csv`, plus wall-clock `timings.csv`, under the output directory. Returns the number of
/// successful records.
pub fn cmd_bench(args: &BenchArgs, jobs: Option<usize>) -> Result<usize> {
    let resolved = resolve_bench(args, jobs)?;
    let plan = &resolved.plan;
    log::info!(
        "bench {} methods={:?} n={} replicates={} seed={} cells={}",
        plan.experiment,
        plan.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        plan.n_train,
        plan.replicates,
        plan.base_seed,
        plan.noise.len()
    );
    let records = eval::run(plan)?;
    let rows = summarize(&records)?;
    fs::create_dir_all(&resolved.out_dir)?;
    let dir = &resolved.out_dir;
    let mut f = create(&dir.join("records.csv"))?;
    write_records_csv(&records, &mut f)?;
    f.flush()?;
    let mut f = create(&dir.join("summary.csv"))?;
    write_summary_csv(&rows, &mut f)?;
    f.flush()?;
    let mut f = create(&dir.join("curves.csv"))?;
    write_curves_csv(&records, &mut f)?;
    f.flush()?;
    let mut f = create(&dir.join("timings.csv"))?;
    write_timings_csv(&records, &mut f)?;
    f.flush()?;
    print_summary(&rows, &mut io::stdout().lock())?;
    let ok = records.iter().filter(|r| r.c_mse.is_some()).count();
    if ok == 0 {
        return Err(Error::Training(format!(
            "all {} fits failed",
            records.len()
        )));
    }
    Ok(ok)
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let file = File::open(&args.records).map_err(|e| {
        Error::Io(io::Error::new(
            e.kind(),
            format!("cannot open {}: {e}", args.records.display()),
        ))
    })?;
    let records = read_records_csv(io::BufReader::new(file))?;
    let rows = summarize(&records)?;
    match &args.out {
        Some(path) => {
            let mut f = create(path)?;
            write_summary_csv(&rows, &mut f)?;
            f.flush()?;
        }
        None => write_summary_csv(&rows, io::stdout().lock())?,
    }
    if let Some(path) = &args.svg {
        let mut f = create(path)?;
        f.write_all(boxplot_svg(&records, None).as_bytes())?;
        f.flush()?;
    }
    Ok(())
}

/// Exit status for a parsed command line: 0 on success, 2 on failure.
pub fn run(cli: Cli) -> i32 {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Truth(a) => cmd_truth(a),
        Command::Bench(a) => cmd_bench(a, cli.jobs).map(|_| ()),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Parses `args` and runs. Usage errors exit 1, `--help` and `--version` exit 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            }
        }
    }
}
