//! Causal MSE, replicate orchestration and summary statistics.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::estimators::{fit, Method, TrainConfig};
use crate::scm::{
    demand_ground_truth, demand_sample, noise_grid, render_glyph, sprite_sample, sprite_test_grid,
    DemandConfig, Experiment, SpriteConfig, SpriteWorld, DEMAND_TRUTH_MC,
};
use crate::tensor::Tensor;

/// Held-out `W` draws used to average the bridge function.
pub const HELDOUT_SIZE: usize = 1000;
/// Seed of the Demand Monte Carlo ground truth, shared by every run.
pub const TRUTH_SEED: u64 = 0x0074_7275_7468;
const HELDOUT_TAG: u64 = 0x4845_4c44 << 24;
const METHOD_TAG_SHIFT: u32 = 48;

/// Mean squared gap between a predicted and a true potential-outcome curve.
pub fn c_mse(predicted: &Tensor, truth: &Tensor) -> Result<f64> {
    if predicted.shape() != truth.shape() || predicted.cols() != 1 {
        return Err(dim_err!(
            "curves {:?} and {:?} differ",
            predicted.shape(),
            truth.shape()
        ));
    }
    if predicted.is_empty() {
        return Err(Error::Domain("c-MSE of empty curves".into()));
    }
    Ok(predicted.sub(truth)?.map(|d| d * d).mean())
}

/// Demand proxy noise variances `(σ²_Z, σ²_W)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub var_z: f64,
    pub var_w: f64,
}

impl NoiseLevel {
    pub const DEFAULT: NoiseLevel = NoiseLevel {
        var_z: 1.0,
        var_w: 1.0,
    };

    fn key(&self) -> (u64, u64) {
        (self.var_z.to_bits(), self.var_w.to_bits())
    }
}

/// Every cell of the 9 × 8 Demand noise grid.
pub fn noise_levels() -> Vec<NoiseLevel> {
    noise_grid()
        .into_iter()
        .map(|(var_z, var_w)| NoiseLevel { var_z, var_w })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Ok,
    Failed(String),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Ok => f.write_str("ok"),
            Status::Failed(msg) => write!(f, "failed: {msg}"),
        }
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ok" {
            Ok(Status::Ok)
        } else if let Some(msg) = s.strip_prefix("failed") {
            Ok(Status::Failed(
                msg.trim_start_matches(':').trim().to_string(),
            ))
        } else {
            Err(Error::Config(format!("unknown status '{s}'")))
        }
    }
}

/// Outcome of one (method, replicate, noise cell) fit.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub method: Method,
    pub n_train: usize,
    /// `None` for experiments without a proxy-noise setting.
    pub noise: Option<NoiseLevel>,
    pub replicate: usize,
    pub seed: u64,
    /// `None` exactly when the fit failed.
    pub c_mse: Option<f64>,
    pub predicted: Tensor,
    pub truth: Tensor,
    pub wall_s: f64,
    pub status: Status,
}

impl EvalRecord {
    fn group_key(&self) -> (Method, usize, Option<(u64, u64)>) {
        (self.method, self.n_train, self.noise.map(|n| n.key()))
    }
}

/// Optional replacements for the tuned training settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub width: Option<usize>,
    pub depth: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.width {
            cfg.width = v;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        cfg
    }
}

/// Everything that determines a benchmark run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchPlan {
    pub experiment: Experiment,
    pub methods: Vec<Method>,
    pub n_train: usize,
    pub replicates: usize,
    pub base_seed: u64,
    /// Demand noise cells; ignored for sprite.
    pub noise: Vec<NoiseLevel>,
    pub overrides: TrainOverrides,
    /// Worker threads; 0 uses the available parallelism.
    pub jobs: usize,
    pub heldout: usize,
    pub truth_mc: usize,
    /// Seed of the sprite outcome matrix.
    pub sprite_b_seed: u64,
}

impl BenchPlan {
    pub fn new(
        experiment: Experiment,
        methods: Vec<Method>,
        n_train: usize,
        replicates: usize,
        base_seed: u64,
    ) -> Self {
        BenchPlan {
            experiment,
            methods,
            n_train,
            replicates,
            base_seed,
            noise: vec![NoiseLevel::DEFAULT],
            overrides: TrainOverrides::default(),
            jobs: 0,
            heldout: HELDOUT_SIZE,
            truth_mc: DEMAND_TRUTH_MC,
            sprite_b_seed: SpriteConfig::new(1, 0).b_seed,
        }
    }

    pub fn with_noise(mut self, noise: Vec<NoiseLevel>) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs;
        self
    }

    pub fn with_overrides(mut self, overrides: TrainOverrides) -> Self {
        self.overrides = overrides;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.n_train < 2 {
            return Err(Error::Config("n_train must be >= 2".into()));
        }
        if self.heldout == 0 || self.truth_mc == 0 {
            return Err(Error::Config(
                "held-out size and Monte Carlo size must be >= 1".into(),
            ));
        }
        if self.experiment == Experiment::Demand && self.noise.is_empty() {
            return Err(Error::Config("no noise levels selected".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<Option<NoiseLevel>> {
        match self.experiment {
            Experiment::Demand => self.noise.iter().copied().map(Some).collect(),
            Experiment::Sprite => vec![None],
        }
    }

    /// Training configuration for `method` on replicate seed `seed`.
    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        self.overrides
            .apply(TrainConfig::defaults(method, self.experiment))
            .with_seed(method_seed(seed, method))
    }
}

/// Seed of replicate `r`.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    base ^ r as u64
}

/// Seed of the held-out `W` sample for a replicate.
pub fn heldout_seed(replicate_seed: u64) -> u64 {
    replicate_seed ^ HELDOUT_TAG
}

pub fn method_seed(replicate_seed: u64, method: Method) -> u64 {
    replicate_seed ^ (method.seed_tag() << METHOD_TAG_SHIFT)
}

/// Evaluation points and true curve shared by all fits in a run.
struct Target {
    grid: Tensor,
    truth: Tensor,
}

enum World {
    Demand,
    Sprite(Arc<SpriteWorld>),
}

/// Demand evaluation grid: 10 equally spaced prices from 10 to 30 inclusive.
pub fn demand_grid() -> Tensor {
    Tensor::linspace(10.0, 30.0, 10)
}

/// The 588 noiseless test images, one per row.
pub fn sprite_grid_images(d: usize) -> Result<Tensor> {
    let params = sprite_test_grid();
    let mut out = Tensor::zeros(params.len(), d * d);
    for (i, p) in params.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(render_glyph(p, d)?.data());
    }
    Ok(out)
}

fn sprite_target(world: &SpriteWorld) -> Result<Target> {
    let grid = sprite_grid_images(world.side())?;
    let truth = world.structural(&grid)?;
    Ok(Target {
        grid,
        truth: Tensor::column(truth),
    })
}

struct Task {
    noise: Option<NoiseLevel>,
    replicate: usize,
    method: Method,
}

fn run_task(plan: &BenchPlan, world: &World, target: &Target, task: &Task) -> EvalRecord {
    let seed = replicate_seed(plan.base_seed, task.replicate);
    let start = Instant::now();
    let outcome = (|| -> Result<(Tensor, f64)> {
        let (data, heldout_w) = match world {
            World::Demand => {
                let noise = task.noise.unwrap_or(NoiseLevel::DEFAULT);
                let cfg =
                    DemandConfig::new(plan.n_train, seed).with_noise(noise.var_z, noise.var_w);
                let held = DemandConfig {
                    n: plan.heldout,
                    seed: heldout_seed(seed),
                    ..cfg
                };
                (demand_sample(&cfg)?, demand_sample(&held)?.w().clone())
            }
            World::Sprite(w) => {
                let cfg = SpriteConfig {
                    b_seed: plan.sprite_b_seed,
                    ..SpriteConfig::new(plan.n_train, seed)
                };
                let held = SpriteConfig {
                    n: plan.heldout,
                    seed: heldout_seed(seed),
                    ..cfg
                };
                (
                    sprite_sample(w, &cfg)?,
                    sprite_sample(w, &held)?.w().clone(),
                )
            }
        };
        let cfg = plan.train_config(task.method, seed);
        let est = fit(task.method, &data.observed(), plan.experiment, &cfg)?;
        let curve = est.predict_curve(&target.grid, &heldout_w)?;
        let score = c_mse(&curve, &target.truth)?;
        if !score.is_finite() {
            return Err(Error::Training("non-finite c-MSE".into()));
        }
        Ok((curve, score))
    })();
    let wall_s = start.elapsed().as_secs_f64();
    let (predicted, c_mse, status) = match outcome {
        Ok((curve, score)) => (curve, Some(score), Status::Ok),
        Err(e) => {
            log::warn!("{} replicate {} failed: {e}", task.method, task.replicate);
            (Tensor::zeros(0, 1), None, Status::Failed(e.to_string()))
        }
    };
    EvalRecord {
        method: task.method,
        n_train: plan.n_train,
        noise: task.noise,
        replicate: task.replicate,
        seed,
        c_mse,
        predicted,
        truth: target.truth.clone(),
        wall_s,
        status,
    }
}

/// Runs every (noise cell, replicate, method) fit of `plan` on a worker pool
/// and returns the records in canonical order.
pub fn run(plan: &BenchPlan) -> Result<Vec<EvalRecord>> {
    plan.validate()?;
    let cells = plan.cells();
    let world = match plan.experiment {
        Experiment::Demand => World::Demand,
        Experiment::Sprite => World::Sprite(Arc::new(SpriteWorld::new(
            SpriteConfig::new(1, 0).d,
            plan.sprite_b_seed,
        )?)),
    };
    // Every noise cell is scored against the standard-configuration curve.
    let target = match &world {
        World::Demand => {
            let grid = demand_grid();
            let truth =
                demand_ground_truth(&grid, plan.truth_mc, TRUTH_SEED, NoiseLevel::DEFAULT.var_w)?
                    .values;
            Target { grid, truth }
        }
        World::Sprite(w) => sprite_target(w)?,
    };
    let mut tasks = Vec::new();
    for noise in &cells {
        for replicate in 0..plan.replicates {
            for &method in &plan.methods {
                tasks.push(Task {
                    noise: *noise,
                    replicate,
                    method,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let mut records: Vec<EvalRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| run_task(plan, &world, &target, t))
            .collect()
    });
    sort_records(&mut records);
    Ok(records)
}

fn cmp_noise(a: &Option<NoiseLevel>, b: &Option<NoiseLevel>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x
            .var_z
            .total_cmp(&y.var_z)
            .then(x.var_w.total_cmp(&y.var_w)),
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
    }
}

/// Canonical order: method, training size, noise cell, replicate.
pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.n_train.cmp(&b.n_train))
            .then(cmp_noise(&a.noise, &b.noise))
            .then(a.replicate.cmp(&b.replicate))
    });
}

/// Replicates of `methods` at the default noise level.
pub fn run_replicates(
    experiment: Experiment,
    methods: &[Method],
    n_train: usize,
    replicates: usize,
    base_seed: u64,
) -> Result<Vec<EvalRecord>> {
    run(&BenchPlan::new(
        experiment,
        methods.to_vec(),
        n_train,
        replicates,
        base_seed,
    ))
}

/// Replicates of `methods` on every Demand noise cell.
pub fn run_noise_grid(
    methods: &[Method],
    n_train: usize,
    replicates: usize,
    base_seed: u64,
) -> Result<Vec<EvalRecord>> {
    run(&BenchPlan::new(
        Experiment::Demand,
        methods.to_vec(),
        n_train,
        replicates,
        base_seed,
    )
    .with_noise(noise_levels()))
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n − 1)p`). `sorted` must be ascending and nonempty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub n_train: usize,
    pub noise: Option<NoiseLevel>,
    /// `None` when every fit in the group failed.
    pub median: Option<f64>,
    pub iqr: Option<f64>,
    /// Successful records.
    pub count: usize,
    pub failures: usize,
}

/// Median and interquartile range of c-MSE per (method, n, noise) group.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Domain("cannot summarize zero records".into()));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.n_train.cmp(&b.n_train))
            .then(cmp_noise(&a.noise, &b.noise))
    });
    let mut rows = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let key = sorted[start].group_key();
        let end = start
            + sorted[start..]
                .iter()
                .take_while(|r| r.group_key() == key)
                .count();
        let group = &sorted[start..end];
        let mut values: Vec<f64> = group.iter().filter_map(|r| r.c_mse).collect();
        values.sort_by(f64::total_cmp);
        let (median, iqr) = if values.is_empty() {
            (None, None)
        } else {
            (
                Some(quantile(&values, 0.5)),
                Some(quantile(&values, 0.75) - quantile(&values, 0.25)),
            )
        };
        rows.push(SummaryRow {
            method: group[0].method,
            n_train: group[0].n_train,
            noise: group[0].noise,
            median,
            iqr,
            count: values.len(),
            failures: group.len() - values.len(),
        });
        start = end;
    }
    Ok(rows)
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub const RECORD_COLUMNS: [&str; 8] = [
    "method",
    "n_train",
    "var_z",
    "var_w",
    "replicate",
    "seed",
    "c_mse",
    "status",
];
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "method", "n_train", "var_z", "var_w", "median", "iqr", "count", "failures",
];

pub fn write_records_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.write_record([
            r.method.name().to_string(),
            r.n_train.to_string(),
            fmt_opt(r.noise.map(|n| n.var_z)),
            fmt_opt(r.noise.map(|n| n.var_w)),
            r.replicate.to_string(),
            r.seed.to_string(),
            fmt_opt(r.c_mse),
            r.status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock seconds per fit, kept apart from the records so those stay
/// reproducible byte for byte.
pub fn write_timings_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "n_train", "var_z", "var_w", "replicate", "wall_s"])?;
    for r in records {
        w.write_record([
            r.method.name().to_string(),
            r.n_train.to_string(),
            fmt_opt(r.noise.map(|n| n.var_z)),
            fmt_opt(r.noise.map(|n| n.var_w)),
            r.replicate.to_string(),
            fmt_f64(r.wall_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.n_train.to_string(),
            fmt_opt(r.noise.map(|n| n.var_z)),
            fmt_opt(r.noise.map(|n| n.var_w)),
            fmt_opt(r.median),
            fmt_opt(r.iqr),
            r.count.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-point predicted and true curves of successful records.
pub fn write_curves_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "n_train",
        "var_z",
        "var_w",
        "replicate",
        "point",
        "predicted",
        "truth",
    ])?;
    for r in records.iter().filter(|r| r.status == Status::Ok) {
        for i in 0..r.predicted.rows() {
            w.write_record([
                r.method.name().to_string(),
                r.n_train.to_string(),
                fmt_opt(r.noise.map(|n| n.var_z)),
                fmt_opt(r.noise.map(|n| n.var_w)),
                r.replicate.to_string(),
                i.to_string(),
                fmt_f64(r.predicted[(i, 0)]),
                fmt_f64(r.truth[(i, 0)]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a records CSV. Curves are not stored there, so parsed records
/// carry empty curve tensors. Errors name the 1-based file line.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != RECORD_COLUMNS {
        return Err(parse_err(
            1,
            format!("expected header {}", RECORD_COLUMNS.join(",")),
        ));
    }
    let mut out = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "column {} is not a number: '{}'",
                        RECORD_COLUMNS[i],
                        field(i)
                    ),
                )
            })
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let int = |i: usize| -> Result<u64> {
            field(i).parse::<u64>().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "column {} is not an integer: '{}'",
                        RECORD_COLUMNS[i],
                        field(i)
                    ),
                )
            })
        };
        let method: Method = field(0)
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        let noise = match (opt(2)?, opt(3)?) {
            (Some(var_z), Some(var_w)) => Some(NoiseLevel { var_z, var_w }),
            (None, None) => None,
            _ => {
                return Err(parse_err(
                    line,
                    "var_z and var_w must both be set or both empty".into(),
                ))
            }
        };
        let c_mse = opt(6)?;
        let status: Status = field(7)
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        match (&status, c_mse) {
            (Status::Ok, Some(v)) if v >= 0.0 && v.is_finite() => {}
            (Status::Failed(_), None) => {}
            _ => {
                return Err(parse_err(
                    line,
                    "c_mse must be a finite non-negative number exactly when status is ok".into(),
                ))
            }
        }
        out.push(EvalRecord {
            method,
            n_train: int(1)? as usize,
            noise,
            replicate: int(4)? as usize,
            seed: int(5)?,
            c_mse,
            predicted: Tensor::zeros(0, 1),
            truth: Tensor::zeros(0, 1),
            wall_s: 0.0,
            status,
        });
    }
    Ok(out)
}

fn parse_err(line: u64, message: String) -> Error {
    Error::Parse { line, message }
}
