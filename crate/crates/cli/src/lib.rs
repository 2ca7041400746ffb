//! Command-line front end: single-fiber checks, family sweeps, cell
//! decompositions and raster dumps, each producing a JSON report.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage
//! or parse errors, 3 for solver breakdowns.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use poincare_lab::cells::{cell_decompose_2d, merge_vertical, CellError};
use poincare_lab::dsl::{parse_domain, DomainSpec, DslError};
use poincare_lab::harness::{
    param_grid, plot_data, sweep, verify_lemma_bound, verify_main_uniform, DirectionChoice, HarnessError,
    SweepConfig, SweepReport,
};
use poincare_lab::raster::{longest_chord, rasterize, RasterDomain, RasterError};
use poincare_lab::sobolev::{
    discrete_p1_exact, trace_ratio_battery, verify_theorem_p1, Battery, SobolevError, SolverConfig,
};
use poincare_lab::tangent::{find_regular_direction, TangentError};

/// Numeric defaults shared by every command.
pub mod config {
    /// Relative eigenvalue tolerance of the p = 2 solver.
    pub const TOL: f64 = 1e-8;
    /// Chord-marching step as a fraction of the grid spacing.
    pub const STEP_FRACTION: f64 = 0.25;
    /// Boundary samples per fiber for margin measurements.
    pub const SAMPLES: usize = 4096;
    /// Candidate directions for the regular-direction search.
    pub const DIRS: usize = 512;
    pub const RESOLUTION: usize = 256;
    pub const P: f64 = 2.0;
    /// Random fields per axis for the exact discrete inequality.
    pub const TRIALS: usize = 100;
    /// Points per parameter axis in sweeps.
    pub const GRID: usize = 5;
    /// Points per parameter axis when searching a family direction.
    pub const COARSE: usize = 3;
    pub const SAMPLES_PER_COLUMN: usize = 32;
    /// Environment variable supplying the default worker count.
    pub const JOBS_ENV: &str = "POINCARE_LAB_JOBS";
}

#[derive(Parser, Debug)]
#[command(name = "poincare-lab", version, about = "Poincaré-inequality checks on definable families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: $POINCARE_LAB_JOBS, else all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for report.json and companion files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = config::TOL)]
    tol: f64,
    /// Chord step as a fraction of h.
    #[arg(long, global = true, default_value_t = config::STEP_FRACTION)]
    step: f64,
    #[arg(long, global = true, default_value_t = config::SAMPLES)]
    samples: usize,
    #[arg(long, global = true, default_value_t = config::DIRS)]
    dirs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Theorem bound and exact discrete inequality on one fiber.
    Check(CheckArgs),
    /// Theorem bound over a parameter grid.
    Sweep(SweepArgs),
    /// Sweep plus the thickness-volume bound.
    Lemma(LemmaArgs),
    /// Sweeps at several resolutions and the refinement trend.
    Uniform(UniformArgs),
    /// Thickness of one fiber along a direction.
    Thickness(FiberArgs),
    /// Regular-direction search over the family.
    Regdir(RegdirArgs),
    /// Cell decomposition of a planar fiber.
    Cells(CellsArgs),
    /// Trace-ratio battery.
    Trace(TraceArgs),
    /// Raster mask dump.
    Raster(FiberArgs),
}

#[derive(Args, Debug)]
struct FiberArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Parameter values, comma separated.
    #[arg(long)]
    t: Option<String>,
    #[arg(long, default_value_t = config::RESOLUTION)]
    res: usize,
    /// `e1`..`en`, `x`/`y`/`z`, a comma-separated vector, or `auto`.
    #[arg(long, default_value = "auto")]
    dir: String,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    fiber: FiberArgs,
    #[arg(long, default_value_t = config::P)]
    p: f64,
    #[arg(long, default_value_t = config::TRIALS)]
    trials: usize,
}

#[derive(Args, Debug)]
struct FamilyArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Points per parameter axis, comma separated.
    #[arg(long)]
    grid: Option<String>,
    /// Explicit parameter points (repeatable), overriding `--grid`.
    #[arg(long)]
    t: Vec<String>,
    #[arg(long, default_value_t = config::P)]
    p: f64,
    #[arg(long, default_value = "auto")]
    dir: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long, default_value_t = config::RESOLUTION)]
    res: usize,
}

#[derive(Args, Debug)]
struct LemmaArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Constant to test; defaults to the margin-derived value.
    #[arg(long)]
    k: Option<f64>,
}

#[derive(Args, Debug)]
struct UniformArgs {
    #[command(flatten)]
    family: FamilyArgs,
    /// Resolutions, comma separated.
    #[arg(long, default_value = "128,256")]
    res: String,
}

#[derive(Args, Debug)]
struct RegdirArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    t: Vec<String>,
}

#[derive(Args, Debug)]
struct CellsArgs {
    #[command(flatten)]
    fiber: FiberArgs,
    #[arg(long, default_value_t = config::SAMPLES_PER_COLUMN)]
    columns: usize,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    fiber: FiberArgs,
    #[arg(long, default_value_t = config::P)]
    p: f64,
    #[arg(long, default_value = "polynomial")]
    battery: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    UsageError,
    SolverError,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::UsageError => 2,
            Status::SolverError => 3,
        }
    }
}

#[derive(Debug)]
struct Failure {
    status: Status,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { status: Status::UsageError, kind: "usage", message: message.into() }
    }
}

impl From<DslError> for Failure {
    fn from(e: DslError) -> Self {
        Failure { status: Status::UsageError, kind: "spec", message: e.to_string() }
    }
}

impl From<RasterError> for Failure {
    fn from(e: RasterError) -> Self {
        let (status, kind) = match e {
            RasterError::Dsl(_) => (Status::UsageError, "spec"),
            RasterError::Resolution(_) | RasterError::Direction { .. } | RasterError::Step => {
                (Status::UsageError, "usage")
            }
            RasterError::EmptyFiber => (Status::Fail, "empty-fiber"),
            _ => (Status::Fail, "raster"),
        };
        Failure { status, kind, message: e.to_string() }
    }
}

impl From<SobolevError> for Failure {
    fn from(e: SobolevError) -> Self {
        let (status, kind) = match &e {
            SobolevError::Raster(r) => return r.clone().into(),
            SobolevError::SolverDiverged { .. } | SobolevError::NonFinite(_) | SobolevError::Mismatch => {
                (Status::SolverError, "solver")
            }
            SobolevError::Exponent(_) | SobolevError::NoTrials => (Status::UsageError, "usage"),
            SobolevError::Unbounded { .. } => (Status::Fail, "unbounded-thickness"),
            SobolevError::Violation { .. } => (Status::Fail, "violation"),
            SobolevError::DegenerateBoundary => (Status::Fail, "degenerate-boundary"),
        };
        Failure { status, kind, message: e.to_string() }
    }
}

impl From<TangentError> for Failure {
    fn from(e: TangentError) -> Self {
        let (status, kind) = match e {
            TangentError::Dsl(_) => (Status::UsageError, "spec"),
            TangentError::EmptySamples => (Status::Fail, "no-boundary-samples"),
            _ => (Status::UsageError, "usage"),
        };
        Failure { status, kind, message: e.to_string() }
    }
}

impl From<CellError> for Failure {
    fn from(e: CellError) -> Self {
        let (status, kind) = match e {
            CellError::Dsl(_) => (Status::UsageError, "spec"),
            CellError::DegenerateGeometry { .. } => (Status::SolverError, "degenerate-geometry"),
            _ => (Status::UsageError, "usage"),
        };
        Failure { status, kind, message: e.to_string() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let (status, kind) = match e {
            HarnessError::Dsl(d) => return d.into(),
            HarnessError::Tangent(t) => return t.into(),
            HarnessError::NotApplicable { .. } => (Status::Fail, "not-applicable"),
            _ => (Status::UsageError, "usage"),
        };
        Failure { status, kind, message: e.to_string() }
    }
}

/// Successful command output: verdict, report body and extra files.
struct Outcome {
    pass: bool,
    solver_error: bool,
    result: Value,
    error: Value,
    files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    fn new(pass: bool, result: Value) -> Self {
        Outcome { pass, solver_error: false, result, error: Value::Null, files: Vec::new() }
    }
}

struct Context {
    seed: u64,
    tol: f64,
    step: f64,
    samples: usize,
    dirs: usize,
}

impl Context {
    fn solver(&self) -> SolverConfig {
        SolverConfig { tol: self.tol, seed: self.seed, ..SolverConfig::default() }
    }
}

fn load_spec(path: &Path) -> Result<Arc<DomainSpec>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure { status: Status::UsageError, kind: "io", message: format!("{}: {e}", path.display()) })?;
    Ok(Arc::new(parse_domain(&text)?))
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|_| Failure::usage(format!("invalid {what} `{s}`"))))
        .collect()
}

fn parse_counts(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Failure::usage(format!("invalid count list `{s}`"))))
        .collect()
}

fn params(spec: &DomainSpec, t: Option<&str>) -> Result<Vec<f64>, Failure> {
    let t = match t {
        Some(s) => parse_floats(s, "parameter list")?,
        None => spec.default_params(),
    };
    spec.check_params(&t)?;
    Ok(t)
}

/// `None` stands for `auto`.
fn parse_direction(s: &str, dim: usize) -> Result<Option<Vec<f64>>, Failure> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    let axis = match s {
        "x" => Some(0),
        "y" => Some(1),
        "z" => Some(2),
        _ => s.strip_prefix('e').and_then(|k| k.parse::<usize>().ok()).filter(|&k| k >= 1).map(|k| k - 1),
    };
    let v = match axis {
        Some(a) if a < dim => {
            let mut v = vec![0.0; dim];
            v[a] = 1.0;
            v
        }
        Some(_) => return Err(Failure::usage(format!("direction `{s}` out of range for dimension {dim}"))),
        None => parse_floats(s, "direction")?,
    };
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.len() != dim || !(norm > 0.0) || !norm.is_finite() {
        return Err(Failure::usage(format!("direction `{s}` must be a nonzero vector of dimension {dim}")));
    }
    Ok(Some(v.iter().map(|x| x / norm).collect()))
}

fn direction_for_fiber(ctx: &Context, spec: &DomainSpec, t: &[f64], dir: &str) -> Result<(Vec<f64>, Value), Failure> {
    match parse_direction(dir, spec.ambient_dim)? {
        Some(v) => Ok((v, Value::Null)),
        None => {
            let rep = find_regular_direction(spec, &[t.to_vec()], ctx.dirs, ctx.samples, ctx.seed)?;
            Ok((rep.direction.clone(), to_json(&rep)))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn check(ctx: &Context, a: &CheckArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.fiber.spec)?;
    let t = params(&spec, a.fiber.t.as_deref())?;
    let (lambda, search) = direction_for_fiber(ctx, &spec, &t, &a.fiber.dir)?;
    let raster = rasterize(&spec, &t, a.fiber.res)?;
    let theorem = verify_theorem_p1(&raster, a.p, &lambda, &ctx.solver())?;
    let mut discrete = Vec::new();
    for axis in 0..spec.ambient_dim {
        discrete.push(discrete_p1_exact(&raster, axis, a.p, a.trials, ctx.seed)?);
    }
    let pass = theorem.pass && discrete.iter().all(|d| d.pass);
    Ok(Outcome::new(
        pass,
        json!({
            "t": t,
            "direction": lambda,
            "direction_search": search,
            "volume": raster.volume()?,
            "theorem": theorem,
            "discrete": discrete,
        }),
    ))
}

fn family_grid(spec: &DomainSpec, grid: Option<&str>, t: &[String], default: usize) -> Result<Vec<Vec<f64>>, Failure> {
    if !t.is_empty() {
        return t.iter().map(|s| params(spec, Some(s))).collect();
    }
    let counts = match grid {
        Some(g) => parse_counts(g)?,
        None => vec![default; spec.num_params()],
    };
    Ok(param_grid(spec, &counts)?)
}

fn sweep_config(ctx: &Context, spec: &DomainSpec, f: &FamilyArgs, res: usize) -> Result<SweepConfig, Failure> {
    let direction = match parse_direction(&f.dir, spec.ambient_dim)? {
        Some(v) => DirectionChoice::Fixed(v),
        None => DirectionChoice::Auto,
    };
    Ok(SweepConfig {
        p: f.p,
        resolution: res,
        direction,
        solver: ctx.solver(),
        directions: ctx.dirs,
        samples: ctx.samples,
        coarse: config::COARSE,
    })
}

#[derive(Serialize)]
struct CsvRow {
    t: String,
    empty: bool,
    h: f64,
    volume: Option<f64>,
    thickness: Option<f64>,
    constant: Option<f64>,
    bound: Option<f64>,
    slack: Option<f64>,
    ratio: Option<f64>,
    pass: Option<bool>,
    error: Option<String>,
}

fn fibers_csv(report: &SweepReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.records {
        let t: Vec<String> = r.t.iter().map(|v| v.to_string()).collect();
        w.serialize(CsvRow {
            t: t.join(";"),
            empty: r.empty,
            h: r.h,
            volume: r.volume,
            thickness: r.thickness,
            constant: r.constant,
            bound: r.bound,
            slack: r.slack,
            ratio: r.constant_ratio(report.dim),
            pass: r.pass,
            error: r.error.clone(),
        })
        .expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn sweep_files(report: &SweepReport, suffix: &str) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![(format!("fibers{suffix}.csv"), fibers_csv(report))];
    for (name, text) in plot_data(report) {
        let name = name.replace(".dat", &format!("{suffix}.dat"));
        files.push((name, text.into_bytes()));
    }
    files
}

fn run_sweep(ctx: &Context, a: &SweepArgs) -> Result<(SweepReport, Vec<(String, Vec<u8>)>), Failure> {
    let spec = load_spec(&a.family.spec)?;
    let grid = family_grid(&spec, a.family.grid.as_deref(), &a.family.t, config::GRID)?;
    let cfg = sweep_config(ctx, &spec, &a.family, a.res)?;
    let report = sweep(&spec, &grid, &cfg)?;
    let files = sweep_files(&report, "");
    Ok((report, files))
}

fn sweep_cmd(ctx: &Context, a: &SweepArgs) -> Result<Outcome, Failure> {
    let (report, files) = run_sweep(ctx, a)?;
    Ok(Outcome { pass: report.all_pass, solver_error: report.solver_failed(), result: to_json(&report), error: Value::Null, files })
}

fn lemma_cmd(ctx: &Context, a: &LemmaArgs) -> Result<Outcome, Failure> {
    let (report, files) = run_sweep(ctx, &a.sweep)?;
    let k = a.k.unwrap_or_else(|| poincare_lab::harness::lemma_constant(report.alpha, report.dim));
    let lemma = verify_lemma_bound(&report, k)?;
    Ok(Outcome {
        pass: lemma.pass,
        solver_error: false,
        result: json!({ "lemma": lemma, "sweep": report }),
        error: Value::Null,
        files,
    })
}

fn uniform_cmd(ctx: &Context, a: &UniformArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.family.spec)?;
    let grid = family_grid(&spec, a.family.grid.as_deref(), &a.family.t, config::GRID)?;
    let resolutions = parse_counts(&a.res)?;
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for &res in &resolutions {
        let cfg = sweep_config(ctx, &spec, &a.family, res)?;
        let report = sweep(&spec, &grid, &cfg)?;
        files.extend(sweep_files(&report, &format!("_{res}")));
        reports.push(report);
    }
    let trend = verify_main_uniform(&reports)?;
    let solver_error = reports.iter().any(|r| r.solver_failed());
    Ok(Outcome { pass: trend.pass, solver_error, result: json!({ "trend": trend, "sweeps": reports }), error: Value::Null, files })
}

fn thickness_cmd(ctx: &Context, a: &FiberArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.spec)?;
    let t = params(&spec, a.t.as_deref())?;
    let (lambda, search) = direction_for_fiber(ctx, &spec, &t, &a.dir)?;
    let raster = rasterize(&spec, &t, a.res)?;
    let step = ctx.step * raster.spacing();
    let chord = longest_chord(&raster, &lambda, step)?;
    let discrete: Vec<f64> = (0..spec.ambient_dim).map(|ax| raster.thickness_discrete(ax)).collect::<Result<_, _>>()?;
    let thickness = chord.as_ref().map_or(f64::INFINITY, |c| c.length);
    Ok(Outcome::new(
        true,
        json!({
            "t": t,
            "direction": lambda,
            "direction_search": search,
            "step": step,
            "thickness": thickness,
            "bounded": thickness.is_finite(),
            "chord": chord,
            "discrete_axis_thickness": discrete,
        }),
    ))
}

fn regdir_cmd(ctx: &Context, a: &RegdirArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.spec)?;
    let grid = family_grid(&spec, a.grid.as_deref(), &a.t, config::COARSE)?;
    let rep = find_regular_direction(&spec, &grid, ctx.dirs, ctx.samples, ctx.seed)?;
    let mut out = Outcome::new(!rep.no_regular_direction, to_json(&rep));
    if rep.no_regular_direction {
        out.error = json!({
            "kind": "no-regular-direction",
            "message": format!("no candidate direction keeps a margin of 1e-6 (best refined margin {:e})", rep.refined_alpha),
        });
    }
    Ok(out)
}

fn cells_cmd(_ctx: &Context, a: &CellsArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.fiber.spec)?;
    let t = params(&spec, a.fiber.t.as_deref())?;
    let complex = cell_decompose_2d(&spec, &t, a.columns, &[])?;
    let merged = merge_vertical(&complex);
    let raster_volume = match rasterize(&spec, &t, a.fiber.res)? {
        r if r.is_empty() => 0.0,
        r => r.volume()?,
    };
    let result = json!({
        "t": t,
        "criticals": complex.criticals,
        "inside_cells": complex.inside_2d_count(),
        "inside_cells_merged": merged.inside_2d_count(),
        "band_volume": complex.band_volume(),
        "raster_volume": raster_volume,
        "max_band_height": merged.max_band_height(),
        "complex": merged.to_json(),
    });
    let mut out = Outcome::new(true, result);
    out.files.push(("cells.json".into(), pretty(&merged.to_json())));
    out.files.push(("cells.dot".into(), merged.to_dot().into_bytes()));
    Ok(out)
}

fn trace_cmd(_ctx: &Context, a: &TraceArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.fiber.spec)?;
    let t = params(&spec, a.fiber.t.as_deref())?;
    let battery: Battery = a.battery.parse().map_err(Failure::usage)?;
    let raster = rasterize(&spec, &t, a.fiber.res)?;
    let report = trace_ratio_battery(&raster, a.p, battery)?;
    Ok(Outcome::new(report.stable, json!({ "t": t, "trace": report })))
}

fn raster_cmd(_ctx: &Context, a: &FiberArgs) -> Result<Outcome, Failure> {
    let spec = load_spec(&a.spec)?;
    let t = params(&spec, a.t.as_deref())?;
    let raster: RasterDomain = rasterize(&spec, &t, a.res)?;
    let sidecar = raster.sidecar();
    let volume = if raster.is_empty() { 0.0 } else { raster.volume()? };
    let mut out = Outcome::new(
        true,
        json!({ "t": t, "raster": sidecar, "volume": volume, "empty": raster.is_empty() }),
    );
    if raster.dim() == 2 {
        let mut pgm = Vec::new();
        raster.write_pgm(&mut pgm).expect("in-memory write");
        out.files.push(("mask.pgm".into(), pgm));
    }
    out.files.push(("mask.bin".into(), raster.mask_bytes()));
    out.files.push(("mask.json".into(), pretty(&to_json(&sidecar))));
    Ok(out)
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report serializes");
    s.push(b'\n');
    s
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Check(_) => "check",
        Command::Sweep(_) => "sweep",
        Command::Lemma(_) => "lemma",
        Command::Uniform(_) => "uniform",
        Command::Thickness(_) => "thickness",
        Command::Regdir(_) => "regdir",
        Command::Cells(_) => "cells",
        Command::Trace(_) => "trace",
        Command::Raster(_) => "raster",
    }
}

fn dispatch(ctx: &Context, c: &Command) -> Result<Outcome, Failure> {
    match c {
        Command::Check(a) => check(ctx, a),
        Command::Sweep(a) => sweep_cmd(ctx, a),
        Command::Lemma(a) => lemma_cmd(ctx, a),
        Command::Uniform(a) => uniform_cmd(ctx, a),
        Command::Thickness(a) => thickness_cmd(ctx, a),
        Command::Regdir(a) => regdir_cmd(ctx, a),
        Command::Cells(a) => cells_cmd(ctx, a),
        Command::Trace(a) => trace_cmd(ctx, a),
        Command::Raster(a) => raster_cmd(ctx, a),
    }
}

/// Exit code of a report as written to `report.json`.
pub fn exit_code_of(report: &Value) -> i32 {
    match report.get("status").and_then(Value::as_str) {
        Some("pass") => 0,
        Some("fail") => 1,
        Some("solver-error") => 3,
        _ => 2,
    }
}

fn jobs(cli_jobs: Option<usize>) -> Result<Option<usize>, Failure> {
    let jobs = match cli_jobs {
        Some(j) => Some(j),
        None => match std::env::var(config::JOBS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Failure::usage(format!("{} must be a positive integer", config::JOBS_ENV)))?,
            ),
            _ => None,
        },
    };
    if jobs == Some(0) {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    Ok(jobs)
}

fn execute(cli: &Cli) -> Value {
    let ctx = Context { seed: cli.seed, tol: cli.tol, step: cli.step, samples: cli.samples, dirs: cli.dirs };
    let name = command_name(&cli.command);
    let run = || dispatch(&ctx, &cli.command);
    let outcome = match jobs(cli.jobs) {
        Err(f) => Err(f),
        Ok(None) => run(),
        Ok(Some(n)) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Failure::usage(e.to_string())),
        },
    };
    let config = json!({
        "seed": cli.seed,
        "tol": cli.tol,
        "step_fraction": cli.step,
        "samples": cli.samples,
        "dirs": cli.dirs,
    });
    let (status, result, error, files) = match outcome {
        Ok(o) => {
            let status = if o.solver_error {
                Status::SolverError
            } else if o.pass {
                Status::Pass
            } else {
                Status::Fail
            };
            (status, o.result, o.error, o.files)
        }
        Err(f) => (f.status, Value::Null, json!({ "kind": f.kind, "message": f.message }), Vec::new()),
    };
    let mut report = json!({
        "command": name,
        "status": status,
        "exit_code": status.exit_code(),
        "config": config,
        "result": result,
        "error": error,
    });
    if let Some(dir) = &cli.out {
        if let Err(e) = write_outputs(dir, &report, &files) {
            report["status"] = json!(Status::UsageError);
            report["exit_code"] = json!(Status::UsageError.exit_code());
            report["error"] = json!({ "kind": "io", "message": e.to_string() });
        }
    }
    report
}

fn write_outputs(dir: &Path, report: &Value, files: &[(String, Vec<u8>)]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), pretty(report))?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. The report goes to stdout unless `--out` is given.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let report = execute(&cli);
    let code = exit_code_of(&report);
    let mut stdout = std::io::stdout().lock();
    match &cli.out {
        Some(dir) if code != 2 || report["error"]["kind"] != "io" => {
            let _ = writeln!(
                stdout,
                "{}: {} ({})",
                report["command"].as_str().unwrap_or(""),
                report["status"].as_str().unwrap_or(""),
                dir.join("report.json").display()
            );
        }
        _ => {
            let _ = stdout.write_all(&pretty(&report));
        }
    }
    if let Some(msg) = report["error"]["message"].as_str() {
        eprintln!("error: {msg}");
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_parse() {
        assert_eq!(parse_direction("e2", 2).unwrap(), Some(vec![0.0, 1.0]));
        assert_eq!(parse_direction("x", 3).unwrap(), Some(vec![1.0, 0.0, 0.0]));
        assert_eq!(parse_direction("AUTO", 2).unwrap(), None);
        let v = parse_direction("3,4", 2).unwrap().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(parse_direction("e3", 2).is_err());
        assert!(parse_direction("0,0", 2).is_err());
        assert!(parse_direction("1,2,3", 2).is_err());
    }

    #[test]
    fn exit_codes_follow_status() {
        for (s, c) in [(Status::Pass, 0), (Status::Fail, 1), (Status::UsageError, 2), (Status::SolverError, 3)] {
            assert_eq!(s.exit_code(), c);
            assert_eq!(exit_code_of(&json!({ "status": s })), c);
        }
    }

    #[test]
    fn count_lists() {
        assert_eq!(parse_counts("3, 4").unwrap(), vec![3, 4]);
        assert!(parse_counts("3,x").is_err());
    }
}
