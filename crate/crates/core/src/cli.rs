//! The `diffocean` command line.
//!
//! Every subcommand reads a config, applies `--set` overrides, writes the
//! resolved config and its outputs to a fresh directory, and prints a one-line
//! summary. Failures are a single `error[kind]: message` line.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::calibrate::{calibrate_params, reconstruct_initial_state, sensitivity_grid, CalibError};
use crate::dyncore::{transport, ModelState};
use crate::experiments::Experiment;
use crate::gradcheck::{accuracy_over_steps, cost_scaling, grad_error, GradError, Mode};
use crate::io::csv::{gradcheck_csv, history_csv, real, sensitivity_csv, timing_csv};
use crate::io::snapshot::{Snapshot, SnapshotError};
use crate::io::{parse_config_with, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "diffocean", version, about = "Differentiable shallow-water channel model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a setting, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; must not exist or be empty unless --force.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward run with snapshots and diagnostics.
    Run(Common),
    /// Directional gradient checks and the accuracy-over-steps study.
    Gradcheck(Common),
    /// Recover a perturbed initial temperature by gradient descent.
    Reconstruct(Common),
    /// Recover A_h and r_bot from streamfunction observations.
    Calibrate(Common),
    /// Loss and gradient over a grid of (A_h, r_bot).
    Sensitivity(Common),
    /// Forward and gradient wall time against step count.
    Benchmark(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Run(_) => "run",
            Command::Gradcheck(_) => "gradcheck",
            Command::Reconstruct(_) => "reconstruct",
            Command::Calibrate(_) => "calibrate",
            Command::Sensitivity(_) => "sensitivity",
            Command::Benchmark(_) => "benchmark",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Run(c)
            | Command::Gradcheck(c)
            | Command::Reconstruct(c)
            | Command::Calibrate(c)
            | Command::Sensitivity(c)
            | Command::Benchmark(c) => c,
        }
    }
}

/// Echo of the resolved configuration inside the output directory.
pub const RESOLVED_CONFIG: &str = "resolved.conf";

#[derive(Debug)]
pub struct CliError {
    /// `usage`, `config`, `output`, `model` or `experiment`.
    pub kind: &'static str,
    pub msg: String,
}

impl CliError {
    fn new(kind: &'static str, msg: impl fmt::Display) -> Self {
        CliError {
            kind,
            msg: msg.to_string(),
        }
    }

    pub fn usage(e: &clap::Error) -> Self {
        let text = e.to_string();
        let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
        CliError::new("usage", first)
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            "usage" | "config" => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {msg}", self.kind)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new("config", e)
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Dyn(d) => CliError::new("model", d),
            e => CliError::new("experiment", e),
        }
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::Dyn(d) => CliError::new("model", d),
            e => CliError::new("experiment", e),
        }
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        CliError::new("output", e)
    }
}

/// Create-only writer into the output directory.
struct OutDir {
    path: PathBuf,
    force: bool,
}

impl OutDir {
    fn open(path: PathBuf, force: bool) -> Result<Self, CliError> {
        if path.exists() {
            let non_empty = fs::read_dir(&path)
                .map_err(|e| CliError::new("output", format!("{}: {e}", path.display())))?
                .next()
                .is_some();
            if non_empty && !force {
                return Err(CliError::new(
                    "output",
                    format!("{} exists and is not empty; pass --force to overwrite", path.display()),
                ));
            }
        } else {
            fs::create_dir_all(&path).map_err(|e| CliError::new("output", format!("{}: {e}", path.display())))?;
        }
        Ok(OutDir { path, force })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path.join(name);
        let mut opts = OpenOptions::new();
        opts.write(true);
        if self.force {
            opts.create(true).truncate(true);
        } else {
            opts.create_new(true);
        }
        let mut f = opts
            .open(&p)
            .map_err(|e| CliError::new("output", format!("{}: {e}", p.display())))?;
        f.write_all(bytes)
            .map_err(|e| CliError::new("output", format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn snapshot(&self, name: &str, s: &ModelState) -> Result<PathBuf, CliError> {
        self.write(name, &Snapshot::from_state(s).encode())
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning its summary line.
pub fn run_from<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(&e))?;
    execute(&cli.command)
}

pub fn execute(cmd: &Command) -> Result<String, CliError> {
    let common = cmd.common();
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = parse_config_with(&common.config, &overrides)?;
    let out_path = common
        .out
        .clone()
        .or_else(|| config.output.directory.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(cmd.name()));
    let exp = Experiment::new(config)?;
    let out = OutDir::open(out_path, common.force)?;
    out.write(RESOLVED_CONFIG, exp.config.echo().as_bytes())?;
    match cmd {
        Command::Run(_) => run(&exp, &out),
        Command::Gradcheck(_) => gradcheck(&exp, &out),
        Command::Reconstruct(_) => reconstruct(&exp, &out),
        Command::Calibrate(_) => calibrate(&exp, &out),
        Command::Sensitivity(_) => sensitivity(&exp, &out),
        Command::Benchmark(_) => benchmark(&exp, &out),
    }
}

fn run(exp: &Experiment, out: &OutDir) -> Result<String, CliError> {
    let grid = &exp.model.grid;
    let every = exp.config.output.snapshot_every;
    let s0 = exp.initial_state()?;
    let mut diag = String::from("step,time,eta_sum,energy,transport_sv\n");
    let mut row = |k: usize, s: &ModelState| -> Result<(), CliError> {
        let tr = transport(s, grid, 0).map_err(|e| CliError::new("model", e))?;
        diag.push_str(&format!(
            "{k},{},{},{},{}\n",
            real(s.time),
            real(s.eta.sum()),
            real(s.energy(grid, exp.model.params.g)),
            real(tr)
        ));
        Ok(())
    };
    row(0, &s0)?;
    if every > 0 {
        out.snapshot("snapshot_000000.dosn", &s0)?;
    }
    let mut failure = None;
    let fin = exp
        .model
        .trajectory(&s0, exp.config.n_steps, |k, s| {
            if failure.is_some() || every == 0 || k % every != 0 {
                return;
            }
            if let Err(e) = row(k, s).and_then(|_| out.snapshot(&format!("snapshot_{k:06}.dosn"), s).map(|_| ())) {
                failure = Some(e);
            }
        })
        .map_err(|e| CliError::new("model", e))?;
    if let Some(e) = failure {
        return Err(e);
    }
    let n = exp.config.n_steps;
    if every == 0 || n % every != 0 {
        row(n, &fin)?;
    }
    out.write("diagnostics.csv", diag.as_bytes())?;
    let p = out.snapshot("final.dosn", &fin)?;
    Ok(format!(
        "run: {n} steps, dt = {} s, final snapshot {}",
        exp.config.dt,
        p.display()
    ))
}

fn gradcheck(exp: &Experiment, out: &OutDir) -> Result<String, CliError> {
    let c = &exp.config.gradcheck;
    let s0 = exp.initial_state()?;
    let obj = exp.step_objective(&s0)?;
    let mut reports = Vec::with_capacity(2 * c.directions);
    for d in 0..c.directions as u64 {
        for mode in [Mode::Jvp, Mode::Vjp] {
            reports.push(grad_error(&obj, c.eps, exp.seed() + d, mode, 1)?);
        }
    }
    let worst = reports.iter().map(|r| r.error).fold(0.0, f64::max);
    out.write("directions.csv", gradcheck_csv(&reports).as_bytes())?;
    let study = accuracy_over_steps(|n| exp.friction_objective(&s0, n), &c.n_list, c.accuracy_eps, exp.seed())?;
    out.write("gradcheck.csv", gradcheck_csv(&study).as_bytes())?;
    let worst_acc = study
        .iter()
        .filter_map(|r| r.accuracy)
        .fold(f64::INFINITY, f64::min);
    Ok(format!(
        "gradcheck: {} directions, max error {worst:e}; {} step counts, min accuracy {worst_acc}",
        c.directions,
        c.n_list.len()
    ))
}

fn reconstruct(exp: &Experiment, out: &OutDir) -> Result<String, CliError> {
    let r = &exp.config.reconstruct;
    let s0 = exp.initial_state()?;
    let (problem, perturbed) = exp.reconstruction(&s0)?;
    let res = reconstruct_initial_state(&problem, &perturbed, r.alpha, r.iters, r.rel_tol, &exp.registry)?;
    out.write("history.csv", history_csv(&res.history).as_bytes())?;
    let mut s = s0.clone();
    s.t = res.t0.clone();
    out.snapshot("reconstructed.dosn", &s)?;
    let (first, last) = (res.history.first(), res.history.last());
    let (l0, l1) = (first.map_or(0.0, |x| x.loss), last.map_or(0.0, |x| x.loss));
    Ok(format!(
        "reconstruct: {} iterations ({:?}), loss {l0:e} -> {l1:e}",
        res.history.records.len().saturating_sub(1),
        res.termination
    ))
}

fn calibrate(exp: &Experiment, out: &OutDir) -> Result<String, CliError> {
    let s0 = exp.initial_state()?;
    let problem = exp.calibration_problem(&s0)?;
    let res = calibrate_params(&problem, exp.calibration_init(), &exp.calibration_config(), &exp.registry)?;
    out.write("history.csv", history_csv(&res.history).as_bytes())?;
    let p = &exp.model.params;
    Ok(format!(
        "calibrate: {} iterations ({:?}), A_h = {} ({:+.3}%), r_bot = {} ({:+.3}%)",
        res.history.records.len().saturating_sub(1),
        res.termination,
        res.a_h,
        100.0 * (res.a_h / p.a_h - 1.0),
        res.r_bot,
        100.0 * (res.r_bot / p.r_bot - 1.0)
    ))
}

fn sensitivity(exp: &Experiment, out: &OutDir) -> Result<String, CliError> {
    let s0 = exp.initial_state()?;
    let problem = exp.calibration_problem(&s0)?;
    let (a, r) = exp.sensitivity_axes();
    let grid = sensitivity_grid(&problem, &a, &r, &exp.registry)?;
    out.write("sensitivity.csv", sensitivity_csv(&grid).as_bytes())?;
    let failed = grid.cells.iter().filter(|c| c.loss.is_none()).count();
    Ok(format!(
        "sensitivity: {}x{} cells, {failed} non-finite",
        a.len(),
        r.len()
    ))
}

fn benchmark(exp: &Experiment, out: &OutDir) -> Result<String, CliError> {
    let b = &exp.config.benchmark;
    let s0 = exp.initial_state()?;
    let rows = cost_scaling(|n| exp.friction_objective(&s0, n), &b.n_list, b.repetitions)?;
    out.write("timing.csv", timing_csv(&rows).as_bytes())?;
    let ns: Vec<f64> = rows.iter().map(|r| r.n_steps as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.vjp_ms).collect();
    let slope = if rows.len() >= 2 {
        crate::gradcheck::loglog_slope(&ns, &ts)
    } else {
        f64::NAN
    };
    Ok(format!("benchmark: {} step counts, gradient-time log-log slope {slope:.3}", rows.len()))
}
