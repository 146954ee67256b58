//! Line-based `key = value` configuration with `[section]` headers.
//!
//! Every key is known in advance; unknown keys, malformed values and values
//! violating a physical or numerical invariant are rejected with the line
//! they came from. `--set section.key=value` overrides are applied before
//! validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dyncore::{cfl_limit_dt, courant_number, linear_profile, DragMode, PhysParams, StepConfig, CFL_MAX};
use crate::grid::{make_channel_grid, GridSpec, WallKind, MIN_CELLS};

/// The shipped reference configuration.
pub const ACC_MINI: &str = include_str!("../../configs/acc-mini.conf");

pub const REQUIRED_SECTIONS: [&str; 3] = ["grid", "physics", "stepping"];

const SCHEMA: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    ("grid", &["nx", "ny", "Lx", "Ly", "H", "f0", "beta", "boundary"]),
    (
        "physics",
        &[
            "A_h",
            "r_bot",
            "drag_mode",
            "C_d",
            "g",
            "rho0",
            "tau0",
            "wind_band",
            "kappa_T",
            "lambda_relax",
            "T_star_south",
            "T_star_north",
        ],
    ),
    ("stepping", &["dt", "n_steps", "eps_reg"]),
    ("initial", &["spinup_steps", "eddy_speed", "eddy_modes_x", "eddy_modes_y"]),
    ("gradcheck", &["eps", "directions", "accuracy_eps", "n_list"]),
    ("reconstruct", &["steps", "amplitude", "sigma", "iters", "alpha", "rel_tol"]),
    (
        "calibrate",
        &[
            "init_scale_Ah",
            "init_scale_rbot",
            "alpha",
            "max_iters",
            "grad_tol",
            "window",
            "every",
        ],
    ),
    ("sensitivity", &["n_a", "n_r", "decades"]),
    ("benchmark", &["n_list", "repetitions"]),
    ("output", &["directory", "snapshot_every"]),
];

/// Where a setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub origin: Origin,
    /// `section.key`, when the error concerns one setting.
    pub key: Option<String>,
    pub msg: String,
}

impl ConfigError {
    fn at(origin: Origin, key: &str, msg: impl Into<String>) -> Self {
        ConfigError {
            origin,
            key: Some(key.to_string()),
            msg: msg.into(),
        }
    }

    fn general(msg: impl Into<String>) -> Self {
        ConfigError {
            origin: Origin::Default,
            key: None,
            msg: msg.into(),
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self.origin {
            Origin::Line(n) => Some(n),
            _ => None,
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.origin, &self.key) {
            (Origin::Line(n), Some(k)) => write!(f, "line {n}: {k}: {}", self.msg),
            (Origin::Line(n), None) => write!(f, "line {n}: {}", self.msg),
            (Origin::Override, Some(k)) => write!(f, "--set {k}: {}", self.msg),
            (_, Some(k)) => write!(f, "{k}: {}", self.msg),
            (_, None) => write!(f, "{}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn known(section: &str, key: &str) -> bool {
    SCHEMA
        .iter()
        .any(|(s, keys)| *s == section && keys.contains(&key))
}

/// Unvalidated settings keyed by `(section, key)`.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), (String, Origin)>,
    sections: BTreeSet<String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        let mut section = String::new();
        for (idx, line) in text.lines().enumerate() {
            let n = idx + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError {
                    origin: Origin::Line(n),
                    key: None,
                    msg: format!("malformed section header '{line}'"),
                })?;
                let name = name.trim();
                if name.is_empty() || !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError {
                        origin: Origin::Line(n),
                        key: None,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                if !raw.sections.insert(name.to_string()) {
                    return Err(ConfigError {
                        origin: Origin::Line(n),
                        key: None,
                        msg: format!("section [{name}] appears twice"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                origin: Origin::Line(n),
                key: None,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let q = qualified(&section, key);
            if !known(&section, key) {
                return Err(ConfigError::at(Origin::Line(n), &q, "unknown key"));
            }
            if value.is_empty() {
                return Err(ConfigError::at(Origin::Line(n), &q, "missing value"));
            }
            let slot = (section.clone(), key.to_string());
            if let Some((_, Origin::Line(first))) = raw.entries.get(&slot) {
                return Err(ConfigError::at(
                    Origin::Line(n),
                    &q,
                    format!("duplicate key (first set on line {first})"),
                ));
            }
            raw.entries.insert(slot, (value.to_string(), Origin::Line(n)));
        }
        Ok(raw)
    }

    /// Applies `section.key=value` (or `key=value` for top-level keys).
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| {
            ConfigError::general(format!("override '{assignment}' is not of the form section.key=value"))
        })?;
        let (path, value) = (path.trim(), value.trim());
        let (section, key) = path.split_once('.').unwrap_or(("", path));
        if !known(section, key) {
            return Err(ConfigError::at(Origin::Override, path, "unknown key"));
        }
        if value.is_empty() {
            return Err(ConfigError::at(Origin::Override, path, "missing value"));
        }
        if !section.is_empty() {
            self.sections.insert(section.to_string());
        }
        self.entries
            .insert((section.to_string(), key.to_string()), (value.to_string(), Origin::Override));
        Ok(())
    }

    fn raw(&self, section: &str, key: &str) -> Option<(&str, Origin)> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|(v, o)| (v.as_str(), *o))
    }

    fn origin(&self, section: &str, key: &str) -> Origin {
        self.raw(section, key).map_or(Origin::Default, |(_, o)| o)
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, default: Option<T>, what: &str) -> Result<T, ConfigError> {
        match self.raw(section, key) {
            Some((v, o)) => v.parse().map_err(|_| {
                ConfigError::at(o, &qualified(section, key), format!("expected {what}, got '{v}'"))
            }),
            None => default.ok_or_else(|| {
                ConfigError::general(format!("missing required key {}", qualified(section, key)))
            }),
        }
    }

    fn real(&self, section: &str, key: &str, default: Option<f64>) -> Result<f64, ConfigError> {
        let v: f64 = self.get(section, key, default, "a number")?;
        if !v.is_finite() {
            return Err(self.invalid(section, key, "must be finite"));
        }
        Ok(v)
    }

    fn count(&self, section: &str, key: &str, default: Option<usize>) -> Result<usize, ConfigError> {
        self.get(section, key, default, "a non-negative integer")
    }

    fn list(&self, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        match self.raw(section, key) {
            None => Ok(default.to_vec()),
            Some((v, o)) => v
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| {
                    ConfigError::at(
                        o,
                        &qualified(section, key),
                        format!("expected a comma-separated list of integers, got '{v}'"),
                    )
                }),
        }
    }

    fn invalid(&self, section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::at(self.origin(section, key), &qualified(section, key), msg)
    }

    fn check(&self, ok: bool, section: &str, key: &str, msg: &str) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            Err(self.invalid(section, key, msg))
        }
    }

    fn ascending(&self, section: &str, key: &str, xs: &[usize]) -> Result<(), ConfigError> {
        self.check(
            !xs.is_empty() && xs[0] >= 1 && xs.windows(2).all(|w| w[0] < w[1]),
            section,
            key,
            "must be a non-empty, strictly ascending list of positive integers",
        )
    }

    fn range(&self, section: &str, key: &str, default: (usize, usize), max: usize) -> Result<(usize, usize), ConfigError> {
        let xs = self.list(section, key, &[default.0, default.1])?;
        self.check(
            xs.len() == 2 && 1 <= xs[0] && xs[0] <= xs[1] && xs[1] <= max,
            section,
            key,
            &format!("must be 'lo, hi' with 1 <= lo <= hi <= {max}"),
        )?;
        Ok((xs[0], xs[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    Fixed(f64),
    /// Half the CFL limit.
    AutoCfl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialConfig {
    pub spinup_steps: usize,
    /// Peak eddy speed; 0 disables eddies.
    pub eddy_speed: f64,
    pub eddy_modes_x: (usize, usize),
    pub eddy_modes_y: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub directions: usize,
    pub accuracy_eps: f64,
    pub n_list: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructConfig {
    pub steps: usize,
    pub amplitude: f64,
    pub sigma: f64,
    pub iters: usize,
    /// `None` selects the step by line search.
    pub alpha: Option<f64>,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateConfig {
    pub init_scale_ah: f64,
    pub init_scale_rbot: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub window: usize,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityConfig {
    pub n_a: usize,
    pub n_r: usize,
    pub decades: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub n_list: Vec<usize>,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    /// Default output directory when none is given on the command line.
    pub directory: Option<String>,
    /// Snapshot cadence in steps; 0 writes the final state only.
    pub snapshot_every: usize,
}

/// A fully validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub params: PhysParams,
    pub t_star_south: f64,
    pub t_star_north: f64,
    pub time_step: TimeStep,
    /// Resolved step length.
    pub dt: f64,
    pub n_steps: usize,
    pub eps_reg: f64,
    pub initial: InitialConfig,
    pub gradcheck: GradcheckConfig,
    pub reconstruct: ReconstructConfig,
    pub calibrate: CalibrateConfig,
    pub sensitivity: SensitivityConfig,
    pub benchmark: BenchmarkConfig,
    pub output: OutputConfig,
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_config_with(path, &[])
}

pub fn parse_config_with(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut raw = RawConfig::parse(text)?;
    for o in overrides {
        raw.set(o)?;
    }
    RunConfig::resolve(&raw)
}

impl RunConfig {
    /// The shipped reference configuration.
    pub fn acc_mini() -> Self {
        parse_config_str(ACC_MINI, &[]).expect("shipped config is valid")
    }

    pub fn resolve(raw: &RawConfig) -> Result<Self, ConfigError> {
        let missing: Vec<&str> = REQUIRED_SECTIONS
            .iter()
            .copied()
            .filter(|s| !raw.sections.contains(*s))
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::general(format!(
                "missing required sections: {}",
                missing.iter().map(|s| format!("[{s}]")).collect::<Vec<_>>().join(", ")
            )));
        }
        let seed: u64 = raw.get("", "seed", Some(0), "a non-negative integer")?;

        let nx = raw.count("grid", "nx", None)?;
        raw.check(nx >= MIN_CELLS, "grid", "nx", &format!("must be >= {MIN_CELLS}"))?;
        let ny = raw.count("grid", "ny", None)?;
        raw.check(ny >= MIN_CELLS, "grid", "ny", &format!("must be >= {MIN_CELLS}"))?;
        let lx = raw.real("grid", "Lx", None)?;
        raw.check(lx > 0.0, "grid", "Lx", "must be > 0")?;
        let ly = raw.real("grid", "Ly", None)?;
        raw.check(ly > 0.0, "grid", "Ly", "must be > 0")?;
        let depth = raw.real("grid", "H", None)?;
        raw.check(depth > 0.0, "grid", "H", "must be > 0")?;
        let f0 = raw.real("grid", "f0", Some(0.0))?;
        let beta = raw.real("grid", "beta", Some(0.0))?;
        let boundary: String = raw.get("grid", "boundary", Some("free-slip".into()), "a boundary kind")?;
        let walls = WallKind::parse(&boundary).ok_or_else(|| {
            raw.invalid("grid", "boundary", format!("expected free-slip, no-slip or periodic, got '{boundary}'"))
        })?;
        let grid = make_channel_grid(nx, ny, lx, ly, depth, f0, beta)
            .map_err(|e| ConfigError::general(e.to_string()))?
            .with_walls(walls);

        let nonneg = |key: &str, default: Option<f64>| -> Result<f64, ConfigError> {
            let v = raw.real("physics", key, default)?;
            raw.check(v >= 0.0, "physics", key, "must be >= 0 (non-negativity)")?;
            Ok(v)
        };
        let a_h = nonneg("A_h", None)?;
        let r_bot = nonneg("r_bot", None)?;
        let c_d = nonneg("C_d", Some(1e-3))?;
        let kappa_t = nonneg("kappa_T", Some(0.0))?;
        let lambda_relax = nonneg("lambda_relax", Some(0.0))?;
        let mode: String = raw.get("physics", "drag_mode", Some("linear".into()), "a drag mode")?;
        let drag_mode = DragMode::parse(&mode).ok_or_else(|| {
            raw.invalid("physics", "drag_mode", format!("expected linear or quadratic, got '{mode}'"))
        })?;
        let g = raw.real("physics", "g", Some(9.81))?;
        raw.check(g > 0.0, "physics", "g", "must be > 0")?;
        let rho0 = raw.real("physics", "rho0", Some(1025.0))?;
        raw.check(rho0 > 0.0, "physics", "rho0", "must be > 0")?;
        let tau0 = raw.real("physics", "tau0", Some(0.0))?;
        let wind_band = raw.real("physics", "wind_band", Some(0.5))?;
        raw.check(
            wind_band > 0.0 && wind_band <= 1.0,
            "physics",
            "wind_band",
            "must lie in (0, 1]",
        )?;
        let t_star_south = raw.real("physics", "T_star_south", Some(0.0))?;
        let t_star_north = raw.real("physics", "T_star_north", Some(0.0))?;
        let params = PhysParams {
            a_h,
            r_bot,
            drag_mode,
            c_d,
            g,
            rho0,
            tau0,
            wind_band,
            kappa_t,
            lambda_relax,
            t_star: linear_profile(&grid, t_star_south, t_star_north),
        };

        let time_step = match raw.raw("stepping", "dt") {
            None | Some(("auto-cfl", _)) => TimeStep::AutoCfl,
            Some(_) => {
                let dt = raw.real("stepping", "dt", None)?;
                raw.check(dt > 0.0, "stepping", "dt", "must be > 0 or auto-cfl")?;
                TimeStep::Fixed(dt)
            }
        };
        let dt = match time_step {
            TimeStep::AutoCfl => 0.5 * cfl_limit_dt(&grid, g),
            TimeStep::Fixed(dt) => dt,
        };
        let courant = courant_number(&grid, g, dt);
        raw.check(
            courant < CFL_MAX,
            "stepping",
            "dt",
            &format!("violates CFL: courant number {courant:.4} >= {CFL_MAX}"),
        )?;
        let n_steps = raw.count("stepping", "n_steps", Some(100))?;
        let eps_reg = raw.real("stepping", "eps_reg", Some(crate::autodiff::DEFAULT_EPS_REG))?;
        raw.check(eps_reg > 0.0, "stepping", "eps_reg", "must be > 0")?;

        let eddy_speed = raw.real("initial", "eddy_speed", Some(0.0))?;
        raw.check(eddy_speed >= 0.0, "initial", "eddy_speed", "must be >= 0")?;
        let initial = InitialConfig {
            spinup_steps: raw.count("initial", "spinup_steps", Some(0))?,
            eddy_speed,
            eddy_modes_x: raw.range("initial", "eddy_modes_x", (1, 1), nx / 2)?,
            eddy_modes_y: raw.range("initial", "eddy_modes_y", (1, 1), ny - 1)?,
        };

        let eps = raw.real("gradcheck", "eps", Some(1e-4))?;
        raw.check(eps > 0.0, "gradcheck", "eps", "must be > 0")?;
        let accuracy_eps = raw.real("gradcheck", "accuracy_eps", Some(1e-3))?;
        raw.check(accuracy_eps > 0.0, "gradcheck", "accuracy_eps", "must be > 0")?;
        let directions = raw.count("gradcheck", "directions", Some(20))?;
        raw.check(directions >= 1, "gradcheck", "directions", "must be >= 1")?;
        let n_list = raw.list("gradcheck", "n_list", &[1, 2, 4, 8, 16, 32])?;
        raw.ascending("gradcheck", "n_list", &n_list)?;
        let gradcheck = GradcheckConfig {
            eps,
            directions,
            accuracy_eps,
            n_list,
        };

        let steps = raw.count("reconstruct", "steps", Some(4))?;
        raw.check(steps >= 1, "reconstruct", "steps", "must be >= 1")?;
        let sigma = raw.real("reconstruct", "sigma", Some(lx / 16.0))?;
        raw.check(sigma > 0.0, "reconstruct", "sigma", "must be > 0")?;
        let alpha = match raw.raw("reconstruct", "alpha") {
            None | Some(("auto", _)) => None,
            Some(_) => {
                let a = raw.real("reconstruct", "alpha", None)?;
                raw.check(a > 0.0, "reconstruct", "alpha", "must be > 0 or auto")?;
                Some(a)
            }
        };
        let rel_tol = raw.real("reconstruct", "rel_tol", Some(0.0))?;
        raw.check(rel_tol >= 0.0, "reconstruct", "rel_tol", "must be >= 0")?;
        let reconstruct = ReconstructConfig {
            steps,
            amplitude: raw.real("reconstruct", "amplitude", Some(1.0))?,
            sigma,
            iters: raw.count("reconstruct", "iters", Some(500))?,
            alpha,
            rel_tol,
        };

        let positive = |key: &str, default: f64| -> Result<f64, ConfigError> {
            let v = raw.real("calibrate", key, Some(default))?;
            raw.check(v > 0.0, "calibrate", key, "must be > 0")?;
            Ok(v)
        };
        let init_scale_ah = positive("init_scale_Ah", 1.5)?;
        let init_scale_rbot = positive("init_scale_rbot", 0.5)?;
        let calib_alpha = positive("alpha", 4.0)?;
        let grad_tol = raw.real("calibrate", "grad_tol", Some(1e-6))?;
        raw.check(grad_tol >= 0.0, "calibrate", "grad_tol", "must be >= 0")?;
        let window = raw.count("calibrate", "window", Some(500))?;
        let every = raw.count("calibrate", "every", Some(50))?;
        raw.check(every >= 1, "calibrate", "every", "must be >= 1")?;
        raw.check(window >= every, "calibrate", "window", "must be >= calibrate.every")?;
        let calibrate = CalibrateConfig {
            init_scale_ah,
            init_scale_rbot,
            alpha: calib_alpha,
            max_iters: raw.count("calibrate", "max_iters", Some(300))?,
            grad_tol,
            window,
            every,
        };

        let n_a = raw.count("sensitivity", "n_a", Some(7))?;
        raw.check(n_a >= 3, "sensitivity", "n_a", "must be >= 3")?;
        let n_r = raw.count("sensitivity", "n_r", Some(7))?;
        raw.check(n_r >= 3, "sensitivity", "n_r", "must be >= 3")?;
        let decades = raw.real("sensitivity", "decades", Some(1.0))?;
        raw.check(decades > 0.0, "sensitivity", "decades", "must be > 0")?;
        let sensitivity = SensitivityConfig { n_a, n_r, decades };

        let bench_list = raw.list("benchmark", "n_list", &[8, 16, 32, 64, 128])?;
        raw.ascending("benchmark", "n_list", &bench_list)?;
        let repetitions = raw.count("benchmark", "repetitions", Some(3))?;
        raw.check(repetitions >= 3, "benchmark", "repetitions", "must be >= 3")?;
        let benchmark = BenchmarkConfig {
            n_list: bench_list,
            repetitions,
        };

        let output = OutputConfig {
            directory: raw.raw("output", "directory").map(|(v, _)| v.to_string()),
            snapshot_every: raw.count("output", "snapshot_every", Some(0))?,
        };

        Ok(RunConfig {
            seed,
            grid,
            params,
            t_star_south,
            t_star_north,
            time_step,
            dt,
            n_steps,
            eps_reg,
            initial,
            gradcheck,
            reconstruct,
            calibrate,
            sensitivity,
            benchmark,
            output,
        })
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            dt: self.dt,
            n_steps: self.n_steps,
            eps_reg: self.eps_reg,
        }
    }

    /// Canonical text of the resolved configuration; parses back to `self`.
    pub fn echo(&self) -> String {
        fn list(xs: &[usize]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        }
        let g = &self.grid;
        let p = &self.params;
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line(format!("seed = {}", self.seed));
        line(String::new());
        line("[grid]".into());
        line(format!("nx = {}", g.nx));
        line(format!("ny = {}", g.ny));
        line(format!("Lx = {:?}", g.lx));
        line(format!("Ly = {:?}", g.ly));
        line(format!("H = {:?}", g.depth));
        line(format!("f0 = {:?}", g.f0));
        line(format!("beta = {:?}", g.beta));
        line(format!("boundary = {}", g.walls.name()));
        line(String::new());
        line("[physics]".into());
        line(format!("A_h = {:?}", p.a_h));
        line(format!("r_bot = {:?}", p.r_bot));
        line(format!("drag_mode = {}", p.drag_mode.name()));
        line(format!("C_d = {:?}", p.c_d));
        line(format!("g = {:?}", p.g));
        line(format!("rho0 = {:?}", p.rho0));
        line(format!("tau0 = {:?}", p.tau0));
        line(format!("wind_band = {:?}", p.wind_band));
        line(format!("kappa_T = {:?}", p.kappa_t));
        line(format!("lambda_relax = {:?}", p.lambda_relax));
        line(format!("T_star_south = {:?}", self.t_star_south));
        line(format!("T_star_north = {:?}", self.t_star_north));
        line(String::new());
        line("[stepping]".into());
        match self.time_step {
            TimeStep::AutoCfl => line(format!("# auto-cfl resolved to {:?} s", self.dt)),
            TimeStep::Fixed(_) => {}
        }
        line(format!("dt = {:?}", self.dt));
        line(format!("n_steps = {}", self.n_steps));
        line(format!("eps_reg = {:?}", self.eps_reg));
        line(String::new());
        let i = &self.initial;
        line("[initial]".into());
        line(format!("spinup_steps = {}", i.spinup_steps));
        line(format!("eddy_speed = {:?}", i.eddy_speed));
        line(format!("eddy_modes_x = {}, {}", i.eddy_modes_x.0, i.eddy_modes_x.1));
        line(format!("eddy_modes_y = {}, {}", i.eddy_modes_y.0, i.eddy_modes_y.1));
        line(String::new());
        let c = &self.gradcheck;
        line("[gradcheck]".into());
        line(format!("eps = {:?}", c.eps));
        line(format!("directions = {}", c.directions));
        line(format!("accuracy_eps = {:?}", c.accuracy_eps));
        line(format!("n_list = {}", list(&c.n_list)));
        line(String::new());
        let r = &self.reconstruct;
        line("[reconstruct]".into());
        line(format!("steps = {}", r.steps));
        line(format!("amplitude = {:?}", r.amplitude));
        line(format!("sigma = {:?}", r.sigma));
        line(format!("iters = {}", r.iters));
        line(match r.alpha {
            Some(a) => format!("alpha = {a:?}"),
            None => "alpha = auto".into(),
        });
        line(format!("rel_tol = {:?}", r.rel_tol));
        line(String::new());
        let k = &self.calibrate;
        line("[calibrate]".into());
        line(format!("init_scale_Ah = {:?}", k.init_scale_ah));
        line(format!("init_scale_rbot = {:?}", k.init_scale_rbot));
        line(format!("alpha = {:?}", k.alpha));
        line(format!("max_iters = {}", k.max_iters));
        line(format!("grad_tol = {:?}", k.grad_tol));
        line(format!("window = {}", k.window));
        line(format!("every = {}", k.every));
        line(String::new());
        line("[sensitivity]".into());
        line(format!("n_a = {}", self.sensitivity.n_a));
        line(format!("n_r = {}", self.sensitivity.n_r));
        line(format!("decades = {:?}", self.sensitivity.decades));
        line(String::new());
        line("[benchmark]".into());
        line(format!("n_list = {}", list(&self.benchmark.n_list)));
        line(format!("repetitions = {}", self.benchmark.repetitions));
        line(String::new());
        line("[output]".into());
        if let Some(d) = &self.output.directory {
            line(format!("directory = {d}"));
        }
        line(format!("snapshot_every = {}", self.output.snapshot_every));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        "[grid]\nnx = 8\nny = 6\nLx = 4e6\nLy = 3e6\nH = 500\n\n[physics]\nA_h = 100\nr_bot = 1e-5\n\n[stepping]\ndt = 100\n"
            .to_string()
    }

    #[test]
    fn shipped_config_has_reference_values() {
        let c = RunConfig::acc_mini();
        assert_eq!(c.params.a_h, 3435.5036038313715);
        assert_eq!(c.params.r_bot, 1e-5);
        assert_eq!((c.grid.nx, c.grid.ny), (64, 48));
        assert_eq!((c.grid.lx, c.grid.ly, c.grid.depth), (4e6, 3e6, 500.0));
        assert_eq!((c.grid.f0, c.grid.beta), (-1e-4, 2e-11));
        assert_eq!(c.params.tau0, 0.1);
        assert_eq!(c.time_step, TimeStep::AutoCfl);
        assert!((c.dt - 0.5 * cfl_limit_dt(&c.grid, 9.81)).abs() == 0.0);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn empty_file_lists_required_sections() {
        let e = parse_config_str("", &[]).unwrap_err();
        assert!(e.msg.contains("[grid]") && e.msg.contains("[physics]") && e.msg.contains("[stepping]"), "{e}");
        let e = parse_config_str("# only a comment\n[grid]\nnx = 8\n", &[]).unwrap_err();
        assert!(!e.msg.contains("[grid]") && e.msg.contains("[physics]"), "{e}");
    }

    #[test]
    fn negative_viscosity_cites_line() {
        let text = minimal().replace("A_h = 100", "A_h = -1");
        let e = parse_config_str(&text, &[]).unwrap_err();
        assert_eq!(e.line(), Some(9));
        assert!(e.to_string().contains("line 9") && e.msg.contains("non-negativity"), "{e}");
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let e = parse_config_str(&format!("{}visc = 3\n", minimal()), &[]).unwrap_err();
        assert_eq!(e.line(), Some(14));
        assert!(e.msg.contains("unknown key"));
        let e = parse_config_str(&format!("[nope]\n{}", minimal()), &[]).unwrap_err();
        assert_eq!(e.line(), Some(1));
        let e = parse_config_str(&format!("{}dt = 50\n", minimal()), &[]).unwrap_err();
        assert!(e.msg.contains("duplicate"), "{e}");
        let e = parse_config_str(&format!("{}garbage\n", minimal()), &[]).unwrap_err();
        assert_eq!(e.line(), Some(14));
        let e = parse_config_str(&minimal(), &["physics.viscosity=3".into()]).unwrap_err();
        assert_eq!(e.origin, Origin::Override);
    }

    #[test]
    fn type_errors_cite_line() {
        let e = parse_config_str(&minimal().replace("nx = 8", "nx = eight"), &[]).unwrap_err();
        assert_eq!(e.line(), Some(2));
        let e = parse_config_str(&minimal().replace("nx = 8", "nx = -8"), &[]).unwrap_err();
        assert_eq!(e.line(), Some(2));
        let e = parse_config_str(&minimal().replace("H = 500", "H = nan"), &[]).unwrap_err();
        assert_eq!(e.line(), Some(6));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let c = parse_config_str(&minimal(), &["physics.A_h=7".into(), "seed=3".into()]).unwrap();
        assert_eq!(c.params.a_h, 7.0);
        assert_eq!(c.seed, 3);
        let e = parse_config_str(&minimal(), &["physics.r_bot=-2".into()]).unwrap_err();
        assert_eq!(e.origin, Origin::Override);
        assert!(e.to_string().starts_with("--set physics.r_bot"));
        let c = parse_config_str(&minimal(), &["gradcheck.n_list=1".into()]).unwrap();
        assert_eq!(c.gradcheck.n_list, vec![1]);
    }

    #[test]
    fn cfl_is_checked_at_parse_time() {
        let e = parse_config_str(&minimal().replace("dt = 100", "dt = 1e5"), &[]).unwrap_err();
        assert_eq!(e.line(), Some(13));
        assert!(e.msg.contains("CFL"));
    }

    #[test]
    fn echo_parses_back() {
        let c = RunConfig::acc_mini();
        let back = parse_config_str(&c.echo(), &[]).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.dt, c.dt);
        assert_eq!(back.grid, c.grid);
        assert_eq!(back.calibrate, c.calibrate);
        assert_eq!(back.reconstruct, c.reconstruct);
        assert_eq!(back.initial, c.initial);
    }
}
