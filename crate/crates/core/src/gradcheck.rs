//! Gradient validation against central finite differences, and timing of
//! forward and reverse sweeps.
//!
//! Checks run in normalised coordinates: each selected leaf is written as
//! `scale * w` (or `base * exp(w)`), and the loss can be divided by its value
//! at the evaluation point, so tolerances do not depend on physical units.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{self, AdError, DiffFn, DiffSelector, GradientRegistry, Leaves, Value, DEFAULT_TAPE_BUDGET};
use crate::dyncore::DynError;

/// Below this magnitude of the finite difference, accuracy is undefined.
pub const FD_FLOOR: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("finite-difference step must be > 0, got {0}")]
    InvalidEps(f64),
    #[error("direction must have unit norm, got {0}")]
    NotUnit(f64),
    #[error("non-finite loss {value} at probe {probe}")]
    NonFiniteLoss { probe: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("step counts must be sorted ascending")]
    Unsorted,
    #[error("at least {min} repetitions required, got {found}")]
    Repetitions { min: usize, found: usize },
    #[error("log coordinates need a positive scalar leaf: {0}")]
    LogCoordinate(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Dyn(#[from] DynError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Jvp,
    Vjp,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Jvp => "jvp",
            Mode::Vjp => "vjp",
        }
    }
}

/// A scalar loss over a flat coordinate vector with first derivatives.
pub trait Objective {
    fn dim(&self) -> usize;
    /// The evaluation point.
    fn point(&self) -> Vec<f64>;
    fn value(&self, w: &[f64]) -> Result<f64, GradError>;
    /// `(loss, directional derivative along k)` in forward mode.
    fn jvp(&self, w: &[f64], k: &[f64]) -> Result<(f64, f64), GradError>;
    /// `(loss, gradient)` in reverse mode.
    fn gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>), GradError>;
}

/// How a selected leaf maps to coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coord {
    /// `leaf = scale * w`
    Linear(f64),
    /// `leaf = base * exp(w)`, scalars only; the point is `w = 0`.
    Log(f64),
}

/// A [`DiffFn`] with one scalar output seen as an [`Objective`] over some of
/// its leaves; unselected leaves keep their base values.
pub struct LeafObjective<'r, F> {
    f: F,
    base: Leaves,
    coords: Vec<(String, Coord)>,
    registry: &'r GradientRegistry,
    loss_scale: f64,
    budget: usize,
}

impl<'r, F: DiffFn> LeafObjective<'r, F> {
    pub fn new(f: F, base: Leaves, registry: &'r GradientRegistry) -> Self {
        LeafObjective {
            f,
            base,
            coords: Vec::new(),
            registry,
            loss_scale: 1.0,
            budget: DEFAULT_TAPE_BUDGET,
        }
    }

    pub fn inner(&self) -> &F {
        &self.f
    }

    pub fn base(&self) -> &Leaves {
        &self.base
    }

    pub fn coords(&self) -> &[(String, Coord)] {
        &self.coords
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn linear(mut self, name: &str, scale: f64) -> Result<Self, GradError> {
        self.base.get(name).ok_or_else(|| AdError::MissingLeaf(name.into()))?;
        self.coords.push((name.to_string(), Coord::Linear(scale)));
        Ok(self)
    }

    /// Linear coordinate scaled by the leaf's magnitude (|x| or RMS, 1 if zero).
    pub fn normalized(self, name: &str) -> Result<Self, GradError> {
        let v = self.base.get(name).ok_or_else(|| AdError::MissingLeaf(name.into()))?;
        let s = match v {
            Value::Scalar(x) => x.abs(),
            Value::Field(f) => (f.norm2_sq() / f.len() as f64).sqrt(),
        };
        self.linear(name, if s > 0.0 { s } else { 1.0 })
    }

    pub fn log(mut self, name: &str) -> Result<Self, GradError> {
        match self.base.get(name) {
            Some(Value::Scalar(x)) if *x > 0.0 => {
                let x = *x;
                self.coords.push((name.to_string(), Coord::Log(x)));
                Ok(self)
            }
            Some(_) => Err(GradError::LogCoordinate(name.into())),
            None => Err(AdError::MissingLeaf(name.into()).into()),
        }
    }

    /// Divides the loss by its magnitude at the evaluation point.
    pub fn normalize_loss(mut self) -> Result<Self, GradError> {
        self.loss_scale = 1.0;
        let l = self.value(&self.point())?.abs();
        if l > 0.0 {
            self.loss_scale = 1.0 / l;
        }
        Ok(self)
    }

    pub fn loss_scale(&self) -> f64 {
        self.loss_scale
    }

    fn names(&self) -> Vec<String> {
        self.coords.iter().map(|(n, _)| n.clone()).collect()
    }

    fn leaf_dims(&self) -> Vec<usize> {
        self.coords
            .iter()
            .map(|(n, _)| self.base.get(n).expect("checked on insert").dim())
            .collect()
    }

    /// Leaves at coordinates `w`.
    pub fn leaves_at(&self, w: &[f64]) -> Result<Leaves, GradError> {
        self.check_dim(w)?;
        let mut phys = Vec::with_capacity(w.len());
        let mut pos = 0;
        for ((_, c), d) in self.coords.iter().zip(self.leaf_dims()) {
            for &x in &w[pos..pos + d] {
                phys.push(match c {
                    Coord::Linear(s) => s * x,
                    Coord::Log(b) => b * x.exp(),
                });
            }
            pos += d;
        }
        let selected = self.base.unflatten(&self.names(), &phys)?;
        let mut out = self.base.clone();
        for (k, v) in selected.iter() {
            out.insert(k, v.clone());
        }
        Ok(out)
    }

    /// `d leaf / d w` at the physical leaf values, flattened.
    fn jacobian_diag(&self, leaves: &Leaves) -> Result<Vec<f64>, GradError> {
        let phys = leaves.flatten(&self.names())?;
        let mut out = Vec::with_capacity(phys.len());
        let mut pos = 0;
        for ((_, c), d) in self.coords.iter().zip(self.leaf_dims()) {
            for &x in &phys[pos..pos + d] {
                out.push(match c {
                    Coord::Linear(s) => *s,
                    Coord::Log(_) => x,
                });
            }
            pos += d;
        }
        Ok(out)
    }

    fn check_dim(&self, w: &[f64]) -> Result<(), GradError> {
        let d = self.dim();
        if w.len() != d {
            return Err(GradError::Dim {
                expected: d,
                found: w.len(),
            });
        }
        Ok(())
    }
}

fn scalar_output(out: &[Value]) -> Result<f64, GradError> {
    match out {
        [Value::Scalar(l)] => Ok(*l),
        _ => Err(AdError::NonScalarLoss.into()),
    }
}

impl<F: DiffFn> Objective for LeafObjective<'_, F> {
    fn dim(&self) -> usize {
        self.leaf_dims().iter().sum()
    }

    fn point(&self) -> Vec<f64> {
        let phys = self.base.flatten(&self.names()).expect("checked on insert");
        let mut out = Vec::with_capacity(phys.len());
        let mut pos = 0;
        for ((_, c), d) in self.coords.iter().zip(self.leaf_dims()) {
            for &x in &phys[pos..pos + d] {
                out.push(match c {
                    Coord::Linear(s) => x / s,
                    Coord::Log(_) => 0.0,
                });
            }
            pos += d;
        }
        out
    }

    fn value(&self, w: &[f64]) -> Result<f64, GradError> {
        let x = self.leaves_at(w)?;
        Ok(self.loss_scale * scalar_output(&autodiff::eval(&self.f, &x)?)?)
    }

    fn jvp(&self, w: &[f64], k: &[f64]) -> Result<(f64, f64), GradError> {
        self.check_dim(k)?;
        let x = self.leaves_at(w)?;
        let jd = self.jacobian_diag(&x)?;
        let dk: Vec<f64> = jd.iter().zip(k).map(|(a, b)| a * b).collect();
        let tangent = x.unflatten(&self.names(), &dk)?;
        let (p, t) = autodiff::jvp(&self.f, &x, &tangent, self.registry)?;
        Ok((
            self.loss_scale * scalar_output(&p)?,
            self.loss_scale * scalar_output(&t)?,
        ))
    }

    fn gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>), GradError> {
        let x = self.leaves_at(w)?;
        let names = self.names();
        let sel = DiffSelector::only(&names);
        let (l, g) = autodiff::grad_with_budget(&self.f, &x, &sel, self.registry, self.budget)?;
        let jd = self.jacobian_diag(&x)?;
        let flat = g.flatten(&names)?;
        let grad = flat
            .iter()
            .zip(&jd)
            .map(|(g, j)| self.loss_scale * g * j)
            .collect();
        Ok((self.loss_scale * l, grad))
    }
}

/// Objective from plain closures; handy for analytic checks.
pub struct FnObjective<V, G> {
    pub point: Vec<f64>,
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.point.len()
    }

    fn point(&self) -> Vec<f64> {
        self.point.clone()
    }

    fn value(&self, w: &[f64]) -> Result<f64, GradError> {
        Ok((self.value)(w))
    }

    fn jvp(&self, w: &[f64], k: &[f64]) -> Result<(f64, f64), GradError> {
        let g = (self.gradient)(w);
        Ok(((self.value)(w), dot(&g, k)))
    }

    fn gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>), GradError> {
        Ok(((self.value)(w), (self.gradient)(w)))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `(loss(w + eps k) - loss(w - eps k)) / (2 eps)`, two evaluations.
pub fn fd_directional(
    loss: impl Fn(&[f64]) -> Result<f64, GradError>,
    w: &[f64],
    k: &[f64],
    eps: f64,
) -> Result<f64, GradError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(GradError::InvalidEps(eps));
    }
    if w.len() != k.len() {
        return Err(GradError::Dim {
            expected: w.len(),
            found: k.len(),
        });
    }
    let nk = norm(k);
    if (nk - 1.0).abs() > 1e-12 {
        return Err(GradError::NotUnit(nk));
    }
    let plus: Vec<f64> = w.iter().zip(k).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = w.iter().zip(k).map(|(a, b)| a - eps * b).collect();
    let lp = loss(&plus)?;
    if !lp.is_finite() {
        return Err(GradError::NonFiniteLoss { probe: "w + eps k", value: lp });
    }
    let lm = loss(&minus)?;
    if !lm.is_finite() {
        return Err(GradError::NonFiniteLoss { probe: "w - eps k", value: lm });
    }
    Ok((lp - lm) / (2.0 * eps))
}

/// Standard normal direction of dimension `dim`, L2-normalised.
pub fn random_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&k);
    k.into_iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_steps: usize,
    pub mode: Mode,
    pub eps: f64,
    /// Seed of the random direction.
    pub seed: u64,
    pub ad_value: f64,
    pub fd_value: f64,
    /// `|ad - fd|`
    pub error: f64,
    /// `1 - |ad - fd| / |fd|`; `None` when `|fd|` is below [`FD_FLOOR`].
    pub accuracy: Option<f64>,
}

impl GradCheckReport {
    fn new(n_steps: usize, mode: Mode, eps: f64, seed: u64, ad: f64, fd: f64) -> Self {
        let error = (ad - fd).abs();
        let accuracy = if fd.abs() < FD_FLOOR {
            None
        } else {
            Some(1.0 - error / fd.abs())
        };
        GradCheckReport {
            n_steps,
            mode,
            eps,
            seed,
            ad_value: ad,
            fd_value: fd,
            error,
            accuracy,
        }
    }
}

/// Directional derivative of `obj` along the seeded direction, by forward or
/// reverse mode, against the central difference.
pub fn grad_error(
    obj: &dyn Objective,
    eps: f64,
    seed: u64,
    mode: Mode,
    n_steps: usize,
) -> Result<GradCheckReport, GradError> {
    let w = obj.point();
    let k = random_direction(w.len(), seed);
    grad_error_along(obj, &w, &k, eps, seed, mode, n_steps)
}

pub fn grad_error_along(
    obj: &dyn Objective,
    w: &[f64],
    k: &[f64],
    eps: f64,
    seed: u64,
    mode: Mode,
    n_steps: usize,
) -> Result<GradCheckReport, GradError> {
    let fd = fd_directional(|x| obj.value(x), w, k, eps)?;
    let ad = match mode {
        Mode::Jvp => obj.jvp(w, k)?.1,
        Mode::Vjp => dot(&obj.gradient(w)?.1, k),
    };
    Ok(GradCheckReport::new(n_steps, mode, eps, seed, ad, fd))
}

/// One report per `n` and mode, from objectives built by `family(n)`.
pub fn accuracy_over_steps<O: Objective>(
    family: impl Fn(usize) -> Result<O, GradError>,
    n_list: &[usize],
    eps: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>, GradError> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GradError::Unsorted);
    }
    let mut out = Vec::with_capacity(2 * n_list.len());
    for &n in n_list {
        let obj = family(n)?;
        for mode in [Mode::Jvp, Mode::Vjp] {
            out.push(grad_error(&obj, eps, seed, mode, n)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub n_steps: usize,
    pub forward_ms: f64,
    pub vjp_ms: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median wall time of a plain evaluation and of a gradient, per `n`.
///
/// One full warm-up round is discarded. Repetitions are interleaved across
/// `n`, so slow drift of the machine affects every size alike. Freed memory
/// is kept in the process for the rest of its life (see [`retain_freed_memory`]).
pub fn cost_scaling<O: Objective>(
    family: impl Fn(usize) -> Result<O, GradError>,
    n_list: &[usize],
    repetitions: usize,
) -> Result<Vec<TimingRow>, GradError> {
    if repetitions < 3 {
        return Err(GradError::Repetitions {
            min: 3,
            found: repetitions,
        });
    }
    retain_freed_memory();
    let objs = n_list
        .iter()
        .map(|&n| family(n).map(|o| (o.point(), o)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut fwd = vec![Vec::with_capacity(repetitions); n_list.len()];
    let mut rev = vec![Vec::with_capacity(repetitions); n_list.len()];
    for round in 0..=repetitions {
        for (i, (w, obj)) in objs.iter().enumerate() {
            let t = Instant::now();
            std::hint::black_box(obj.value(w)?);
            let f = t.elapsed().as_secs_f64() * 1e3;
            let t = Instant::now();
            std::hint::black_box(obj.gradient(w)?);
            let r = t.elapsed().as_secs_f64() * 1e3;
            if round > 0 {
                fwd[i].push(f);
                rev[i].push(r);
            }
        }
    }
    Ok(n_list
        .iter()
        .zip(fwd.into_iter().zip(rev))
        .map(|(&n, (f, r))| TimingRow {
            n_steps: n,
            forward_ms: median(f),
            vjp_ms: median(r),
        })
        .collect())
}

/// Stops glibc from handing freed heap back to the kernel. Without this every
/// gradient page-faults its tape memory in afresh, a cost that depends on
/// what ran before and makes timings of the same `n` differ by up to 2x.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
