//! Gradient-based inverse problems on the channel model: recovering an
//! initial temperature field from a later one, and recovering viscosity and
//! bottom friction from streamfunction snapshots.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::{self, DiffSelector, GradientRegistry, Leaves};
use crate::dyncore::{
    barotropic_streamfunction, mesoscale_eddies, model_leaves, DynError, Model, ModelState,
    PhysParams, Readout, Rollout, LEAF_A_H, LEAF_R_BOT, LEAF_T,
};
use crate::gradcheck::{norm, GradError, LeafObjective, Objective};
use crate::grid::{Field, GridSpec, Staggering};

/// Consecutive loss increases that count as divergence.
pub const DIVERGENCE_RUN: usize = 10;
/// Step halvings tried per iterate before giving up.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("diverged at iteration {iter}: loss rose {DIVERGENCE_RUN} times in a row with alpha = {alpha:e}; try a smaller alpha")]
    Diverged { iter: usize, alpha: f64 },
    #[error("non-finite loss at A_h = {a_h:e}, r_bot = {r_bot:e}")]
    NonFinite { a_h: f64, r_bot: f64 },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dyn(#[from] DynError),
}

impl From<autodiff::AdError> for CalibError {
    fn from(e: autodiff::AdError) -> Self {
        CalibError::Dyn(e.into())
    }
}

/// `f + amplitude exp(-r^2 / (2 sigma^2))` at cell centers, with the zonal
/// distance taken across the periodic boundary.
pub fn gaussian_perturbation(
    f: &Field,
    grid: &GridSpec,
    amplitude: f64,
    sigma: f64,
    center: (f64, f64),
) -> Result<Field, CalibError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(CalibError::Invalid(format!("sigma must be > 0, got {sigma}")));
    }
    f.check_grid(grid).map_err(DynError::from)?;
    if amplitude == 0.0 {
        return Ok(f.clone());
    }
    let stag = f.staggering();
    let mut out = f.clone();
    for j in 0..grid.ny {
        let dy = grid.y_of(stag, j) - center.1;
        for i in 0..grid.nx {
            let ax = (grid.x_of(stag, i) - center.0).rem_euclid(grid.lx);
            let dx = ax.min(grid.lx - ax);
            let bump = amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            out.set(i, j, f.get(i, j) + bump);
        }
    }
    Ok(out)
}

/// Cell center closest to the middle of the domain.
pub fn domain_center(grid: &GridSpec) -> (f64, f64) {
    (
        grid.x_of(Staggering::Center, grid.nx / 2),
        grid.y_of(Staggering::Center, grid.ny / 2),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    /// Named extra columns: a distance to the truth or parameter values.
    pub metrics: Vec<(String, f64)>,
    pub grad_norm: f64,
    /// Step size that produced the next iterate (0 for the last record).
    pub alpha: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimHistory {
    pub records: Vec<IterRecord>,
}

impl OptimHistory {
    pub fn metric_names(&self) -> Vec<String> {
        self.records
            .first()
            .map(|r| r.metrics.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default()
    }

    pub fn first(&self) -> Option<&IterRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    pub fn metric(&self, rec: &IterRecord, name: &str) -> Option<f64> {
        rec.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Iteration budget used up.
    MaxIters,
    /// Gradient or loss fell below tolerance.
    Converged,
    /// No halving of the step reduced the loss.
    Stalled,
}

/// Initial-temperature reconstruction: flow, elevation and parameters are
/// frozen at `background`; only the initial tracer varies.
#[derive(Debug, Clone)]
pub struct ReconProblem {
    pub model: Model,
    /// State whose tracer is the reference initial temperature.
    pub background: ModelState,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub history: OptimHistory,
    pub t0: Field,
    pub termination: Termination,
}

impl ReconProblem {
    /// `sum (S^l(T0) - S^l(T_ref))^2` as a differentiable rollout.
    pub fn rollout(&self) -> Result<Rollout, CalibError> {
        if self.steps == 0 {
            return Err(CalibError::Invalid("reconstruction needs at least one step".into()));
        }
        let target = self.model.step_n(&self.background, self.steps)?.t;
        Ok(Rollout::new(
            self.model.clone(),
            self.steps,
            Readout::TracerMisfit { target, scale: 1.0 },
        ))
    }

    fn leaves(&self, t0: &Field) -> Leaves {
        let mut s = self.background.clone();
        s.t = t0.clone();
        model_leaves(&s, &self.model.params)
    }

    /// Loss and gradient with respect to the initial tracer only.
    pub fn loss_and_grad(
        &self,
        f: &Rollout,
        t0: &Field,
        registry: &GradientRegistry,
    ) -> Result<(f64, Field), CalibError> {
        let (l, g) = autodiff::grad(f, &self.leaves(t0), &DiffSelector::only(&[LEAF_T]), registry)?;
        Ok((l, g.field(LEAF_T)?.clone()))
    }

    pub fn loss(&self, f: &Rollout, t0: &Field) -> Result<f64, CalibError> {
        Ok(f.loss(&self.leaves(t0))?)
    }
}

/// Step size from a parabola through the loss at `0, a, 2a` along `-g`, with
/// `a = L / |g|^2`.
fn parabola_alpha(
    l0: f64,
    g_sq: f64,
    eval: impl Fn(f64) -> Result<f64, CalibError>,
) -> Result<f64, CalibError> {
    let a = l0 / g_sq;
    let l1 = eval(a)?;
    let l2 = eval(2.0 * a)?;
    let curv = l0 - 2.0 * l1 + l2;
    if !(curv > 0.0) || !l1.is_finite() || !l2.is_finite() {
        return Ok(if l1 < l0 { a } else { 0.5 * a });
    }
    Ok(a * (3.0 * l0 - 4.0 * l1 + l2) / (2.0 * curv))
}

/// Plain gradient descent on the initial tracer. `alpha = None` picks the
/// step by a three-point line search at iteration 0 and keeps it fixed.
/// Stops early once the loss falls below `rel_tol` times its initial value.
pub fn reconstruct_initial_state(
    problem: &ReconProblem,
    perturbed_t0: &Field,
    alpha: Option<f64>,
    iters: usize,
    rel_tol: f64,
    registry: &GradientRegistry,
) -> Result<ReconResult, CalibError> {
    let f = problem.rollout()?;
    let t_ref = &problem.background.t;
    perturbed_t0.check_compatible(t_ref).map_err(DynError::from)?;
    let mut t0 = perturbed_t0.clone();
    let mut history = OptimHistory::default();
    let (mut loss, mut g) = problem.loss_and_grad(&f, &t0, registry)?;
    let l_init = loss;
    let alpha = match alpha {
        Some(a) if a > 0.0 => a,
        Some(a) => return Err(CalibError::Invalid(format!("alpha must be > 0, got {a}"))),
        None if loss == 0.0 => 0.0,
        None => {
            let base = t0.clone();
            let gg = g.clone();
            parabola_alpha(loss, g.norm2_sq(), |a| {
                let mut t = base.clone();
                t.axpy(-a, &gg).map_err(DynError::from)?;
                problem.loss(&f, &t)
            })?
        }
    };
    let mut rises = 0;
    let mut termination = Termination::MaxIters;
    for iter in 0..=iters {
        let mut dist = t0.clone();
        dist.axpy(-1.0, t_ref).map_err(DynError::from)?;
        let done = iter == iters || loss <= rel_tol * l_init || g.max_abs() == 0.0;
        history.records.push(IterRecord {
            iter,
            loss,
            metrics: vec![("distance".into(), dist.norm2_sq())],
            grad_norm: g.norm2_sq().sqrt(),
            alpha: if done { 0.0 } else { alpha },
        });
        if done {
            if iter < iters {
                termination = Termination::Converged;
            }
            break;
        }
        t0.axpy(-alpha, &g).map_err(DynError::from)?;
        let (l, ng) = problem.loss_and_grad(&f, &t0, registry)?;
        if !l.is_finite() {
            return Err(CalibError::Diverged { iter, alpha });
        }
        rises = if l > loss { rises + 1 } else { 0 };
        if rises >= DIVERGENCE_RUN {
            return Err(CalibError::Diverged { iter: iter + 1, alpha });
        }
        loss = l;
        g = ng;
    }
    Ok(ReconResult {
        history,
        t0,
        termination,
    })
}

/// Random balanced eddies superposed on the observation-window start.
#[derive(Debug, Clone, PartialEq)]
pub struct EddySpec {
    pub speed: f64,
    pub modes_x: (usize, usize),
    pub modes_y: (usize, usize),
}

/// Reference run and its streamfunction snapshots.
#[derive(Debug, Clone)]
pub struct CalibProblem {
    /// Model with the reference parameters.
    pub truth: Model,
    /// Start of the observation window.
    pub initial: ModelState,
    /// `(step, psi)` pairs of the reference run.
    pub observations: Vec<(usize, Field)>,
    pub window: usize,
    /// Loss normaliser: mean over snapshots of `mean(psi^2)`.
    pub scale: f64,
}

impl CalibProblem {
    /// Observes the truth run from `initial` every `every` steps up to `window`.
    pub fn new(truth: Model, initial: ModelState, window: usize, every: usize) -> Result<Self, CalibError> {
        if every == 0 || window == 0 || every > window {
            return Err(CalibError::Invalid(format!(
                "need 0 < every <= window, got every = {every}, window = {window}"
            )));
        }
        let steps: Vec<usize> = (1..=window / every).map(|k| k * every).collect();
        Self::with_steps(truth, initial, &steps)
    }

    pub fn with_steps(truth: Model, initial: ModelState, steps: &[usize]) -> Result<Self, CalibError> {
        let window = *steps
            .iter()
            .max()
            .ok_or_else(|| CalibError::Invalid("no observation steps".into()))?;
        let g = truth.grid.clone();
        let mut observations = Vec::with_capacity(steps.len());
        if steps.contains(&0) {
            observations.push((0, barotropic_streamfunction(&initial, &g)?));
        }
        let mut err = None;
        truth.trajectory(&initial, window, |k, s| {
            if steps.contains(&k) {
                match barotropic_streamfunction(s, &g) {
                    Ok(p) => observations.push((k, p)),
                    Err(e) => err = Some(e),
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e.into());
        }
        let scale = observations
            .iter()
            .map(|(_, p)| p.norm2_sq() / p.len() as f64)
            .sum::<f64>()
            / observations.len() as f64;
        if !(scale > 0.0) {
            return Err(CalibError::Invalid("observed streamfunction is identically zero".into()));
        }
        Ok(CalibProblem {
            truth,
            initial,
            observations,
            window,
            scale,
        })
    }

    /// Snapshot misfit as a differentiable rollout of the truth setup.
    pub fn rollout(&self) -> Rollout {
        Rollout::new(
            self.truth.clone(),
            self.window,
            Readout::BsfMisfit {
                snapshots: self.observations.clone(),
                scale: 1.0 / self.scale,
            },
        )
    }

    /// Misfit over `(log A_h, log r_bot)` relative to `(a_h, r_bot)`.
    pub fn objective<'r>(
        &self,
        a_h: f64,
        r_bot: f64,
        registry: &'r GradientRegistry,
    ) -> Result<LeafObjective<'r, Rollout>, CalibError> {
        let mut params = self.truth.params.clone();
        params.a_h = a_h;
        params.r_bot = r_bot;
        let base = model_leaves(&self.initial, &params);
        Ok(LeafObjective::new(self.rollout(), base, registry)
            .log(LEAF_A_H)?
            .log(LEAF_R_BOT)?)
    }

    pub fn loss(&self, a_h: f64, r_bot: f64, registry: &GradientRegistry) -> Result<f64, CalibError> {
        let obj = self.objective(a_h, r_bot, registry)?;
        Ok(obj.value(&obj.point())?)
    }
}

/// Spin-up from rest under the model's forcing, then balanced eddies.
pub fn observation_start(
    model: &Model,
    spinup_steps: usize,
    eddies: Option<&EddySpec>,
    seed: u64,
) -> Result<ModelState, CalibError> {
    let rest = ModelState::rest(&model.grid, &model.params);
    let mut s = model.step_n(&rest, spinup_steps)?;
    if let Some(e) = eddies {
        let (u, v, eta) = mesoscale_eddies(
            &model.grid,
            model.params.g,
            seed,
            e.speed,
            e.modes_x.0..=e.modes_x.1,
            e.modes_y.0..=e.modes_y.1,
        )?;
        s.u.axpy(1.0, &u).map_err(DynError::from)?;
        s.v.axpy(1.0, &v).map_err(DynError::from)?;
        s.eta.axpy(1.0, &eta).map_err(DynError::from)?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibConfig {
    /// Step in log-parameter space before halving.
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this fraction of its initial value.
    pub grad_tol: f64,
}

#[derive(Debug, Clone)]
pub struct CalibResult {
    pub history: OptimHistory,
    pub a_h: f64,
    pub r_bot: f64,
    pub termination: Termination,
}

/// Gradient descent on `(log A_h, log r_bot)` with halve-on-increase backtracking.
pub fn calibrate_params(
    problem: &CalibProblem,
    init: (f64, f64),
    cfg: &CalibConfig,
    registry: &GradientRegistry,
) -> Result<CalibResult, CalibError> {
    if !(init.0 > 0.0 && init.1 > 0.0) {
        return Err(CalibError::Invalid(format!(
            "initial parameters must be positive, got {init:?}"
        )));
    }
    if !(cfg.alpha > 0.0) {
        return Err(CalibError::Invalid(format!("alpha must be > 0, got {}", cfg.alpha)));
    }
    let obj = problem.objective(init.0, init.1, registry)?;
    let phys = |w: &[f64]| (init.0 * w[0].exp(), init.1 * w[1].exp());
    let guard = |w: &[f64], r: Result<f64, GradError>| -> Result<f64, CalibError> {
        let (a_h, r_bot) = phys(w);
        match r {
            Ok(l) if l.is_finite() => Ok(l),
            Ok(_) | Err(GradError::Dyn(DynError::NonFinite { .. })) => {
                Err(CalibError::NonFinite { a_h, r_bot })
            }
            Err(e) => Err(e.into()),
        }
    };
    let mut w = obj.point();
    let (l, mut g) = obj.gradient(&w)?;
    let mut loss = guard(&w, Ok(l))?;
    let g0 = norm(&g);
    let mut history = OptimHistory::default();
    let mut termination = Termination::MaxIters;
    for iter in 0..=cfg.max_iters {
        let (a_h, r_bot) = phys(&w);
        let gn = norm(&g);
        let mut rec = IterRecord {
            iter,
            loss,
            metrics: vec![(LEAF_A_H.into(), a_h), (LEAF_R_BOT.into(), r_bot)],
            grad_norm: gn,
            alpha: 0.0,
        };
        if iter == cfg.max_iters {
            history.records.push(rec);
            break;
        }
        if gn == 0.0 || gn <= cfg.grad_tol * g0 {
            termination = Termination::Converged;
            history.records.push(rec);
            break;
        }
        let mut a = cfg.alpha;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(x, d)| x - a * d).collect();
            let lt = guard(&trial, obj.value(&trial))?;
            if lt <= loss {
                accepted = Some(trial);
                break;
            }
            a *= 0.5;
        }
        let Some(next) = accepted else {
            termination = Termination::Stalled;
            history.records.push(rec);
            break;
        };
        rec.alpha = a;
        history.records.push(rec);
        w = next;
        let (l, ng) = obj.gradient(&w)?;
        loss = guard(&w, Ok(l))?;
        g = ng;
    }
    let (a_h, r_bot) = phys(&w);
    Ok(CalibResult {
        history,
        a_h,
        r_bot,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCell {
    pub a_h: f64,
    pub r_bot: f64,
    /// `None` when the run blew up.
    pub loss: Option<f64>,
    pub dl_da_h: f64,
    pub dl_dr_bot: f64,
}

impl SensitivityCell {
    /// Gradient in `(log A_h, log r_bot)` coordinates.
    pub fn log_gradient(&self) -> [f64; 2] {
        [self.dl_da_h * self.a_h, self.dl_dr_bot * self.r_bot]
    }
}

/// Row-major over `r_bot` (outer) and `A_h` (inner).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityGrid {
    pub a_h: Vec<f64>,
    pub r_bot: Vec<f64>,
    pub cells: Vec<SensitivityCell>,
}

impl SensitivityGrid {
    pub fn cell(&self, ia: usize, ir: usize) -> &SensitivityCell {
        &self.cells[ir * self.a_h.len() + ia]
    }
}

/// `n` values from `lo` to `hi`, evenly spaced in log.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            (lo.ln() * (1.0 - t) + hi.ln() * t).exp()
        })
        .collect()
}

/// Values `center * 10^(decades (2k/(n-1) - 1))`, exact at the middle for odd `n`.
pub fn decade_bracket(center: f64, decades: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let e = 2 * k as i64 - (n as i64 - 1);
            if e == 0 {
                center
            } else {
                center * 10f64.powf(decades * e as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Loss and both partials at every `(A_h, r_bot)` pair, by forward mode.
pub fn sensitivity_grid(
    problem: &CalibProblem,
    a_h: &[f64],
    r_bot: &[f64],
    registry: &GradientRegistry,
) -> Result<SensitivityGrid, CalibError> {
    if a_h.len() < 3 || r_bot.len() < 3 {
        return Err(CalibError::Invalid("sensitivity grid needs at least 3x3 samples".into()));
    }
    if a_h.iter().chain(r_bot).any(|&x| !(x > 0.0)) {
        return Err(CalibError::Invalid("sample values must be positive".into()));
    }
    let mut cells = Vec::with_capacity(a_h.len() * r_bot.len());
    for &r in r_bot {
        for &a in a_h {
            let obj = problem.objective(a, r, registry)?;
            let w = obj.point();
            let partial = |k: &[f64]| -> Result<Option<(f64, f64)>, CalibError> {
                match obj.jvp(&w, k) {
                    Ok((l, d)) if l.is_finite() => Ok(Some((l, d))),
                    Ok(_) | Err(GradError::Dyn(DynError::NonFinite { .. })) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            };
            // log-coordinate derivatives back to raw partials
            let cell = match (partial(&[1.0, 0.0])?, partial(&[0.0, 1.0])?) {
                (Some((l, da)), Some((_, dr))) => SensitivityCell {
                    a_h: a,
                    r_bot: r,
                    loss: Some(l),
                    dl_da_h: da / a,
                    dl_dr_bot: dr / r,
                },
                _ => SensitivityCell {
                    a_h: a,
                    r_bot: r,
                    loss: None,
                    dl_da_h: f64::NAN,
                    dl_dr_bot: f64::NAN,
                },
            };
            cells.push(cell);
        }
    }
    Ok(SensitivityGrid {
        a_h: a_h.to_vec(),
        r_bot: r_bot.to_vec(),
        cells,
    })
}

/// Parameters with `A_h` and `r_bot` replaced.
pub fn with_friction(p: &PhysParams, a_h: f64, r_bot: f64) -> PhysParams {
    PhysParams {
        a_h,
        r_bot,
        ..p.clone()
    }
}

/// Integral of a unit Gaussian bump over the plane, in cells.
pub fn gaussian_cell_integral(sigma: f64, dx: f64, dy: f64) -> f64 {
    2.0 * PI * sigma * sigma / (dx * dy)
}

#[cfg(test)]
mod tests;
