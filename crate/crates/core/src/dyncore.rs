//! Rotating shallow-water channel with a temperature tracer.
//!
//! Forward-backward stepping: elevation first, then momentum using the new
//! elevation, then the tracer advected by the new flow. Momentum is linear
//! (no self-advection). The step is written once over [`Backend`] so the same
//! code runs plainly, in forward mode and on a tape.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    self, AdError, Backend, Coef, DiffFn, Eval, Handle, Inputs, Leaves, Value, SQRT,
};
use crate::grid::{Field, GridError, GridSpec, Metrics, Staggering};

pub const LEAF_U: &str = "u";
pub const LEAF_V: &str = "v";
pub const LEAF_ETA: &str = "eta";
pub const LEAF_T: &str = "T";
pub const LEAF_A_H: &str = "A_h";
pub const LEAF_R_BOT: &str = "r_bot";
pub const LEAF_C_D: &str = "C_d";
pub const LEAF_KAPPA_T: &str = "kappa_T";
pub const LEAF_LAMBDA: &str = "lambda_relax";
pub const LEAF_TAU0: &str = "tau0";

pub const STATE_LEAVES: [&str; 4] = [LEAF_U, LEAF_V, LEAF_ETA, LEAF_T];
pub const PARAM_LEAVES: [&str; 6] = [LEAF_A_H, LEAF_R_BOT, LEAF_C_D, LEAF_KAPPA_T, LEAF_LAMBDA, LEAF_TAU0];

/// Reference lateral viscosity of the idealised ACC setup (m^2/s).
pub const A_H_REF: f64 = 3435.5036038313715;
/// Reference linear bottom friction (1/s).
pub const R_BOT_REF: f64 = 1e-5;

/// Courant number bound for gravity waves.
pub const CFL_MAX: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynError {
    #[error("CFL violated: courant number {courant:.4} >= {limit}")]
    Cfl { courant: f64, limit: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite values in field {field} (step {step:?})")]
    NonFinite { field: String, step: Option<usize> },
    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Ad(AdError),
}

impl From<AdError> for DynError {
    fn from(e: AdError) -> Self {
        match e {
            AdError::NonFinite { name, step } => DynError::NonFinite { field: name, step },
            AdError::Grid(g) => DynError::Grid(g),
            other => DynError::Ad(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DragMode {
    Linear,
    Quadratic,
}

impl DragMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(DragMode::Linear),
            "quadratic" => Some(DragMode::Quadratic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DragMode::Linear => "linear",
            DragMode::Quadratic => "quadratic",
        }
    }
}

/// Physical parameters. The scalar coefficients are differentiable leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysParams {
    pub a_h: f64,
    pub r_bot: f64,
    pub drag_mode: DragMode,
    pub c_d: f64,
    pub g: f64,
    pub rho0: f64,
    pub tau0: f64,
    /// Southern fraction of the channel under wind forcing.
    pub wind_band: f64,
    pub kappa_t: f64,
    pub lambda_relax: f64,
    /// Relaxation target at cell centers.
    pub t_star: Field,
}

impl PhysParams {
    /// Table values of the idealised ACC case with a linear relaxation profile.
    pub fn reference(grid: &GridSpec) -> Self {
        PhysParams {
            a_h: A_H_REF,
            r_bot: R_BOT_REF,
            drag_mode: DragMode::Linear,
            c_d: 1e-3,
            g: 9.81,
            rho0: 1025.0,
            tau0: 0.1,
            wind_band: 0.5,
            kappa_t: 500.0,
            lambda_relax: 1.0 / (30.0 * 86400.0),
            t_star: linear_profile(grid, 2.0, 20.0),
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(), DynError> {
        for (name, v) in [
            (LEAF_A_H, self.a_h),
            (LEAF_R_BOT, self.r_bot),
            (LEAF_C_D, self.c_d),
            (LEAF_KAPPA_T, self.kappa_t),
            (LEAF_LAMBDA, self.lambda_relax),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DynError::InvalidParams(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.tau0.is_finite() {
            return Err(DynError::InvalidParams("tau0 must be finite".into()));
        }
        if !(self.g.is_finite() && self.g >= 0.0) {
            return Err(DynError::InvalidParams(format!("g must be >= 0, got {}", self.g)));
        }
        if !(self.rho0.is_finite() && self.rho0 > 0.0) {
            return Err(DynError::InvalidParams(format!("rho0 must be > 0, got {}", self.rho0)));
        }
        if !(self.wind_band > 0.0 && self.wind_band <= 1.0) {
            return Err(DynError::InvalidParams(format!(
                "wind_band must lie in (0, 1], got {}",
                self.wind_band
            )));
        }
        self.t_star.check_grid(grid)?;
        if self.t_star.staggering() != Staggering::Center {
            return Err(DynError::InvalidParams("T_star must live at cell centers".into()));
        }
        Ok(())
    }

    /// Differentiable scalar leaves with their current values.
    pub fn leaves(&self) -> Leaves {
        Leaves::new()
            .with_scalar(LEAF_A_H, self.a_h)
            .with_scalar(LEAF_R_BOT, self.r_bot)
            .with_scalar(LEAF_C_D, self.c_d)
            .with_scalar(LEAF_KAPPA_T, self.kappa_t)
            .with_scalar(LEAF_LAMBDA, self.lambda_relax)
            .with_scalar(LEAF_TAU0, self.tau0)
    }
}

/// Meridionally linear center field from `south` at y = 0 to `north` at y = Ly.
pub fn linear_profile(grid: &GridSpec, south: f64, north: f64) -> Field {
    Field::from_fn(grid, Staggering::Center, |_, j| {
        south + (north - south) * grid.y_of(Staggering::Center, j) / grid.ly
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Floor of the regularised square-root gradient.
    pub eps_reg: f64,
}

impl StepConfig {
    pub fn new(dt: f64, n_steps: usize) -> Self {
        StepConfig {
            dt,
            n_steps,
            eps_reg: autodiff::DEFAULT_EPS_REG,
        }
    }
}

/// `dt * sqrt(g H) * max(1/dx, 1/dy)`
pub fn courant_number(grid: &GridSpec, g: f64, dt: f64) -> f64 {
    dt * (g * grid.depth).sqrt() * (1.0 / grid.dx).max(1.0 / grid.dy)
}

/// Time step at which the courant number reaches [`CFL_MAX`].
pub fn cfl_limit_dt(grid: &GridSpec, g: f64) -> f64 {
    CFL_MAX / ((g * grid.depth).sqrt() * (1.0 / grid.dx).max(1.0 / grid.dy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub u: Field,
    pub v: Field,
    pub eta: Field,
    pub t: Field,
    /// Seconds since start.
    pub time: f64,
}

impl ModelState {
    pub fn zeros(grid: &GridSpec) -> Self {
        ModelState {
            u: Field::zeros(grid, Staggering::UFace),
            v: Field::zeros(grid, Staggering::VFace),
            eta: Field::zeros(grid, Staggering::Center),
            t: Field::zeros(grid, Staggering::Center),
            time: 0.0,
        }
    }

    /// Fluid at rest with the tracer at its relaxation target.
    pub fn rest(grid: &GridSpec, params: &PhysParams) -> Self {
        ModelState {
            t: params.t_star.clone(),
            ..Self::zeros(grid)
        }
    }

    pub fn fields(&self) -> [(&'static str, &Field); 4] {
        [
            (LEAF_U, &self.u),
            (LEAF_V, &self.v),
            (LEAF_ETA, &self.eta),
            (LEAF_T, &self.t),
        ]
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(), DynError> {
        let expect = [
            Staggering::UFace,
            Staggering::VFace,
            Staggering::Center,
            Staggering::Center,
        ];
        for ((name, f), stag) in self.fields().into_iter().zip(expect) {
            f.check_grid(grid)?;
            if f.staggering() != stag {
                return Err(GridError::StaggeringMismatch {
                    left: stag,
                    right: f.staggering(),
                }
                .into());
            }
            if !f.all_finite() {
                return Err(DynError::NonFinite {
                    field: name.to_string(),
                    step: None,
                });
            }
        }
        Ok(())
    }

    pub fn leaves(&self) -> Leaves {
        Leaves::new()
            .with_field(LEAF_U, self.u.clone())
            .with_field(LEAF_V, self.v.clone())
            .with_field(LEAF_ETA, self.eta.clone())
            .with_field(LEAF_T, self.t.clone())
    }

    pub fn from_leaves(x: &Leaves, time: f64) -> Result<Self, AdError> {
        Ok(ModelState {
            u: x.field(LEAF_U)?.clone(),
            v: x.field(LEAF_V)?.clone(),
            eta: x.field(LEAF_ETA)?.clone(),
            t: x.field(LEAF_T)?.clone(),
            time,
        })
    }

    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.u.bit_eq(&other.u)
            && self.v.bit_eq(&other.v)
            && self.eta.bit_eq(&other.eta)
            && self.t.bit_eq(&other.t)
            && self.time.to_bits() == other.time.to_bits()
    }

    /// `sum 1/2 H (u^2 + v^2) + 1/2 g eta^2`
    pub fn energy(&self, grid: &GridSpec, g: f64) -> f64 {
        0.5 * grid.depth * (self.u.norm2_sq() + self.v.norm2_sq()) + 0.5 * g * self.eta.norm2_sq()
    }
}

/// State and parameter leaves combined, as consumed by [`Rollout`].
pub fn model_leaves(state: &ModelState, params: &PhysParams) -> Leaves {
    let mut x = state.leaves();
    for (k, v) in params.leaves().iter() {
        x.insert(k, v.clone());
    }
    x
}

/// Eastward stress at height `y`: `tau0 sin^2(pi y / (band Ly))` inside the
/// southern band, zero north of it.
pub fn wind_stress_at(y: f64, tau0: f64, band: f64, ly: f64) -> f64 {
    let top = band * ly;
    if (0.0..=top).contains(&y) {
        let s = (PI * y / top).sin();
        tau0 * s * s
    } else {
        0.0
    }
}

pub fn wind_stress_profile(grid: &GridSpec, tau0: f64, band: f64) -> Result<Field, DynError> {
    if !(band > 0.0 && band <= 1.0) {
        return Err(DynError::InvalidParams(format!("band must lie in (0, 1], got {band}")));
    }
    Ok(Field::from_fn(grid, Staggering::UFace, |_, j| {
        wind_stress_at(grid.y_of(Staggering::UFace, j), tau0, band, grid.ly)
    }))
}

/// Grid, constant physics and stepping setup; the non-differentiable part of
/// a model run.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: GridSpec,
    pub params: PhysParams,
    pub config: StepConfig,
    metrics: Metrics,
    /// Wind profile for unit `tau0`, divided by `rho0 H`.
    wind_accel: Field,
    f_u: Field,
    f_v: Field,
    masks: Option<(Field, Field, Field)>,
}

struct Consts<B: Backend> {
    wind: B::F,
    f_u: B::F,
    f_v: B::F,
    t_star: B::F,
    masks: Option<(B::F, B::F, B::F)>,
}

/// Backend handles of the prognostic fields.
pub struct StateH<B: Backend> {
    pub u: B::F,
    pub v: B::F,
    pub eta: B::F,
    pub t: B::F,
}

impl<B: Backend> Clone for StateH<B> {
    fn clone(&self) -> Self {
        StateH {
            u: self.u.clone(),
            v: self.v.clone(),
            eta: self.eta.clone(),
            t: self.t.clone(),
        }
    }
}

/// Backend handles of the differentiable parameters.
pub struct ParamsH<B: Backend> {
    pub a_h: B::S,
    pub r_bot: B::S,
    pub c_d: B::S,
    pub kappa_t: B::S,
    pub lambda: B::S,
    pub tau0: B::S,
}

impl Model {
    pub fn new(grid: GridSpec, params: PhysParams, config: StepConfig) -> Result<Self, DynError> {
        params.validate(&grid)?;
        if !(config.dt.is_finite() && config.dt > 0.0) {
            return Err(DynError::InvalidParams(format!("dt must be > 0, got {}", config.dt)));
        }
        if !(config.eps_reg > 0.0) {
            return Err(DynError::InvalidParams("eps_reg must be > 0".into()));
        }
        let courant = courant_number(&grid, params.g, config.dt);
        if courant >= CFL_MAX {
            return Err(DynError::Cfl {
                courant,
                limit: CFL_MAX,
            });
        }
        let unit = wind_stress_profile(&grid, 1.0, params.wind_band)?;
        let wind_accel = unit.map(|t| t / (params.rho0 * grid.depth));
        let masks = if grid.is_all_ocean() {
            None
        } else {
            Some((
                grid.wet_mask(Staggering::UFace),
                grid.wet_mask(Staggering::VFace),
                grid.wet_mask(Staggering::Center),
            ))
        };
        Ok(Model {
            metrics: grid.metrics(),
            wind_accel,
            f_u: grid.coriolis(Staggering::UFace),
            f_v: grid.coriolis(Staggering::VFace),
            masks,
            grid,
            params,
            config,
        })
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    /// Model with the same setup and different parameters.
    pub fn with_params(&self, params: PhysParams) -> Result<Self, DynError> {
        Model::new(self.grid.clone(), params, self.config.clone())
    }

    fn lift<B: Backend>(&self, b: &mut B) -> Result<Consts<B>, AdError> {
        let masks = match &self.masks {
            Some((mu, mv, mc)) => Some((
                b.constant(mu.clone())?,
                b.constant(mv.clone())?,
                b.constant(mc.clone())?,
            )),
            None => None,
        };
        Ok(Consts {
            wind: b.constant(self.wind_accel.clone())?,
            f_u: b.constant(self.f_u.clone())?,
            f_v: b.constant(self.f_v.clone())?,
            t_star: b.constant(self.params.t_star.clone())?,
            masks,
        })
    }

    /// Parameter handles from leaves, falling back to constants for absent ones.
    pub fn params_h<B: Backend>(&self, b: &mut B, x: &Inputs<B>) -> Result<ParamsH<B>, AdError> {
        let mut get = |name: &str, default: f64| -> Result<B::S, AdError> {
            match x.scalar(name) {
                Ok(s) => Ok(s),
                Err(AdError::MissingLeaf(_)) => b.constant_scalar(default),
                Err(e) => Err(e),
            }
        };
        let p = &self.params;
        Ok(ParamsH {
            a_h: get(LEAF_A_H, p.a_h)?,
            r_bot: get(LEAF_R_BOT, p.r_bot)?,
            c_d: get(LEAF_C_D, p.c_d)?,
            kappa_t: get(LEAF_KAPPA_T, p.kappa_t)?,
            lambda: get(LEAF_LAMBDA, p.lambda_relax)?,
            tau0: get(LEAF_TAU0, p.tau0)?,
        })
    }

    pub fn state_h<B: Backend>(x: &Inputs<B>) -> Result<StateH<B>, AdError> {
        Ok(StateH {
            u: x.field(LEAF_U)?,
            v: x.field(LEAF_V)?,
            eta: x.field(LEAF_ETA)?,
            t: x.field(LEAF_T)?,
        })
    }

    /// Speed at the faces of `w`, through the regularised square root.
    fn speed<B: Backend>(&self, b: &mut B, w: &B::F, other_at_w: &B::F) -> Result<B::F, AdError> {
        let w2 = b.mul(w, w)?;
        let o2 = b.mul(other_at_w, other_at_w)?;
        let s2 = b.add(&w2, &o2)?;
        b.unary(&SQRT, &s2)
    }

    fn step_h<B: Backend>(
        &self,
        b: &mut B,
        c: &Consts<B>,
        s: &StateH<B>,
        p: &ParamsH<B>,
        step: usize,
    ) -> Result<StateH<B>, AdError> {
        b.begin_step(step);
        let m = &self.metrics;
        let dt = self.config.dt;
        let h = self.grid.depth;
        let g = self.params.g;

        // continuity
        let dudx = b.ddx(&s.u, m)?;
        let dvdy = b.ddy(&s.v, m)?;
        let mut eta = b.lincomb(&[
            (Coef::Const(1.0), &s.eta),
            (Coef::Const(-dt * h), &dudx),
            (Coef::Const(-dt * h), &dvdy),
        ])?;
        if let Some((_, _, mc)) = &c.masks {
            eta = b.mul(&eta, mc)?;
        }

        // zonal momentum, Coriolis from the old v
        let v_c = b.interp(&s.v, Staggering::Center, m)?;
        let v_at_u = b.interp(&v_c, Staggering::UFace, m)?;
        let fv = b.mul(&c.f_u, &v_at_u)?;
        let detadx = b.ddx(&eta, m)?;
        let lap_u = b.laplacian(&s.u, m)?;
        let drag_u = match self.params.drag_mode {
            DragMode::Linear => None,
            DragMode::Quadratic => {
                let sp = self.speed(b, &s.u, &v_at_u)?;
                Some(b.mul(&sp, &s.u)?)
            }
        };
        let mut terms = vec![
            (Coef::Const(1.0), &s.u),
            (Coef::Const(dt), &fv),
            (Coef::Const(-dt * g), &detadx),
            (Coef::Scaled(dt, p.a_h.clone()), &lap_u),
        ];
        match &drag_u {
            None => terms.push((Coef::Scaled(-dt, p.r_bot.clone()), &s.u)),
            Some(d) => terms.push((Coef::Scaled(-dt / h, p.c_d.clone()), d)),
        }
        terms.push((Coef::Scaled(dt, p.tau0.clone()), &c.wind));
        let mut u = b.lincomb(&terms)?;
        if let Some((mu, _, _)) = &c.masks {
            u = b.mul(&u, mu)?;
        }

        // meridional momentum, Coriolis from the new u
        let u_c = b.interp(&u, Staggering::Center, m)?;
        let u_at_v = b.interp(&u_c, Staggering::VFace, m)?;
        let fu = b.mul(&c.f_v, &u_at_v)?;
        let detady = b.ddy(&eta, m)?;
        let lap_v = b.laplacian(&s.v, m)?;
        let drag_v = match self.params.drag_mode {
            DragMode::Linear => None,
            DragMode::Quadratic => {
                let old_u_c = b.interp(&s.u, Staggering::Center, m)?;
                let old_u_at_v = b.interp(&old_u_c, Staggering::VFace, m)?;
                let sp = self.speed(b, &s.v, &old_u_at_v)?;
                Some(b.mul(&sp, &s.v)?)
            }
        };
        let mut terms = vec![
            (Coef::Const(1.0), &s.v),
            (Coef::Const(-dt), &fu),
            (Coef::Const(-dt * g), &detady),
            (Coef::Scaled(dt, p.a_h.clone()), &lap_v),
        ];
        match &drag_v {
            None => terms.push((Coef::Scaled(-dt, p.r_bot.clone()), &s.v)),
            Some(d) => terms.push((Coef::Scaled(-dt / h, p.c_d.clone()), d)),
        }
        let mut v = b.lincomb(&terms)?;
        if let Some((_, mv, _)) = &c.masks {
            v = b.mul(&v, mv)?;
        }

        // tracer, flux-form upwind advection by the new flow
        let fx = b.upwind_flux(&u, &s.t, m)?;
        let fy = b.upwind_flux(&v, &s.t, m)?;
        let div_x = b.ddx(&fx, m)?;
        let div_y = b.ddy(&fy, m)?;
        let lap_t = b.laplacian(&s.t, m)?;
        let mut t = b.lincomb(&[
            (Coef::Const(1.0), &s.t),
            (Coef::Const(-dt), &div_x),
            (Coef::Const(-dt), &div_y),
            (Coef::Scaled(dt, p.kappa_t.clone()), &lap_t),
            (Coef::Scaled(dt, p.lambda.clone()), &c.t_star),
            (Coef::Scaled(-dt, p.lambda.clone()), &s.t),
        ])?;
        if let Some((_, _, mc)) = &c.masks {
            t = b.mul(&t, mc)?;
        }

        let out = StateH { u, v, eta, t };
        for (name, f) in [(LEAF_U, &out.u), (LEAF_V, &out.v), (LEAF_ETA, &out.eta), (LEAF_T, &out.t)] {
            if !b.value(f).all_finite() {
                return Err(AdError::NonFinite {
                    name: name.to_string(),
                    step: Some(step),
                });
            }
        }
        Ok(out)
    }

    /// Runs `n` steps on any backend, calling `observe(k, state)` after each
    /// step `k = 1..=n` (and once with `k = 0` before the first).
    pub fn rollout_h<B: Backend>(
        &self,
        b: &mut B,
        s0: StateH<B>,
        p: &ParamsH<B>,
        n: usize,
        mut observe: impl FnMut(&mut B, usize, &StateH<B>) -> Result<(), AdError>,
    ) -> Result<StateH<B>, AdError> {
        let c = self.lift(b)?;
        let mut s = s0;
        observe(b, 0, &s)?;
        for k in 1..=n {
            s = self.step_h(b, &c, &s, p, k)?;
            observe(b, k, &s)?;
        }
        Ok(s)
    }

    fn plain_params(&self) -> ParamsH<Eval> {
        let p = &self.params;
        ParamsH {
            a_h: p.a_h,
            r_bot: p.r_bot,
            c_d: p.c_d,
            kappa_t: p.kappa_t,
            lambda: p.lambda_relax,
            tau0: p.tau0,
        }
    }

    pub fn step(&self, s: &ModelState) -> Result<ModelState, DynError> {
        self.step_n(s, 1)
    }

    /// `n`-fold composition of [`Model::step`]; `n = 0` returns a copy.
    pub fn step_n(&self, s: &ModelState, n: usize) -> Result<ModelState, DynError> {
        self.trajectory(s, n, |_, _| {})
    }

    /// Like [`Model::step_n`], calling `observe(k, state)` after every step.
    pub fn trajectory(
        &self,
        s: &ModelState,
        n: usize,
        mut observe: impl FnMut(usize, &ModelState),
    ) -> Result<ModelState, DynError> {
        s.validate(&self.grid)?;
        let mut b = Eval;
        let s0 = StateH::<Eval> {
            u: s.u.clone(),
            v: s.v.clone(),
            eta: s.eta.clone(),
            t: s.t.clone(),
        };
        let p = self.plain_params();
        let dt = self.config.dt;
        let mut time = s.time;
        let out = self.rollout_h(&mut b, s0, &p, n, |_, k, st| {
            if k > 0 {
                time += dt;
                observe(
                    k,
                    &ModelState {
                        u: st.u.clone(),
                        v: st.v.clone(),
                        eta: st.eta.clone(),
                        t: st.t.clone(),
                        time,
                    },
                );
            }
            Ok(())
        })?;
        let mut time = s.time;
        for _ in 0..n {
            time += dt;
        }
        Ok(ModelState {
            u: out.u,
            v: out.v,
            eta: out.eta,
            t: out.t,
            time,
        })
    }
}

/// One step of `s` under `p` on grid `g`.
pub fn step(s: &ModelState, p: &PhysParams, g: &GridSpec, c: &StepConfig) -> Result<ModelState, DynError> {
    Model::new(g.clone(), p.clone(), c.clone())?.step(s)
}

pub fn step_n(
    s: &ModelState,
    n: usize,
    p: &PhysParams,
    g: &GridSpec,
    c: &StepConfig,
) -> Result<ModelState, DynError> {
    Model::new(g.clone(), p.clone(), c.clone())?.step_n(s, n)
}

/// `psi(i, j) = sum_{j' <= j} H u(i, j') dy`, zero at the southern wall.
pub fn barotropic_streamfunction(s: &ModelState, g: &GridSpec) -> Result<Field, DynError> {
    s.u.check_grid(g)?;
    bsf_h(&mut Eval, &s.u, g).map_err(DynError::from)
}

pub fn bsf_h<B: Backend>(b: &mut B, u: &B::F, g: &GridSpec) -> Result<B::F, AdError> {
    b.cumsum_y(u, g.depth * g.dy, Staggering::Center)
}

/// Zonal volume transport through the meridional section at column `i` (Sv).
pub fn transport(s: &ModelState, g: &GridSpec, i: usize) -> Result<f64, DynError> {
    s.u.check_grid(g)?;
    if i >= g.nx {
        return Err(DynError::IndexOutOfRange { index: i, len: g.nx });
    }
    let total: f64 = (0..g.ny).map(|j| g.depth * s.u.get(i, j) * g.dy).sum();
    Ok(total / 1e6)
}

/// Mean over cells of `(psi(s) - ref_psi)^2`.
pub fn bsf_mse_loss(s: &ModelState, ref_psi: &Field, g: &GridSpec) -> Result<f64, DynError> {
    s.u.check_grid(g)?;
    ref_psi.check_grid(g)?;
    let mut b = Eval;
    let psi = bsf_h(&mut b, &s.u, g)?;
    let r = b.constant(ref_psi.clone())?;
    Ok(mse_h(&mut b, &psi, &r)?)
}

/// Mean squared difference of two fields.
pub fn mse_h<B: Backend>(b: &mut B, a: &B::F, r: &B::F) -> Result<B::S, AdError> {
    let n = b.value(a).len() as f64;
    let d = b.sub(a, r)?;
    let sq = b.mul(&d, &d)?;
    let total = b.sum(&sq)?;
    b.s_scale(1.0 / n, &total)
}

/// Sum of squared differences of two fields.
pub fn sse_h<B: Backend>(b: &mut B, a: &B::F, r: &B::F) -> Result<B::S, AdError> {
    let d = b.sub(a, r)?;
    let sq = b.mul(&d, &d)?;
    b.sum(&sq)
}

/// What a [`Rollout`] returns.
#[derive(Debug, Clone)]
pub enum Readout {
    /// Final `u, v, eta, T` as four field outputs.
    State,
    /// `scale * sum (T_n - target)^2`.
    TracerMisfit { target: Field, scale: f64 },
    /// `scale * mean_k mse(psi_k, ref_k)` over snapshots `(step, ref_psi)`.
    BsfMisfit { snapshots: Vec<(usize, Field)>, scale: f64 },
    /// `scale * sum_f w_f mean(f_n^2)` over `u, v, eta, T`.
    Aggregate { weights: [f64; 4], scale: f64 },
}

/// An `n`-step run from the leaves' state under the leaves' parameters, as a
/// differentiable function. Parameters absent from the leaves are constants.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub model: Model,
    pub n_steps: usize,
    pub readout: Readout,
}

impl Rollout {
    pub fn new(model: Model, n_steps: usize, readout: Readout) -> Self {
        Rollout {
            model,
            n_steps,
            readout,
        }
    }

    /// Scalar readout evaluated without derivatives.
    pub fn loss(&self, x: &Leaves) -> Result<f64, AdError> {
        match autodiff::eval(self, x)?.as_slice() {
            [Value::Scalar(l)] => Ok(*l),
            _ => Err(AdError::NonScalarLoss),
        }
    }
}

impl DiffFn for Rollout {
    fn eval<B: Backend>(&self, b: &mut B, x: &Inputs<B>) -> Result<Vec<Handle<B>>, AdError> {
        let s0 = Model::state_h(x)?;
        let p = self.model.params_h(b, x)?;
        let g = &self.model.grid;
        match &self.readout {
            Readout::State => {
                let s = self.model.rollout_h(b, s0, &p, self.n_steps, |_, _, _| Ok(()))?;
                Ok(vec![
                    Handle::Field(s.u),
                    Handle::Field(s.v),
                    Handle::Field(s.eta),
                    Handle::Field(s.t),
                ])
            }
            Readout::TracerMisfit { target, scale } => {
                let s = self.model.rollout_h(b, s0, &p, self.n_steps, |_, _, _| Ok(()))?;
                let r = b.constant(target.clone())?;
                let l = sse_h(b, &s.t, &r)?;
                Ok(vec![Handle::Scalar(b.s_scale(*scale, &l)?)])
            }
            Readout::BsfMisfit { snapshots, scale } => {
                if snapshots.is_empty() {
                    return Err(AdError::OutputCount { expected: 1, found: 0 });
                }
                let mut acc: Option<B::S> = None;
                self.model.rollout_h(b, s0, &p, self.n_steps, |b, k, s| {
                    for (_, r) in snapshots.iter().filter(|(at, _)| *at == k) {
                        let psi = bsf_h(b, &s.u, g)?;
                        let rc = b.constant(r.clone())?;
                        let l = mse_h(b, &psi, &rc)?;
                        acc = Some(match acc.take() {
                            None => l,
                            Some(a) => b.s_add(&a, &l)?,
                        });
                    }
                    Ok(())
                })?;
                let total = acc.ok_or(AdError::OutputCount { expected: 1, found: 0 })?;
                let l = b.s_scale(scale / snapshots.len() as f64, &total)?;
                Ok(vec![Handle::Scalar(l)])
            }
            Readout::Aggregate { weights, scale } => {
                let s = self.model.rollout_h(b, s0, &p, self.n_steps, |_, _, _| Ok(()))?;
                let mut acc: Option<B::S> = None;
                for (f, w) in [&s.u, &s.v, &s.eta, &s.t].into_iter().zip(weights) {
                    if *w == 0.0 {
                        continue;
                    }
                    let n = b.value(f).len() as f64;
                    let sq = b.mul(f, f)?;
                    let total = b.sum(&sq)?;
                    let term = b.s_scale(w / n, &total)?;
                    acc = Some(match acc.take() {
                        None => term,
                        Some(a) => b.s_add(&a, &term)?,
                    });
                }
                let total = match acc {
                    Some(a) => a,
                    None => b.constant_scalar(0.0)?,
                };
                Ok(vec![Handle::Scalar(b.s_scale(*scale, &total)?)])
            }
        }
    }
}

/// Geostrophically balanced random eddies: a corner streamfunction built
/// from random Fourier modes with zonal wavenumbers `modes_x` and meridional
/// half-wavenumbers `modes_y`, vanishing on both walls, scaled to a peak
/// speed of `speed` m/s. Returns `(u, v, eta)`.
pub fn mesoscale_eddies(
    grid: &GridSpec,
    g: f64,
    seed: u64,
    speed: f64,
    modes_x: std::ops::RangeInclusive<usize>,
    modes_y: std::ops::RangeInclusive<usize>,
) -> Result<(Field, Field, Field), DynError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Field::zeros(grid, Staggering::Corner);
    for m in modes_x.clone() {
        for n in modes_y.clone() {
            let amp: f64 = rng.gen_range(-1.0..1.0);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let kx = 2.0 * PI * m as f64 / grid.lx;
            let ky = PI * n as f64 / grid.ly;
            for j in 0..grid.ny {
                let y = grid.y_of(Staggering::Corner, j);
                let sy = if j == grid.ny - 1 { 0.0 } else { (ky * y).sin() };
                for i in 0..grid.nx {
                    let x = grid.x_of(Staggering::Corner, i);
                    let old = q.get(i, j);
                    q.set(i, j, old + amp * (kx * x + phase).cos() * sy);
                }
            }
        }
    }
    let m = grid.metrics();
    let mut u = crate::grid::ddy_m(&q, &m)?;
    for x in u.data_mut() {
        *x = -*x;
    }
    let v = crate::grid::ddx_m(&q, &m)?;
    let peak = u.max_abs().max(v.max_abs());
    if peak == 0.0 {
        return Ok((u, v, Field::zeros(grid, Staggering::Center)));
    }
    let scale = speed / peak;
    let u = u.map(|x| x * scale);
    let v = v.map(|x| x * scale);
    // eta = f q / g averaged from the four corners to the center
    let eta = if g > 0.0 {
        Field::from_fn(grid, Staggering::Center, |i, j| {
            let im = (i + grid.nx - 1) % grid.nx;
            let corner = |ii: usize, jj: Option<usize>| jj.map_or(0.0, |jj| q.get(ii, jj));
            let jm = j.checked_sub(1);
            let avg = 0.25 * (corner(i, Some(j)) + corner(im, Some(j)) + corner(i, jm) + corner(im, jm));
            let f = grid.f0 + grid.beta * grid.y_of(Staggering::Center, j);
            f * avg * scale / g
        })
    } else {
        Field::zeros(grid, Staggering::Center)
    };
    Ok((u, v, eta))
}
