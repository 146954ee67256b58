//! Experiment setups built from a [`RunConfig`]. The command-line tool and
//! the acceptance suite both go through these builders so they exercise the
//! same runs.

use crate::autodiff::GradientRegistry;
use crate::calibrate::{
    decade_bracket, domain_center, gaussian_perturbation, observation_start, with_friction, CalibConfig,
    CalibError, CalibProblem, EddySpec, ReconProblem,
};
use crate::dyncore::{
    barotropic_streamfunction, model_leaves, Model, ModelState, Readout, Rollout, LEAF_A_H, LEAF_ETA,
    LEAF_R_BOT, LEAF_T, LEAF_U, LEAF_V,
};
use crate::gradcheck::{GradError, LeafObjective};
use crate::grid::Field;
use crate::io::RunConfig;

/// Leaves perturbed by the single-step gradient check.
pub const STEP_CHECK_LEAVES: [&str; 6] = [LEAF_U, LEAF_V, LEAF_ETA, LEAF_T, LEAF_A_H, LEAF_R_BOT];

/// A resolved configuration with its model and gradient rules.
#[derive(Clone)]
pub struct Experiment {
    pub config: RunConfig,
    /// Model with the configured (reference) parameters.
    pub model: Model,
    pub registry: GradientRegistry,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self, CalibError> {
        let model = Model::new(config.grid.clone(), config.params.clone(), config.step_config())?;
        let registry = GradientRegistry::standard(config.eps_reg);
        Ok(Experiment {
            config,
            model,
            registry,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn eddies(&self) -> Option<EddySpec> {
        let i = &self.config.initial;
        (i.eddy_speed > 0.0).then(|| EddySpec {
            speed: i.eddy_speed,
            modes_x: i.eddy_modes_x,
            modes_y: i.eddy_modes_y,
        })
    }

    /// Spun-up state with the configured eddies; every experiment starts here.
    pub fn initial_state(&self) -> Result<ModelState, CalibError> {
        observation_start(
            &self.model,
            self.config.initial.spinup_steps,
            self.eddies().as_ref(),
            self.seed(),
        )
    }

    /// Model with `A_h` and `r_bot` at the calibration starting point.
    pub fn mis_specified(&self) -> Result<Model, CalibError> {
        let (a, r) = self.calibration_init();
        Ok(self.model.with_params(with_friction(&self.model.params, a, r))?)
    }

    /// Normalized loss of all state fields after one step, with every state
    /// field and both friction parameters as coordinates.
    pub fn step_objective(&self, s0: &ModelState) -> Result<LeafObjective<'_, Rollout>, GradError> {
        let f = Rollout::new(
            self.model.clone(),
            1,
            Readout::Aggregate {
                weights: [1.0; 4],
                scale: 1.0,
            },
        );
        let mut obj = LeafObjective::new(f, model_leaves(s0, &self.model.params), &self.registry);
        for name in STEP_CHECK_LEAVES {
            obj = obj.normalized(name)?;
        }
        obj.normalize_loss()
    }

    /// Streamfunction misfit after `n` steps of the mis-specified model
    /// against the reference run, as a function of `r_bot`.
    pub fn friction_objective(&self, s0: &ModelState, n: usize) -> Result<LeafObjective<'_, Rollout>, GradError> {
        let truth = self.model.step_n(s0, n)?;
        let psi = barotropic_streamfunction(&truth, &self.model.grid)?;
        let model = self.mis_specified().map_err(calib_to_grad)?;
        let base = model_leaves(s0, &model.params);
        let f = Rollout::new(
            model,
            n,
            Readout::BsfMisfit {
                snapshots: vec![(n, psi)],
                scale: 1.0,
            },
        );
        LeafObjective::new(f, base, &self.registry)
            .normalized(LEAF_R_BOT)?
            .normalize_loss()
    }

    pub fn reconstruction(&self, s0: &ModelState) -> Result<(ReconProblem, Field), CalibError> {
        let r = &self.config.reconstruct;
        let problem = ReconProblem {
            model: self.model.clone(),
            background: s0.clone(),
            steps: r.steps,
        };
        let perturbed = gaussian_perturbation(
            &s0.t,
            &self.model.grid,
            r.amplitude,
            r.sigma,
            domain_center(&self.model.grid),
        )?;
        Ok((problem, perturbed))
    }

    pub fn calibration_problem(&self, s0: &ModelState) -> Result<CalibProblem, CalibError> {
        let c = &self.config.calibrate;
        CalibProblem::new(self.model.clone(), s0.clone(), c.window, c.every)
    }

    pub fn calibration_init(&self) -> (f64, f64) {
        let c = &self.config.calibrate;
        (
            c.init_scale_ah * self.model.params.a_h,
            c.init_scale_rbot * self.model.params.r_bot,
        )
    }

    pub fn calibration_config(&self) -> CalibConfig {
        let c = &self.config.calibrate;
        CalibConfig {
            alpha: c.alpha,
            max_iters: c.max_iters,
            grad_tol: c.grad_tol,
        }
    }

    /// Sample axes bracketing the reference parameters, `(A_h, r_bot)`.
    pub fn sensitivity_axes(&self) -> (Vec<f64>, Vec<f64>) {
        let s = &self.config.sensitivity;
        (
            decade_bracket(self.model.params.a_h, s.decades, s.n_a),
            decade_bracket(self.model.params.r_bot, s.decades, s.n_r),
        )
    }
}

fn calib_to_grad(e: CalibError) -> GradError {
    match e {
        CalibError::Grad(g) => g,
        CalibError::Dyn(d) => GradError::Dyn(d),
        other => GradError::Dyn(crate::dyncore::DynError::InvalidParams(other.to_string())),
    }
}
