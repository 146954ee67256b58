use super::*;
use crate::dyncore::{cfl_limit_dt, StepConfig};
use crate::grid::make_channel_grid;

fn small_model(steps: usize) -> Model {
    let g = make_channel_grid(16, 12, 4e6, 3e6, 500.0, -1e-4, 2e-11).unwrap();
    let p = PhysParams::reference(&g);
    let dt = 0.5 * cfl_limit_dt(&g, p.g);
    Model::new(g, p, StepConfig::new(dt, steps)).unwrap()
}

fn small_start(m: &Model) -> ModelState {
    let eddies = EddySpec {
        speed: 0.5,
        modes_x: (1, 4),
        modes_y: (1, 6),
    };
    observation_start(m, 100, Some(&eddies), 3).unwrap()
}

fn small_problem() -> CalibProblem {
    let m = small_model(40);
    let s0 = small_start(&m);
    CalibProblem::new(m, s0, 40, 10).unwrap()
}

#[test]
fn zero_amplitude_is_identity() {
    let g = make_channel_grid(16, 12, 4e6, 3e6, 500.0, 0.0, 0.0).unwrap();
    let f = Field::from_fn(&g, Staggering::Center, |i, j| (i as f64 * 0.3).cos() + j as f64 / 7.0);
    let out = gaussian_perturbation(&f, &g, 0.0, 1e5, domain_center(&g)).unwrap();
    assert!(out.bit_eq(&f));
    assert!(gaussian_perturbation(&f, &g, 1.0, 0.0, (0.0, 0.0)).is_err());
}

#[test]
fn peak_is_exact_at_center_cell() {
    let g = make_channel_grid(16, 12, 4e6, 3e6, 500.0, 0.0, 0.0).unwrap();
    let f = Field::constant(&g, Staggering::Center, 0.25);
    let out = gaussian_perturbation(&f, &g, 1.5, 2.5e5, domain_center(&g)).unwrap();
    assert_eq!(out.get(g.nx / 2, g.ny / 2), 0.25 + 1.5);
    let peak = out.data().iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(peak, 1.75);
}

#[test]
fn zonal_distance_wraps() {
    let g = make_channel_grid(16, 12, 4e6, 3e6, 500.0, 0.0, 0.0).unwrap();
    let f = Field::zeros(&g, Staggering::Center);
    let c = (g.x_of(Staggering::Center, 0), g.y_of(Staggering::Center, 6));
    let out = gaussian_perturbation(&f, &g, 1.0, 3e5, c).unwrap();
    assert_eq!(out.get(1, 6), out.get(15, 6));
    assert_eq!(out.get(3, 4), out.get(13, 4));
}

#[test]
fn bump_integral_matches_continuum() {
    let g = make_channel_grid(96, 96, 9.6e6, 9.6e6, 500.0, 0.0, 0.0).unwrap();
    let f = Field::zeros(&g, Staggering::Center);
    for k in [3.0, 4.0, 6.0] {
        let sigma = k * g.dx;
        let out = gaussian_perturbation(&f, &g, 2.0, sigma, domain_center(&g)).unwrap();
        let want = 2.0 * gaussian_cell_integral(sigma, g.dx, g.dy);
        assert!((out.sum() / want - 1.0).abs() < 0.01, "sigma = {k} dx");
    }
}

#[test]
fn unperturbed_reconstruction_stays_put() {
    let m = small_model(4);
    let s0 = small_start(&m);
    let problem = ReconProblem {
        model: m,
        background: s0.clone(),
        steps: 4,
    };
    let reg = GradientRegistry::standard(1e-12);
    let res = reconstruct_initial_state(&problem, &s0.t, None, 5, 0.0, &reg).unwrap();
    let first = res.history.first().unwrap();
    assert_eq!(first.loss, 0.0);
    assert_eq!(first.grad_norm, 0.0);
    assert!(res.t0.bit_eq(&s0.t));
    assert_eq!(res.termination, Termination::Converged);
}

#[test]
fn one_small_step_decreases_loss() {
    let m = small_model(1);
    let s0 = small_start(&m);
    let problem = ReconProblem {
        model: m,
        background: s0.clone(),
        steps: 1,
    };
    let reg = GradientRegistry::standard(1e-12);
    let f = problem.rollout().unwrap();
    let mut t = s0.t.clone();
    t.set(5, 6, t.get(5, 6) + 0.5);
    let (l0, g) = problem.loss_and_grad(&f, &t, &reg).unwrap();
    assert!(l0 > 0.0);
    let alpha = 1e-3 * l0 / g.norm2_sq();
    t.axpy(-alpha, &g).unwrap();
    let l1 = problem.loss(&f, &t).unwrap();
    assert!(l1 < l0, "{l1} >= {l0}");
}

#[test]
fn gaussian_reconstruction_converges() {
    let m = small_model(4);
    let s0 = small_start(&m);
    let problem = ReconProblem {
        model: m.clone(),
        background: s0.clone(),
        steps: 4,
    };
    let pert = gaussian_perturbation(&s0.t, &m.grid, 1.0, 2.5e5, domain_center(&m.grid)).unwrap();
    let reg = GradientRegistry::standard(1e-12);
    let res = reconstruct_initial_state(&problem, &pert, None, 100, 1e-9, &reg).unwrap();
    let (a, b) = (res.history.first().unwrap(), res.history.last().unwrap());
    assert!(b.loss <= 1e-3 * a.loss);
    let d = |r: &IterRecord| res.history.metric(r, "distance").unwrap();
    assert!(d(b) <= 1e-3 * d(a));
    for w in res.history.records.windows(2) {
        assert!(w[1].loss <= w[0].loss + 1e-12);
    }
}

#[test]
fn oversized_step_is_reported_as_divergence() {
    let m = small_model(4);
    let s0 = small_start(&m);
    let problem = ReconProblem {
        model: m.clone(),
        background: s0.clone(),
        steps: 4,
    };
    let pert = gaussian_perturbation(&s0.t, &m.grid, 1.0, 2.5e5, domain_center(&m.grid)).unwrap();
    let reg = GradientRegistry::standard(1e-12);
    let err = reconstruct_initial_state(&problem, &pert, Some(10.0), 100, 0.0, &reg).unwrap_err();
    assert!(matches!(err, CalibError::Diverged { .. }), "{err}");
    assert!(err.to_string().contains("smaller alpha"));
}

#[test]
fn truth_is_a_stationary_point() {
    let problem = small_problem();
    let reg = GradientRegistry::standard(1e-12);
    let (a, r) = (problem.truth.params.a_h, problem.truth.params.r_bot);
    let at = |a: f64, r: f64| {
        let obj = problem.objective(a, r, &reg).unwrap();
        let (l, g) = obj.gradient(&obj.point()).unwrap();
        (l, norm(&g))
    };
    let (l_truth, g_truth) = at(a, r);
    let (l_off, g_off) = at(1.5 * a, 0.5 * r);
    assert_eq!(l_truth, 0.0);
    assert!(l_off > 0.0);
    assert!(g_truth <= 1e-6 * g_off, "{g_truth} vs {g_off}");
}

#[test]
fn calibration_descends_and_stays_positive() {
    let problem = small_problem();
    let reg = GradientRegistry::standard(1e-12);
    let cfg = CalibConfig {
        alpha: 4.0,
        max_iters: 15,
        grad_tol: 0.0,
    };
    let run = || calibrate_params(&problem, (1.5 * A_H, 0.5 * R_BOT), &cfg, &reg).unwrap();
    let res = run();
    assert!(res.a_h > 0.0 && res.r_bot > 0.0);
    for w in res.history.records.windows(2) {
        assert!(w[1].loss <= w[0].loss + 1e-12);
    }
    for rec in &res.history.records {
        assert!(res.history.metric(rec, LEAF_A_H).unwrap() > 0.0);
        assert!(res.history.metric(rec, LEAF_R_BOT).unwrap() > 0.0);
    }
    assert!(res.history.last().unwrap().loss < res.history.first().unwrap().loss);
    let again = run();
    assert_eq!(res.history, again.history);
    assert_eq!(res.a_h.to_bits(), again.a_h.to_bits());
}

const A_H: f64 = crate::dyncore::A_H_REF;
const R_BOT: f64 = crate::dyncore::R_BOT_REF;

#[test]
fn calibration_rejects_bad_settings() {
    let problem = small_problem();
    let reg = GradientRegistry::standard(1e-12);
    let cfg = CalibConfig {
        alpha: 1.0,
        max_iters: 1,
        grad_tol: 0.0,
    };
    assert!(calibrate_params(&problem, (-1.0, R_BOT), &cfg, &reg).is_err());
    let bad = CalibConfig { alpha: 0.0, ..cfg };
    assert!(calibrate_params(&problem, (A_H, R_BOT), &bad, &reg).is_err());
    assert!(CalibProblem::new(problem.truth.clone(), problem.initial.clone(), 10, 20).is_err());
}

#[test]
fn sensitivity_partials_match_differences() {
    let problem = small_problem();
    let reg = GradientRegistry::standard(1e-12);
    let a = decade_bracket(A_H, 1.0, 3);
    let r = decade_bracket(R_BOT, 1.0, 3);
    let grid = sensitivity_grid(&problem, &a, &r, &reg).unwrap();
    assert_eq!(grid.cells.len(), 9);
    let mid = grid.cell(1, 1);
    assert_eq!((mid.a_h, mid.r_bot), (A_H, R_BOT));
    assert_eq!(mid.loss, Some(0.0));
    let c = grid.cell(2, 0);
    let h = 1e-4;
    let fd_a = (problem.loss(c.a_h * (1.0 + h), c.r_bot, &reg).unwrap()
        - problem.loss(c.a_h * (1.0 - h), c.r_bot, &reg).unwrap())
        / (2.0 * h * c.a_h);
    let fd_r = (problem.loss(c.a_h, c.r_bot * (1.0 + h), &reg).unwrap()
        - problem.loss(c.a_h, c.r_bot * (1.0 - h), &reg).unwrap())
        / (2.0 * h * c.r_bot);
    assert!((c.dl_da_h - fd_a).abs() <= 1e-5 * fd_a.abs(), "{} vs {fd_a}", c.dl_da_h);
    assert!((c.dl_dr_bot - fd_r).abs() <= 1e-5 * fd_r.abs(), "{} vs {fd_r}", c.dl_dr_bot);
    assert!(sensitivity_grid(&problem, &a[..2], &r, &reg).is_err());
}

#[test]
fn brackets_and_log_spacing() {
    let b = decade_bracket(A_H, 1.0, 7);
    assert_eq!(b[3], A_H);
    assert!((b[0] / (A_H / 10.0) - 1.0).abs() < 1e-14);
    assert!((b[6] / (A_H * 10.0) - 1.0).abs() < 1e-14);
    let l = log_space(1.0, 100.0, 3);
    assert!((l[1] - 10.0).abs() < 1e-12);
    assert_eq!(l[0], 1.0);
}
