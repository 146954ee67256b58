//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs on the shipped acc-mini configuration.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use diffocean::autodiff::{jvp, vjp, DiffSelector, Leaves, Value};
use diffocean::calibrate::{calibrate_params, reconstruct_initial_state, sensitivity_grid};
use diffocean::dyncore::{
    cfl_limit_dt, model_leaves, DragMode, Model, ModelState, PhysParams, Readout, Rollout, StepConfig, A_H_REF,
    R_BOT_REF,
};
use diffocean::experiments::Experiment;
use diffocean::gradcheck::{accuracy_over_steps, cost_scaling, grad_error, loglog_slope, Mode};
use diffocean::grid::{make_channel_grid, Field, GridSpec, Staggering, WallKind};
use diffocean::io::config::ACC_MINI;
use diffocean::io::{parse_config_str, RunConfig, Snapshot};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Ctx {
    exp: Experiment,
    s0: ModelState,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Field shaped like `like` with values drawn from `draw`.
fn fill(like: &Field, mut draw: impl FnMut() -> f64) -> Field {
    let data = (0..like.len()).map(|_| draw()).collect();
    Field::from_vec(like.nx(), like.ny(), like.staggering(), data).unwrap()
}

fn random_field(rng: &mut ChaCha8Rng, g: &GridSpec, stag: Staggering, mean: f64, amp: f64) -> Field {
    fill(&Field::zeros(g, stag), || mean + amp * normal(rng))
}

fn random_grid(rng: &mut ChaCha8Rng) -> GridSpec {
    let (nx, ny) = [(4, 4), (6, 5), (8, 6), (12, 10)][rng.gen_range(0..4)];
    let walls = [WallKind::FreeSlip, WallKind::NoSlip, WallKind::Periodic][rng.gen_range(0..3)];
    make_channel_grid(nx, ny, 4e6, 3e6, 500.0, -1e-4, 2e-11)
        .unwrap()
        .with_walls(walls)
}

fn random_state(rng: &mut ChaCha8Rng, g: &GridSpec) -> ModelState {
    ModelState {
        u: random_field(rng, g, Staggering::UFace, 0.0, 0.3),
        v: random_field(rng, g, Staggering::VFace, 0.0, 0.3),
        eta: random_field(rng, g, Staggering::Center, 0.0, 0.5),
        t: random_field(rng, g, Staggering::Center, 10.0, 3.0),
        time: 0.0,
    }
}

fn random_params(rng: &mut ChaCha8Rng, g: &GridSpec) -> PhysParams {
    let mut p = PhysParams::reference(g);
    p.a_h = A_H_REF * 10f64.powf(rng.gen_range(-1.0..1.0));
    p.r_bot = R_BOT_REF * 10f64.powf(rng.gen_range(-1.0..1.0));
    p.drag_mode = if rng.gen_bool(0.5) { DragMode::Linear } else { DragMode::Quadratic };
    p.tau0 = rng.gen_range(-0.2..0.2);
    p.kappa_t = rng.gen_range(0.0..1000.0);
    p
}

fn random_config(rng: &mut ChaCha8Rng, g: &GridSpec, p: &PhysParams) -> StepConfig {
    StepConfig::new(rng.gen_range(0.1..0.6) * cfl_limit_dt(g, p.g), 1)
}

fn params_bit_eq(a: &PhysParams, b: &PhysParams) -> bool {
    let s = |p: &PhysParams| {
        [p.a_h, p.r_bot, p.c_d, p.g, p.rho0, p.tau0, p.wind_band, p.kappa_t, p.lambda_relax].map(f64::to_bits)
    };
    s(a) == s(b) && a.drag_mode == b.drag_mode && a.t_star.bit_eq(&b.t_star)
}

fn c1_purity(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pair in 0..100 {
        let g = random_grid(&mut rng);
        let p = random_params(&mut rng, &g);
        let c = random_config(&mut rng, &g, &p);
        let s = random_state(&mut rng, &g);
        let (s_copy, p_copy) = (s.clone(), p.clone());
        let n = rng.gen_range(1..=4);
        let a = diffocean::dyncore::step(&s, &p, &g, &c).map_err(e2s)?;
        let b = diffocean::dyncore::step(&s, &p, &g, &c).map_err(e2s)?;
        let an = diffocean::dyncore::step_n(&s, n, &p, &g, &c).map_err(e2s)?;
        let bn = diffocean::dyncore::step_n(&s, n, &p, &g, &c).map_err(e2s)?;
        ensure(s.bit_eq(&s_copy), format!("pair {pair}: input state modified"))?;
        ensure(params_bit_eq(&p, &p_copy), format!("pair {pair}: parameters modified"))?;
        ensure(a.bit_eq(&b) && an.bit_eq(&bn), format!("pair {pair}: repeated calls differ"))?;
        ensure(!a.bit_eq(&s), format!("pair {pair}: step did nothing"))?;
    }
    Ok("100 pairs: inputs unchanged, repeated calls bitwise identical".into())
}

fn c2_gradcheck(ctx: &Ctx) -> Outcome {
    let c = &ctx.exp.config.gradcheck;
    let obj = ctx.exp.step_objective(&ctx.s0).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    for d in 0..20u64 {
        for mode in [Mode::Jvp, Mode::Vjp] {
            let r = grad_error(&obj, c.eps, ctx.exp.seed() + d, mode, 1).map_err(e2s)?;
            ensure(r.error <= 1e-6, format!("direction {d} {}: E = {:e}", mode.name(), r.error))?;
            worst = worst.max(r.error);
        }
    }
    Ok(format!("eps = {:e}, 20 directions x 2 modes, max E = {worst:.2e} (<= 1e-6)", c.eps))
}

fn all_tangent(rng: &mut ChaCha8Rng, x: &Leaves) -> Leaves {
    let mut k = Leaves::new();
    for (name, v) in x.iter() {
        let t = match v {
            Value::Scalar(s) => Value::Scalar(normal(rng) * s.abs().max(1e-3)),
            Value::Field(f) => Value::Field(fill(f, || normal(rng))),
        };
        k.insert(name, t);
    }
    k
}

fn dot_values(a: &[Value], b: &[Value]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y).unwrap()).sum()
}

fn dot_leaves(a: &Leaves, b: &Leaves) -> f64 {
    a.iter().map(|(n, v)| v.dot(b.get(n).unwrap()).unwrap()).sum()
}

fn c3_transpose(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reg = diffocean::autodiff::GradientRegistry::standard(1e-12);
    let mut worst: f64 = 0.0;
    for trial in 0..24 {
        let g = random_grid(&mut rng);
        let p = random_params(&mut rng, &g);
        let n = 1 + trial % 8;
        let c = StepConfig::new(random_config(&mut rng, &g, &p).dt, n);
        let m = Model::new(g.clone(), p.clone(), c).map_err(e2s)?;
        let f = Rollout::new(m, n, Readout::State);
        let x = model_leaves(&random_state(&mut rng, &g), &p);
        let k = all_tangent(&mut rng, &x);
        let (prim, jk) = jvp(&f, &x, &k, &reg).map_err(e2s)?;
        let v: Vec<Value> = prim
            .iter()
            .map(|o| Value::Field(fill(o.as_field().unwrap(), || normal(&mut rng))))
            .collect();
        let (_, jtv) = vjp(&f, &x, &DiffSelector::all(&x), &v, &reg).map_err(e2s)?;
        let (lhs, rhs) = (dot_values(&v, &jk), dot_leaves(&jtv, &k));
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
        ensure(rel <= 1e-10, format!("trial {trial} ({n} steps): relative gap {rel:e}"))?;
        worst = worst.max(rel);
    }

    // Dense Jacobians of one step on a 4x4 grid, by columns and by rows.
    let g = make_channel_grid(4, 4, 4e6, 3e6, 500.0, -1e-4, 2e-11).unwrap();
    let mut p = random_params(&mut rng, &g);
    p.drag_mode = DragMode::Linear;
    let m = Model::new(g.clone(), p.clone(), StepConfig::new(0.4 * cfl_limit_dt(&g, p.g), 1)).map_err(e2s)?;
    let f = Rollout::new(m, 1, Readout::State);
    let x = model_leaves(&random_state(&mut rng, &g), &p);
    let names: Vec<String> = x.names().cloned().collect();
    let x_flat = x.flatten(&names).map_err(e2s)?;
    let n_in = x_flat.len();
    let outs = diffocean::autodiff::eval(&f, &x).map_err(e2s)?;
    let out_len: Vec<usize> = outs.iter().map(|o| o.as_field().unwrap().len()).collect();
    let n_out: usize = out_len.iter().sum();
    let flat_out = |vals: &[Value]| -> Vec<f64> {
        let mut o = Vec::with_capacity(n_out);
        for v in vals {
            v.flatten_into(&mut o);
        }
        o
    };
    let mut j_fwd = vec![0.0; n_out * n_in];
    for col in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[col] = 1.0;
        let k = x.unflatten(&names, &e).map_err(e2s)?;
        let (_, t) = jvp(&f, &x, &k, &reg).map_err(e2s)?;
        for (row, val) in flat_out(&t).into_iter().enumerate() {
            j_fwd[row * n_in + col] = val;
        }
    }
    let mut j_rev = vec![0.0; n_out * n_in];
    for row in 0..n_out {
        let mut v = Vec::with_capacity(outs.len());
        let mut offset = 0;
        for (o, len) in outs.iter().zip(&out_len) {
            let fld = o.as_field().unwrap();
            let mut data = vec![0.0; *len];
            if (offset..offset + len).contains(&row) {
                data[row - offset] = 1.0;
            }
            offset += len;
            v.push(Value::Field(
                Field::from_vec(fld.nx(), fld.ny(), fld.staggering(), data).map_err(e2s)?,
            ));
        }
        let (_, gl) = vjp(&f, &x, &DiffSelector::all(&x), &v, &reg).map_err(e2s)?;
        j_rev[row * n_in..(row + 1) * n_in].copy_from_slice(&gl.flatten(&names).map_err(e2s)?);
    }
    let jmax = j_fwd.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let dense_gap = j_fwd
        .iter()
        .zip(&j_rev)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / jmax;
    ensure(dense_gap <= 1e-10, format!("dense Jacobians differ by {dense_gap:e} (relative)"))?;

    // Independent check of the same Jacobian by central differences.
    let mut fd_gap: f64 = 0.0;
    for col in 0..n_in {
        let h = 1e-4 * x_flat[col].abs().max(1e-3);
        let probe = |s: f64| -> Result<Vec<f64>, String> {
            let mut w = x_flat.clone();
            w[col] += s * h;
            let xl = x.unflatten(&names, &w).map_err(e2s)?;
            Ok(flat_out(&diffocean::autodiff::eval(&f, &xl).map_err(e2s)?))
        };
        let (hi, lo) = (probe(1.0)?, probe(-1.0)?);
        let col_max = (0..n_out).map(|r| j_fwd[r * n_in + col].abs()).fold(0.0, f64::max);
        for r in 0..n_out {
            let fd = (hi[r] - lo[r]) / (2.0 * h);
            if col_max > 0.0 {
                fd_gap = fd_gap.max((fd - j_fwd[r * n_in + col]).abs() / col_max);
            }
        }
    }
    ensure(fd_gap <= 1e-6, format!("finite-difference Jacobian differs by {fd_gap:e}"))?;
    Ok(format!(
        "24 rollouts of 1-8 steps, max gap {worst:.1e}; dense {n_out}x{n_in} Jacobian fwd vs rev {dense_gap:.1e}, vs differences {fd_gap:.1e}"
    ))
}

fn c4_accuracy(ctx: &Ctx) -> Outcome {
    let c = &ctx.exp.config.gradcheck;
    let reports = accuracy_over_steps(
        |n| ctx.exp.friction_objective(&ctx.s0, n),
        &c.n_list,
        c.accuracy_eps,
        ctx.exp.seed(),
    )
    .map_err(e2s)?;
    let acc = |n: usize| -> Result<Vec<f64>, String> {
        let xs: Vec<f64> = reports
            .iter()
            .filter(|r| r.n_steps == n)
            .map(|r| r.accuracy.ok_or_else(|| format!("accuracy undefined at n = {n}")))
            .collect::<Result<_, _>>()?;
        ensure(!xs.is_empty(), format!("no report for n = {n}"))?;
        Ok(xs)
    };
    let mean = |ns: &[usize]| -> Result<f64, String> {
        let xs: Vec<f64> = ns.iter().map(|&n| acc(n)).collect::<Result<Vec<_>, _>>()?.concat();
        Ok(xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let first = acc(1)?;
    ensure(
        first.iter().all(|&a| a >= 0.99),
        format!("accuracy at n = 1 is {first:?}"),
    )?;
    let (early, late) = (mean(&[1, 2])?, mean(&[16, 32])?);
    ensure(late <= early, format!("mean accuracy rose from {early} to {late}"))?;
    Ok(format!(
        "eps = {:e}: accuracy at n=1 {:.12}, 1 - mean over {{1,2}} = {:.2e}, over {{16,32}} = {:.2e}",
        c.accuracy_eps,
        first[0],
        1.0 - early,
        1.0 - late
    ))
}

fn c5_cost(ctx: &Ctx) -> Outcome {
    let b = &ctx.exp.config.benchmark;
    let rows = cost_scaling(|n| ctx.exp.friction_objective(&ctx.s0, n), &b.n_list, b.repetitions).map_err(e2s)?;
    let ns: Vec<f64> = rows.iter().map(|r| r.n_steps as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.vjp_ms).collect();
    let slope = loglog_slope(&ns, &ts);
    let times: Vec<String> = rows.iter().map(|r| format!("{}:{:.1}ms", r.n_steps, r.vjp_ms)).collect();
    ensure(
        (0.8..=1.2).contains(&slope),
        format!("log-log slope {slope:.3} outside [0.8, 1.2] ({})", times.join(" ")),
    )?;
    let mut ratios = Vec::new();
    for w in rows.windows(2) {
        if w[0].n_steps >= 16 && w[1].n_steps == 2 * w[0].n_steps {
            let r = w[1].vjp_ms / w[0].vjp_ms;
            ensure(
                (1.5..=3.0).contains(&r),
                format!("time ratio {r:.2} from n = {} ({})", w[0].n_steps, times.join(" ")),
            )?;
            ratios.push(format!("{r:.2}"));
        }
    }
    Ok(format!("slope {slope:.3}, doubling ratios [{}], {}", ratios.join(", "), times.join(" ")))
}

fn c6_reconstruction(ctx: &Ctx) -> Outcome {
    let r = &ctx.exp.config.reconstruct;
    ensure(r.steps == 4, "reconstruction must run 4 steps")?;
    let (problem, pert) = ctx.exp.reconstruction(&ctx.s0).map_err(e2s)?;
    let res = reconstruct_initial_state(&problem, &pert, r.alpha, r.iters.min(500), r.rel_tol, &ctx.exp.registry)
        .map_err(e2s)?;
    let (a, b) = (res.history.first().unwrap(), res.history.last().unwrap());
    let d = |x| res.history.metric(x, "distance").unwrap();
    let (loss_drop, dist_drop) = (a.loss / b.loss, d(a) / d(b));
    ensure(b.iter <= 500, "more than 500 iterations")?;
    ensure(loss_drop >= 1e3, format!("loss fell only {loss_drop:.3e}x"))?;
    ensure(dist_drop >= 1e3, format!("distance fell only {dist_drop:.3e}x"))?;
    Ok(format!(
        "{} iterations: loss {:.3e} -> {:.3e}, distance {:.3e} -> {:.3e}",
        b.iter,
        a.loss,
        b.loss,
        d(a),
        d(b)
    ))
}

fn c7_calibration(ctx: &Ctx) -> Outcome {
    let problem = ctx.exp.calibration_problem(&ctx.s0).map_err(e2s)?;
    let init = ctx.exp.calibration_init();
    ensure(init == (1.5 * A_H_REF, 0.5 * R_BOT_REF), "unexpected starting point")?;
    let mut cfg = ctx.exp.calibration_config();
    cfg.max_iters = cfg.max_iters.min(300);
    let res = calibrate_params(&problem, init, &cfg, &ctx.exp.registry).map_err(e2s)?;
    let ea = (res.a_h / A_H_REF - 1.0).abs();
    let er = (res.r_bot / R_BOT_REF - 1.0).abs();
    let iters = res.history.last().unwrap().iter;
    ensure(
        ea <= 0.05 && er <= 0.05,
        format!("after {iters} iterations A_h off by {:.2}%, r_bot by {:.2}%", 100.0 * ea, 100.0 * er),
    )?;
    Ok(format!(
        "{iters} iterations ({:?}): A_h = {:.4} ({:.1e} rel), r_bot = {:.6e} ({:.1e} rel)",
        res.termination, res.a_h, ea, res.r_bot, er
    ))
}

fn c8_sensitivity(ctx: &Ctx) -> Outcome {
    let problem = ctx.exp.calibration_problem(&ctx.s0).map_err(e2s)?;
    let (a, r) = ctx.exp.sensitivity_axes();
    ensure(a.len() == 7 && r.len() == 7, "grid must be 7x7")?;
    let grid = sensitivity_grid(&problem, &a, &r, &ctx.exp.registry).map_err(e2s)?;
    let (ta, tr) = (3, 3);
    let truth = grid.cell(ta, tr);
    ensure(truth.a_h == A_H_REF && truth.r_bot == R_BOT_REF, "middle cell is not the truth")?;
    let mut cosines = Vec::new();
    for (ia, ir) in [(0, 0), (6, 0), (0, 6), (6, 6)] {
        let c = grid.cell(ia, ir);
        ensure(c.loss.is_some(), format!("corner ({ia}, {ir}) blew up"))?;
        let gl = c.log_gradient();
        let d = [(truth.a_h / c.a_h).ln(), (truth.r_bot / c.r_bot).ln()];
        let cos = -(gl[0] * d[0] + gl[1] * d[1]) / ((gl[0].hypot(gl[1])) * d[0].hypot(d[1]));
        ensure(cos > 0.0, format!("corner ({ia}, {ir}) points away from the truth: cos = {cos:.3}"))?;
        cosines.push(format!("{cos:.2}"));
    }
    let mag = |c: &diffocean::calibrate::SensitivityCell| {
        if c.loss.is_some() {
            let g = c.log_gradient();
            g[0].hypot(g[1])
        } else {
            f64::INFINITY
        }
    };
    let m_truth = mag(truth);
    let rank = grid.cells.iter().filter(|c| mag(c) < m_truth).count();
    let allowed = (0.05 * grid.cells.len() as f64).ceil() as usize;
    ensure(rank < allowed, format!("truth gradient ranks {rank} of {}", grid.cells.len()))?;
    Ok(format!(
        "corner cosines [{}], truth |grad| = {m_truth:.2e} ranks {rank} of {}",
        cosines.join(", "),
        grid.cells.len()
    ))
}

fn c9_conservation(ctx: &Ctx) -> Outcome {
    let m = &ctx.exp.model;
    let s0 = &ctx.s0;
    let total0 = s0.eta.sum();
    let scale: f64 = s0.eta.data().iter().map(|x| x.abs()).sum();
    let mut drift: f64 = 0.0;
    m.trajectory(s0, 1000, |_, s| drift = drift.max((s.eta.sum() - total0).abs()))
        .map_err(e2s)?;
    let rel = drift / scale;
    ensure(rel <= 1e-10, format!("sum of eta drifted by {rel:e} relative"))?;

    let mut p = m.params.clone();
    p.tau0 = 0.0;
    ensure(p.r_bot > 0.0, "r_bot must be positive")?;
    let unforced = m.with_params(p.clone()).map_err(e2s)?;
    let mut e = s0.energy(&m.grid, p.g);
    let e0 = e;
    let mut grew = None;
    unforced
        .trajectory(s0, 100, |k, s| {
            let next = s.energy(&m.grid, p.g);
            if next > e && grew.is_none() {
                grew = Some((k, e, next));
            }
            e = next;
        })
        .map_err(e2s)?;
    if let Some((k, a, b)) = grew {
        return Err(format!("energy grew at step {k}: {a:e} -> {b:e}"));
    }
    Ok(format!(
        "eta drift {rel:.1e} relative over 1000 steps; unforced energy {e0:.4e} -> {e:.4e} over 100 steps, never rising"
    ))
}

fn c10_io(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().map_err(e2s)?;
    for i in 0..100 {
        let g = random_grid(&mut rng);
        let mut s = random_state(&mut rng, &g);
        // arbitrary bit patterns, including NaN payloads and subnormals
        if i % 2 == 1 {
            s.t = fill(&s.t, || f64::from_bits(rng.gen()));
        }
        s.time = f64::from_bits(rng.gen());
        let path = dir.path().join(format!("s{i}.dosn"));
        diffocean::io::write_state(&path, &s).map_err(e2s)?;
        let back = diffocean::io::read_state(&path, &g).map_err(e2s)?;
        ensure(back.bit_eq(&s), format!("snapshot {i} did not round-trip"))?;
        let snap = Snapshot::decode(&std::fs::read(&path).map_err(e2s)?).map_err(e2s)?;
        ensure(snap.bit_eq(&Snapshot::from_state(&s)), format!("snapshot {i} header mismatch"))?;
    }

    let shipped = RunConfig::acc_mini();
    ensure(shipped.params.a_h == A_H_REF && shipped.params.r_bot == R_BOT_REF, "shipped config values")?;
    let bad: &[(&str, &str, &str)] = &[
        ("grid", "nx", "2"),
        ("grid", "nx", "sixty"),
        ("grid", "ny", "0"),
        ("grid", "Lx", "-4e6"),
        ("grid", "Ly", "0"),
        ("grid", "H", "-500"),
        ("grid", "H", "nan"),
        ("grid", "boundary", "sticky"),
        ("physics", "A_h", "-1"),
        ("physics", "r_bot", "-1e-5"),
        ("physics", "drag_mode", "cubic"),
        ("physics", "C_d", "-1e-3"),
        ("physics", "g", "0"),
        ("physics", "rho0", "-1025"),
        ("physics", "tau0", "inf"),
        ("physics", "wind_band", "1.5"),
        ("physics", "kappa_T", "-500"),
        ("physics", "lambda_relax", "-1"),
        ("stepping", "dt", "1e5"),
        ("stepping", "dt", "-1"),
        ("stepping", "n_steps", "-3"),
        ("stepping", "eps_reg", "0"),
        ("initial", "eddy_speed", "-2"),
        ("initial", "eddy_modes_x", "40, 1"),
        ("initial", "eddy_modes_y", "16, 48"),
        ("gradcheck", "eps", "0"),
        ("gradcheck", "directions", "0"),
        ("gradcheck", "accuracy_eps", "-1e-3"),
        ("gradcheck", "n_list", "4, 2"),
        ("reconstruct", "steps", "0"),
        ("reconstruct", "sigma", "0"),
        ("reconstruct", "alpha", "-1"),
        ("reconstruct", "rel_tol", "-1"),
        ("calibrate", "init_scale_Ah", "0"),
        ("calibrate", "init_scale_rbot", "-0.5"),
        ("calibrate", "alpha", "0"),
        ("calibrate", "grad_tol", "-1"),
        ("calibrate", "every", "0"),
        ("calibrate", "window", "10"),
        ("sensitivity", "n_a", "2"),
        ("sensitivity", "n_r", "1"),
        ("sensitivity", "decades", "0"),
        ("benchmark", "n_list", "0, 8"),
        ("benchmark", "repetitions", "2"),
    ];
    for &(section, key, value) in bad {
        let (text, line) = replace_value(ACC_MINI, section, key, value)?;
        match parse_config_str(&text, &[]) {
            Ok(_) => return Err(format!("{section}.{key} = {value} was accepted")),
            Err(e) => ensure(
                e.line() == Some(line),
                format!("{section}.{key} = {value}: error '{e}' does not cite line {line}"),
            )?,
        }
    }
    let e = parse_config_str("", &[]).unwrap_err();
    ensure(e.msg.contains("[grid]"), "empty config error does not list sections")?;
    let e = parse_config_str(&format!("{ACC_MINI}\n[physics]\n"), &[]).unwrap_err();
    ensure(e.line().is_some(), "duplicate section not located")?;
    Ok(format!("100 snapshots bitwise; {} invalid settings rejected at their line", bad.len()))
}

/// Shipped config with `section.key` set to `value`, and that line's number.
fn replace_value(text: &str, section: &str, key: &str, value: &str) -> Result<(String, usize), String> {
    let mut current = String::new();
    let mut found = None;
    let lines: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let t = l.trim();
            if let Some(s) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = s.to_string();
            } else if current == section && t.split('=').next().map(str::trim) == Some(key) {
                found = Some(i + 1);
                return format!("{key} = {value}");
            }
            l.to_string()
        })
        .collect();
    let line = found.ok_or_else(|| format!("{section}.{key} not in shipped config"))?;
    Ok((lines.join("\n"), line))
}

fn informational(ctx: &Ctx) -> Outcome {
    // Which parameter dominates the log-coordinate gradient, cell by cell.
    let problem = ctx.exp.calibration_problem(&ctx.s0).map_err(e2s)?;
    let (a, r) = ctx.exp.sensitivity_axes();
    let grid = sensitivity_grid(&problem, &a, &r, &ctx.exp.registry).map_err(e2s)?;
    let finite: Vec<_> = grid.cells.iter().filter(|c| c.loss.is_some()).collect();
    let dominant = finite
        .iter()
        .filter(|c| {
            let g = c.log_gradient();
            g[0].abs() > g[1].abs()
        })
        .count();
    Ok(format!("A_h dominates the log gradient in {dominant} of {} cells", finite.len()))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let config = RunConfig::acc_mini();
    let exp = Experiment::new(config).expect("acc-mini experiment");
    let s0 = exp.initial_state().expect("acc-mini initial state");
    let ctx = Ctx { exp, s0 };
    type Criterion = (usize, &'static str, u64, fn(&Ctx) -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "purity and determinism", 60, c1_purity),
        (2, "single-step gradient check", 60, c2_gradcheck),
        (3, "transpose identity and dense Jacobian", 120, c3_transpose),
        (4, "accuracy over steps", 300, c4_accuracy),
        (5, "linear gradient cost", 600, c5_cost),
        (6, "initial-temperature reconstruction", 600, c6_reconstruction),
        (7, "parameter calibration", 1800, c7_calibration),
        (8, "sensitivity structure", 1200, c8_sensitivity),
        (9, "conservation and dissipation", 120, c9_conservation),
        (10, "snapshot and config contract", 60, c10_io),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&ctx)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let el = t.elapsed();
                if el > Duration::from_secs(limit) {
                    Err(format!("took {:.1} s, limit {limit} s ({detail})", el.as_secs_f64()))
                } else {
                    Ok(detail)
                }
            });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id:2}] {name}: {detail} ({secs:.1} s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{id:2}] {name}: {why} ({secs:.1} s)");
            }
        }
    }
    if filter.is_empty() || filter.contains(&0) {
        match informational(&ctx) {
            Ok(s) => println!("INFO      sensitivity anisotropy: {s}"),
            Err(e) => println!("INFO      sensitivity anisotropy: not computed ({e})"),
        }
    }
    println!(
        "acceptance: {} failed, total {:.1} s",
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
