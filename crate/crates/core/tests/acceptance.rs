//! Acceptance criteria 1-10. Prints one `criterion N: PASS|FAIL` line each and
//! exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use cbf_shield::dynamics::{DistanceConstraint, Gravity, InputSet, State, SystemModel, Vec3};
use cbf_shield::flow_cbf::{eval_h, sensitivity_ode, u_star_ball, ConstantInput, FlowBarrierConfig, NominalEvader};
use cbf_shield::poly_cbf::{closed_form_r2, compute_a_max, eval_h_prime, random_unit, shell_samples, PolyBarrier};
use cbf_shield::safety_filter::{h_o_eval, solve_qp, QpProblem, QpRow, QpStatus};
use cbf_shield::scenarios::{run_scenario, safety_report, BarrierKind, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RHO_A: f64 = 1.0;
const U_MAX: f64 = 1.0;
const T_SCALE: f64 = 1.0;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn free_model() -> SystemModel {
    SystemModel::double_integrator()
}

fn gravity_model() -> SystemModel {
    SystemModel::with_gravity(Gravity::PointMass {
        mu: 0.5,
        center: Vec3::zeros(),
    })
}

fn obstacle() -> DistanceConstraint {
    DistanceConstraint::new(Vec3::zeros(), RHO_A)
}

/// Independent `h_a = ρ_a − ‖r‖`.
fn h_a(x: &State) -> f64 {
    RHO_A - (x.r.x * x.r.x + x.r.y * x.r.y + x.r.z * x.r.z).sqrt()
}

fn shell_state(rng: &mut ChaCha8Rng, v_max: f64) -> State {
    let r = random_unit(rng) * rng.random_range(RHO_A..=5.0 * RHO_A);
    let v = random_unit(rng) * rng.random_range(0.0..=v_max);
    State::new(r, v)
}

/// Shell state moving toward the obstacle with `ḣ ≥ hdot_min`.
fn approaching_state(rng: &mut ChaCha8Rng, hdot_min: f64, v_max: f64) -> State {
    loop {
        let x = shell_state(rng, v_max);
        let hdot = -x.r.dot(&x.v) / x.r.norm();
        if hdot >= hdot_min {
            return x;
        }
    }
}

fn a_max_for(model: &SystemModel, inputs: &InputSet, rng: &mut ChaCha8Rng) -> f64 {
    let samples = shell_samples(Vec3::zeros(), RHO_A, 5.0 * RHO_A, 5.0 * U_MAX * T_SCALE, 2000, rng);
    compute_a_max(model, &obstacle(), inputs, &samples, 0.01).unwrap()
}

fn flow_cfg(a_lb: f64) -> FlowBarrierConfig {
    FlowBarrierConfig {
        a_lb,
        ..FlowBarrierConfig::default()
    }
}

/// Two setups: force-free, and point-mass gravity weaker than the input.
fn setups(rng: &mut ChaCha8Rng) -> Vec<(SystemModel, f64, f64)> {
    let ball = InputSet::ball(U_MAX);
    let free = free_model();
    let grav = gravity_model();
    let a_free = a_max_for(&free, &ball, rng);
    let a_grav = a_max_for(&grav, &ball, rng);
    vec![(free, a_free, 1.0), (grav, a_grav, 0.5)]
}

fn criterion_01_dominance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let setups = setups(&mut rng);
    let ball = InputSet::ball(U_MAX);
    let c = obstacle();
    let n = 10_000;
    let mut violations = 0;
    let mut errors = 0;
    for k in 0..n {
        let (model, a_max, a_lb) = &setups[k % 2];
        let x = shell_state(&mut rng, 5.0 * U_MAX * T_SCALE);
        let h = h_a(&x);
        let hp = eval_h_prime(&PolyBarrier::new(2, *a_max).unwrap(), model, &c, &x).unwrap().value;
        if hp < h {
            violations += 1;
        }
        match eval_h(model, &c, &x, &ball, &flow_cfg(*a_lb)) {
            Ok(ev) if ev.value >= h => {}
            Ok(_) => violations += 1,
            Err(_) => errors += 1,
        }
    }
    let elapsed = start.elapsed();
    let pass = violations == 0 && errors == 0 && elapsed < Duration::from_secs(120);
    report(
        1,
        pass,
        format!("{n} states, {violations} violations, {errors} evaluation errors, {elapsed:.1?}"),
    );
    assert!(pass);
}

/// Maximize `h + ḣt − a t²/2` over `[0, T]` by repeated grid zooming.
fn grid_max(h: f64, hdot: f64, a: f64, t_end: f64) -> f64 {
    let psi = |t: f64| h + hdot * t - 0.5 * a * t * t;
    let (mut lo, mut hi) = (0.0, t_end);
    let m = 1001;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..12 {
        let step = (hi - lo) / (m - 1) as f64;
        let mut arg = lo;
        for i in 0..m {
            let t = lo + step * i as f64;
            let v = psi(t);
            if v > best {
                best = v;
                arg = t;
            }
        }
        lo = (arg - 2.0 * step).max(0.0);
        hi = (arg + 2.0 * step).min(t_end);
        if step < 1e-13 {
            break;
        }
    }
    best
}

fn criterion_02_closed_form_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let h = rng.random_range(-10.0..=0.0);
        let hdot: f64 = rng.random_range(-2.0..=2.0);
        let a = rng.random_range(0.1..=2.0);
        let t_end = 10.0 * T_SCALE + 2.0 * hdot.abs() / a;
        let err = (closed_form_r2(h, hdot, a) - grid_max(h, hdot, a, t_end)).abs();
        worst = worst.max(err);
    }
    let pass = worst <= 1e-9;
    report(2, pass, format!("max abs error {worst:.3e} over 10000 triples"));
    assert!(pass);
}

fn criterion_03_a_max_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut margined = Vec::new();
    for u_max in [0.05, 0.1, 1.0, 3.0] {
        let samples = shell_samples(Vec3::zeros(), RHO_A, 5.0 * RHO_A, 5.0 * u_max * T_SCALE, 2000, &mut rng);
        let raw = compute_a_max(&free_model(), &obstacle(), &InputSet::ball(u_max), &samples, 0.0).unwrap();
        let with_margin = compute_a_max(&free_model(), &obstacle(), &InputSet::ball(u_max), &samples, 0.01).unwrap();
        worst = worst.max((raw - u_max).abs() / u_max);
        margined.push(with_margin / u_max);
        assert!(with_margin <= raw);
    }
    let pass = worst <= 0.01;
    report(
        3,
        pass,
        format!("max relative deviation from u_max {worst:.3e}; with the 1% safety margin a_max/u_max = {margined:.4?}"),
    );
    assert!(pass);
}

fn criterion_04_sensitivity_ode() {
    let model = free_model();
    let c = obstacle();
    let x = State::new(Vec3::new(3.0, -1.0, 0.5), Vec3::new(-0.4, 0.2, 0.1));
    let box_evader = NominalEvader {
        model: &model,
        constraint: &c,
        inputs: InputSet::unit_box(U_MAX),
    };
    let mut worst: f64 = 0.0;
    for t in [0.5, 1.0, 3.0] {
        let expected = |i: usize, j: usize| {
            if i == j {
                1.0
            } else if j == i + 3 {
                t
            } else {
                0.0
            }
        };
        for theta in [
            sensitivity_ode(&model, &ConstantInput(Vec3::new(0.3, -0.2, 0.1)), &x, t, 1e-3).unwrap().0,
            sensitivity_ode(&model, &box_evader, &x, t, 1e-3).unwrap().0,
        ] {
            for i in 0..6 {
                for j in 0..6 {
                    worst = worst.max((theta[(i, j)] - expected(i, j)).abs());
                }
            }
        }
    }
    let pass = worst <= 1e-8;
    report(4, pass, format!("max entrywise error {worst:.3e} at t = 0.5, 1, 3"));
    assert!(pass);
}

/// `[∂B/∂x·f, ∂B/∂v]` by central differences.
fn fd_row<F: Fn(&State) -> f64>(b: F, model: &SystemModel, x: &State, eps: f64) -> [f64; 4] {
    let f = model.drift(x);
    let shift = |dir: [f64; 6], s: f64| {
        State::new(
            x.r + Vec3::new(dir[0], dir[1], dir[2]) * s,
            x.v + Vec3::new(dir[3], dir[4], dir[5]) * s,
        )
    };
    let fdir = [f[0], f[1], f[2], f[3], f[4], f[5]];
    let mut out = [0.0; 4];
    out[0] = (b(&shift(fdir, eps)) - b(&shift(fdir, -eps))) / (2.0 * eps);
    for k in 0..3 {
        let mut d = [0.0; 6];
        d[3 + k] = 1.0;
        out[1 + k] = (b(&shift(d, eps)) - b(&shift(d, -eps))) / (2.0 * eps);
    }
    out
}

fn rel_err(analytic: [f64; 4], fd: [f64; 4]) -> f64 {
    let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn criterion_05_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let setups = setups(&mut rng);
    let ball = InputSet::ball(U_MAX);
    let c = obstacle();
    let (mut flow_worst, mut poly_worst, mut ho_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    while checked < 100 {
        let (model, a_max, a_lb) = &setups[checked % 2];
        let cfg = flow_cfg(*a_lb);
        let x = approaching_state(&mut rng, 0.2, 2.0);
        let ev = eval_h(model, &c, &x, &ball, &cfg).unwrap();
        // non-switch: a single interior maximizer away from the sampling edge
        if ev.rows.len() != 1 || ev.maximizer_times[0] < 0.05 {
            continue;
        }
        let flow_value = |y: &State| eval_h(model, &c, y, &ball, &cfg).unwrap().value;
        let row = &ev.rows[0];
        flow_worst = flow_worst.max(rel_err([row.lf, row.lg[0], row.lg[1], row.lg[2]], fd_row(flow_value, model, &x, 1e-4)));

        let poly = PolyBarrier::new(2, *a_max).unwrap();
        let pe = eval_h_prime(&poly, model, &c, &x).unwrap();
        let pr = &pe.rows[0];
        let poly_value = |y: &State| eval_h_prime(&poly, model, &c, y).unwrap().value;
        poly_worst = poly_worst.max(rel_err([pr.lf, pr.lg[0], pr.lg[1], pr.lg[2]], fd_row(poly_value, model, &x, 1e-6)));

        let he = h_o_eval(model, &c, &x).unwrap();
        let hr = &he.rows[0];
        let ho_value = |y: &State| h_o_eval(model, &c, y).unwrap().value;
        ho_worst = ho_worst.max(rel_err([hr.lf, hr.lg[0], hr.lg[1], hr.lg[2]], fd_row(ho_value, model, &x, 1e-6)));
        checked += 1;
    }
    let pass = flow_worst <= 1e-3 && poly_worst <= 1e-5 && ho_worst <= 1e-5;
    report(
        5,
        pass,
        format!("100 states; relative error flow H {flow_worst:.3e}, H' {poly_worst:.3e}, H_o {ho_worst:.3e}"),
    );
    assert!(pass);
}

fn criterion_06_invariance_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let setups = setups(&mut rng);
    let ball = InputSet::ball(U_MAX);
    let c = obstacle();

    let mut flow_worst = f64::NEG_INFINITY;
    let mut found = 0;
    while found < 1000 {
        let (model, _, a_lb) = &setups[found % 2];
        let x = shell_state(&mut rng, 2.0);
        let ev = eval_h(model, &c, &x, &ball, &flow_cfg(*a_lb)).unwrap();
        if ev.value > 0.0 {
            continue;
        }
        let u = u_star_ball(model, &c, &x, &ball).unwrap();
        for row in &ev.rows {
            flow_worst = flow_worst.max(row.derivative(u.as_slice()));
        }
        found += 1;
    }

    let mut poly_worst = f64::NEG_INFINITY;
    let (mut beyond, mut beyond_worst) = (0, f64::NEG_INFINITY);
    let mut found = 0;
    while found < 1000 {
        let (model, a_max, _) = &setups[found % 2];
        let x = shell_state(&mut rng, 2.0);
        let ev = eval_h_prime(&PolyBarrier::new(2, *a_max).unwrap(), model, &c, &x).unwrap();
        if ev.value > 0.0 {
            continue;
        }
        let ld = c.lie_derivatives(model, &x).unwrap();
        let g = ld.lg_lf_h;
        let along = g * ((-a_max - ld.lf2_h) / g.norm_squared());
        if along.norm() > U_MAX {
            // μ(x) is empty: the drift alone brakes faster than a_max, so
            // check admissible inputs with ḧ ≤ −a_max instead
            beyond += 1;
            for _ in 0..20 {
                let u = random_unit(&mut rng) * U_MAX * rng.random_range(0.0f64..=1.0).cbrt();
                if ld.hddot(&u) <= -a_max {
                    for row in &ev.rows {
                        beyond_worst = beyond_worst.max(row.derivative(u.as_slice()));
                    }
                }
            }
            continue;
        }
        // u with ḧ = −a_max exactly, plus a random admissible component ⊥ L_gL_fh
        let w = random_unit(&mut rng);
        let perp = w - g * (w.dot(&g) / g.norm_squared());
        let room = (U_MAX * U_MAX - along.norm_squared()).max(0.0).sqrt();
        let u = along + perp.normalize() * room * rng.random_range(0.0..=1.0);
        for row in &ev.rows {
            poly_worst = poly_worst.max(row.derivative(u.as_slice()));
        }
        found += 1;
    }
    let pass = flow_worst <= 1e-6 && poly_worst <= 1e-9 && beyond_worst <= 1e-9;
    report(
        6,
        pass,
        format!(
            "1000 states each; max dH/dt(x, u*) {flow_worst:.3e}, max dH'/dt(x, u in mu(x)) {poly_worst:.3e}; \
             {beyond} states with empty mu(x), max dH'/dt for hddot <= -a_max {beyond_worst:.3e}"
        ),
    );
    assert!(pass);
}

fn criterion_07_sphere_scenario() {
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [BarrierKind::Flow, BarrierKind::Poly, BarrierKind::Ho] {
        let mut cfg = ScenarioConfig::sphere_default();
        cfg.barrier = kind;
        let start = Instant::now();
        let log = run_scenario(&cfg).unwrap();
        let elapsed = start.elapsed();
        let r = safety_report(&log).unwrap();
        let ok = match kind {
            BarrierKind::Ho => r.infeasible_steps >= 1,
            _ => {
                !r.halted
                    && r.steps == cfg.sim.steps()
                    && r.max_h.max(r.max_h_continuous) <= 1e-6
                    && r.inputs_within_bounds
                    && r.infeasible_steps == 0
            }
        } && elapsed < Duration::from_secs(60);
        pass &= ok;
        lines.push(format!(
            "{}: steps {}, max h {:.3e}, inputs in box {}, infeasible {}, final t {:.1}, {elapsed:.1?}",
            kind.as_str(),
            r.steps,
            r.max_h.max(r.max_h_continuous),
            r.inputs_within_bounds,
            r.infeasible_steps,
            r.final_time
        ));
    }
    report(7, pass, lines.join("; "));
    assert!(pass);
}

fn criterion_08_point_cloud_scenario() {
    let start = Instant::now();
    let cfg = ScenarioConfig::pointcloud_default(2000, 8);
    let log = run_scenario(&cfg).unwrap();
    let r = safety_report(&log).unwrap();
    let full_ok = !r.halted
        && r.steps == cfg.sim.steps()
        && r.max_h.max(r.max_h_continuous) <= 1e-6
        && r.inputs_within_bounds;

    let mut on = ScenarioConfig::pointcloud_default(200, 8);
    on.pruning.enabled = true;
    let mut off = on.clone();
    off.pruning.enabled = false;
    let (lon, loff) = (run_scenario(&on).unwrap(), run_scenario(&off).unwrap());
    let mut gap: f64 = 0.0;
    for (a, b) in lon.records.iter().zip(&loff.records) {
        gap = gap.max((a.x.to_vector() - b.x.to_vector()).amax());
        gap = gap.max((a.u - b.u).amax());
    }
    let same_len = lon.records.len() == loff.records.len();
    let elapsed = start.elapsed();
    let pass = full_ok && same_len && gap <= 1e-6 && elapsed < Duration::from_secs(300);
    report(
        8,
        pass,
        format!(
            "N=2000: max h {:.3e}, inputs in box {}, steps {}; pruning on/off max gap {gap:.3e} at N=200; {elapsed:.1?}",
            r.max_h.max(r.max_h_continuous),
            r.inputs_within_bounds,
            r.steps
        ),
    );
    assert!(pass);
}

fn criterion_09_qp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let side = 1000usize;
    let half = 1.0;
    let step = 2.0 * half / (side - 1) as f64;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt: f64 = 0.0;
    let mut failures = 0;
    let (mut optimal, mut infeasible) = (0, 0);
    for k in 0..100 {
        // 80 problems with a guaranteed interior ball, 20 unconstructed
        let n_rows = rng.random_range(1..=4);
        let center = [rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)];
        let mut rows = Vec::new();
        let mut interior = f64::INFINITY;
        for _ in 0..n_rows {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = rng.random_range(0.2..=2.0);
            let a = [mag * ang.cos(), mag * ang.sin()];
            let rhs = if k < 80 {
                let margin = rng.random_range(0.05..=0.5);
                interior = interior.min(margin / mag);
                a[0] * center[0] + a[1] * center[1] + margin
            } else {
                rng.random_range(-1.5..=0.5)
            };
            rows.push(QpRow {
                coeffs: vec![a[0], a[1], 0.0],
                rhs,
            });
        }
        let shape_ball = k % 3 == 0;
        let bounds = if shape_ball { InputSet::ball(half) } else { InputSet::unit_box(half) };
        let p = QpProblem {
            n_u: 2,
            slack_weight: 10.0,
            rows: rows.clone(),
            bounds: Some(bounds),
        };
        let res = solve_qp(&p).unwrap();

        let mut grid_best = f64::INFINITY;
        let mut nearest = f64::INFINITY;
        for i in 0..side {
            let u0 = -half + step * i as f64;
            for j in 0..side {
                let u1 = -half + step * j as f64;
                if shape_ball && u0 * u0 + u1 * u1 > half * half {
                    continue;
                }
                if rows.iter().all(|r| r.coeffs[0] * u0 + r.coeffs[1] * u1 <= r.rhs) {
                    let f = u0 * u0 + u1 * u1;
                    grid_best = grid_best.min(f);
                    if res.status == QpStatus::Optimal {
                        nearest = nearest.min(((u0 - res.u[0]).powi(2) + (u1 - res.u[1]).powi(2)).sqrt());
                    }
                }
            }
        }
        match res.status {
            QpStatus::Optimal => {
                optimal += 1;
                let f = res.objective(10.0);
                let feasible = rows.iter().all(|r| r.coeffs[0] * res.u[0] + r.coeffs[1] * res.u[1] <= r.rhs + 1e-12)
                    && bounds.contains(&Vec3::new(res.u[0], res.u[1], 0.0), 0.0);
                // a feasible grid point lies within `reach` of any feasible point
                let reach = if k < 80 {
                    step * std::f64::consts::SQRT_2 * (1.0 + 2.0 * std::f64::consts::SQRT_2 / interior.min(1.0))
                } else {
                    nearest
                };
                let unorm = f.sqrt();
                let tol = (2.0 * unorm * reach + reach * reach) * (1.0 + 1e-9);
                let gap = grid_best - f;
                worst_gap = worst_gap.max(gap / tol.max(f64::MIN_POSITIVE));
                worst_kkt = worst_kkt.max(res.kkt_residual);
                if !feasible || gap < -1e-12 || gap > tol || res.kkt_residual > 1e-8 || res.slack.abs() > 1e-12 {
                    failures += 1;
                }
            }
            QpStatus::Infeasible => {
                infeasible += 1;
                if grid_best.is_finite() || k < 80 {
                    failures += 1;
                }
            }
        }
    }
    let pass = failures == 0;
    report(
        9,
        pass,
        format!(
            "100 problems ({optimal} optimal, {infeasible} infeasible), {failures} mismatches, worst gap/resolution {worst_gap:.3}, worst KKT {worst_kkt:.3e}"
        ),
    );
    assert!(pass);
}

fn criterion_10_step_refinement() {
    let mut maxes = Vec::new();
    for dt in [0.2, 0.1, 0.05, 0.025] {
        let mut cfg = ScenarioConfig::sphere_default();
        cfg.sim.dt_ctrl = dt;
        let r = safety_report(&run_scenario(&cfg).unwrap()).unwrap();
        maxes.push((dt, r.max_h.max(r.max_h_continuous)));
    }
    let worst_increase = maxes
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = worst_increase <= 1e-6;
    let table: Vec<String> = maxes.iter().map(|(dt, h)| format!("dt {dt}: {h:.3e}")).collect();
    report(
        10,
        pass,
        format!("max h per step [{}], worst increase on halving {worst_increase:.3e}", table.join(", ")),
    );
    assert!(pass);
}

fn main() {
    let criteria: [(u32, fn()); 10] = [
        (1, criterion_01_dominance),
        (2, criterion_02_closed_form_equivalence),
        (3, criterion_03_a_max_regression),
        (4, criterion_04_sensitivity_ode),
        (5, criterion_05_gradients),
        (6, criterion_06_invariance_rates),
        (7, criterion_07_sphere_scenario),
        (8, criterion_08_point_cloud_scenario),
        (9, criterion_09_qp_oracle),
        (10, criterion_10_step_refinement),
    ];
    // assertion messages are replaced by the criterion lines
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, check) in criteria {
        if std::panic::catch_unwind(check).is_err() {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("all acceptance criteria passed");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
