//! Closed-loop simulation of the spacecraft around a sphere or a point cloud.
//!
//! Each control step evaluates the configured barrier for every retained
//! constraint, solves the CLF–CBF QP, and holds the input over `dt_ctrl`
//! while the dynamics are integrated with RK4 substeps.

use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{rk4_step, DistanceConstraint, Gravity, InputSet, State, SystemModel, Vec3};
use crate::error::{Error, Result};
use crate::flow_cbf::{eval_h, BarrierEvaluation, FlowBarrierConfig};
use crate::poly_cbf::{compute_a_max, eval_h_prime, random_unit, shell_samples, PolyBarrier, DEFAULT_A_MAX_MARGIN};
use crate::safety_filter::{filter_step_with_rows, h_o_eval, sample_guard_row, ClfSpec, QpRow, QpStatus};

/// Lobe radius of the default synthetic cloud.
pub const PEANUT_LOBE_RADIUS: f64 = 4.0;
/// Distance between the lobe centers of the default synthetic cloud.
pub const PEANUT_SEPARATION: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Obstacle {
    /// Keep `‖r − center‖ ≥ rho_t + rho_s`.
    Sphere { center: Vec3, rho_t: f64, rho_s: f64 },
    /// Keep `‖r − p_i‖ ≥ rho_s` for every point.
    PointCloud { points: Vec<Vec3>, rho_s: f64 },
}

impl Obstacle {
    /// One distance constraint per obstacle element, inflated by `buffer`.
    pub fn constraints(&self, buffer: f64) -> Vec<DistanceConstraint> {
        match self {
            Obstacle::Sphere { center, rho_t, rho_s } => {
                vec![DistanceConstraint::new(*center, rho_t + rho_s + buffer)]
            }
            Obstacle::PointCloud { points, rho_s } => points
                .iter()
                .map(|p| DistanceConstraint::new(*p, rho_s + buffer))
                .collect(),
        }
    }

    /// Distance from `r` to the obstacle body (sphere surface or nearest point).
    pub fn distance(&self, r: &Vec3) -> f64 {
        match self {
            Obstacle::Sphere { center, rho_t, .. } => (r - center).norm() - rho_t,
            Obstacle::PointCloud { points, .. } => points
                .iter()
                .map(|p| (r - p).norm())
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        match self {
            Obstacle::Sphere { center, .. } => *center,
            Obstacle::PointCloud { points, .. } => {
                points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len().max(1) as f64
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Obstacle::Sphere { rho_t, rho_s, .. } => {
                if !(rho_t + rho_s > 0.0) || *rho_t < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "sphere needs rho_t >= 0 and rho_t + rho_s > 0, got rho_t = {rho_t}, rho_s = {rho_s}"
                    )));
                }
            }
            Obstacle::PointCloud { points, rho_s } => {
                if points.is_empty() {
                    return Err(Error::InvalidConfig("point cloud is empty".into()));
                }
                if !(*rho_s > 0.0) {
                    return Err(Error::InvalidConfig(format!("rho_s must be positive, got {rho_s}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BarrierKind {
    /// Flow barrier `H` under the nominal evader.
    #[serde(rename = "h_flow")]
    Flow,
    /// Polynomial barrier `H′` with constant dissipation `a_max`.
    #[serde(rename = "hprime")]
    Poly,
    /// `(arctan ḣ + π/2)·h`, valid only without input bounds.
    #[serde(rename = "ho")]
    Ho,
}

impl BarrierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BarrierKind::Flow => "h_flow",
            BarrierKind::Poly => "hprime",
            BarrierKind::Ho => "ho",
        }
    }
}

impl std::str::FromStr for BarrierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h_flow" => Ok(BarrierKind::Flow),
            "hprime" => Ok(BarrierKind::Poly),
            "ho" => Ok(BarrierKind::Ho),
            other => Err(Error::InvalidConfig(format!(
                "unknown barrier '{other}' (expected h_flow, hprime or ho)"
            ))),
        }
    }
}

/// Piecewise-linear reference `r_p(s)` with `s` advancing linearly from 0 at
/// `t_start` to 1 at `t_end`, parameterized by arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSchedule {
    pub waypoints: Vec<Vec3>,
    pub t_start: f64,
    pub t_end: f64,
}

impl PathSchedule {
    pub fn s_at(&self, t: f64) -> f64 {
        if self.t_end <= self.t_start {
            return if t >= self.t_start { 1.0 } else { 0.0 };
        }
        ((t - self.t_start) / (self.t_end - self.t_start)).clamp(0.0, 1.0)
    }

    pub fn point(&self, s: f64) -> Vec3 {
        let w = &self.waypoints;
        if w.len() == 1 {
            return w[0];
        }
        let lengths: Vec<f64> = w.windows(2).map(|p| (p[1] - p[0]).norm()).collect();
        let total: f64 = lengths.iter().sum();
        if total == 0.0 {
            return w[0];
        }
        let mut remaining = s.clamp(0.0, 1.0) * total;
        for (i, &len) in lengths.iter().enumerate() {
            if remaining <= len && len > 0.0 {
                return w[i] + (w[i + 1] - w[i]) * (remaining / len);
            }
            remaining -= len;
        }
        *w.last().unwrap()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.point(self.s_at(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub duration: f64,
    pub dt_ctrl: f64,
    pub substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            dt_ctrl: 0.1,
            substeps: 10,
        }
    }
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.dt_ctrl - 1e-9).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruningConfig {
    pub enabled: bool,
    /// Look-ahead `Δt`.
    pub horizon: f64,
    pub margin: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            horizon: 5.0,
            margin: 0.0,
        }
    }
}

/// Response to an infeasible QP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InfeasibleAction {
    Halt,
    /// Apply the nominal evader for the most critical constraint.
    Nominal,
    /// Resolve with the input bound multiplied by `factor`.
    Expand { factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AMaxConfig {
    /// Fixed value; `None` samples the shell around the obstacle.
    pub value: Option<f64>,
    pub samples: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for AMaxConfig {
    fn default() -> Self {
        Self {
            value: None,
            samples: 2000,
            margin: DEFAULT_A_MAX_MARGIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub obstacle: Obstacle,
    pub gravity: Gravity,
    pub path: PathSchedule,
    pub barrier: BarrierKind,
    pub gains: ClfSpec,
    pub inputs: InputSet,
    pub alpha_scale: f64,
    pub x0: State,
    pub sim: SimConfig,
    pub pruning: PruningConfig,
    pub flow: FlowBarrierConfig,
    pub a_max: AMaxConfig,
    /// Extra clearance enforced by the controller on top of the obstacle
    /// radius. Safety is still measured against the unbuffered constraint.
    pub buffer: f64,
    /// Add a one-hold prediction row per evaluated constraint.
    pub sample_guard: bool,
    pub on_infeasible: InfeasibleAction,
}

impl ScenarioConfig {
    /// Sphere of radius 5 at the origin with a 1-unit standoff. The vehicle
    /// starts at rest 25 units away and follows a half great circle drawn on
    /// the sphere's surface, which lies inside the keep-out zone.
    pub fn sphere_default() -> Self {
        let rho_t = 5.0;
        let waypoints = (0..=12)
            .map(|k| {
                let th = std::f64::consts::PI * k as f64 / 12.0;
                Vec3::new(-th.cos(), 0.8 * th.sin(), 0.6 * th.sin()) * rho_t
            })
            .collect();
        let u_max = 0.1;
        Self {
            obstacle: Obstacle::Sphere {
                center: Vec3::zeros(),
                rho_t,
                rho_s: 1.0,
            },
            gravity: Gravity::None,
            path: PathSchedule {
                waypoints,
                t_start: 10.0,
                t_end: 80.0,
            },
            barrier: BarrierKind::Poly,
            gains: ClfSpec::default(),
            inputs: InputSet::unit_box(u_max),
            alpha_scale: 1.0,
            x0: State::at_rest(Vec3::new(-25.0, 3.0, 2.0)),
            sim: SimConfig {
                duration: 80.0,
                ..SimConfig::default()
            },
            pruning: PruningConfig {
                enabled: false,
                ..PruningConfig::default()
            },
            flow: FlowBarrierConfig {
                a_lb: u_max,
                ..FlowBarrierConfig::default()
            },
            a_max: AMaxConfig::default(),
            buffer: 0.0,
            sample_guard: true,
            on_infeasible: InfeasibleAction::Halt,
        }
    }

    /// Peanut-shaped cloud of `n` surface points with weak central gravity.
    pub fn pointcloud_default(n: usize, seed: u64) -> Self {
        let points = peanut_cloud(n, PEANUT_LOBE_RADIUS, PEANUT_SEPARATION, seed);
        let waypoints = (0..=16)
            .map(|k| {
                let th = std::f64::consts::PI * k as f64 / 16.0;
                Vec3::new(-6.5 * th.cos(), 4.0 * th.sin(), 1.0 * th.sin())
            })
            .collect();
        let u_max = 0.1;
        Self {
            obstacle: Obstacle::PointCloud { points, rho_s: 1.0 },
            gravity: Gravity::PointMass {
                mu: 0.1,
                center: Vec3::zeros(),
            },
            path: PathSchedule {
                waypoints,
                t_start: 10.0,
                t_end: 90.0,
            },
            barrier: BarrierKind::Poly,
            gains: ClfSpec::default(),
            inputs: InputSet::unit_box(u_max),
            alpha_scale: 1.0,
            x0: State::at_rest(Vec3::new(-22.0, -4.0, 2.0)),
            sim: SimConfig {
                duration: 100.0,
                ..SimConfig::default()
            },
            pruning: PruningConfig::default(),
            flow: FlowBarrierConfig {
                a_lb: u_max,
                ..FlowBarrierConfig::default()
            },
            a_max: AMaxConfig {
                seed,
                ..AMaxConfig::default()
            },
            buffer: 0.0,
            sample_guard: true,
            on_infeasible: InfeasibleAction::Halt,
        }
    }

    pub fn model(&self) -> SystemModel {
        SystemModel::with_gravity(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        self.obstacle.validate()?;
        self.gains.validate()?;
        self.flow.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.sim.duration > 0.0) {
            return bad(format!("sim.duration must be positive, got {}", self.sim.duration));
        }
        if !(self.sim.dt_ctrl > 0.0) || self.sim.substeps == 0 {
            return bad("sim.dt_ctrl must be positive and sim.substeps at least 1".into());
        }
        if !(self.alpha_scale > 0.0) {
            return bad(format!("alpha_scale must be positive, got {}", self.alpha_scale));
        }
        if !(self.buffer >= 0.0) {
            return bad(format!("buffer must be nonnegative, got {}", self.buffer));
        }
        if self.path.waypoints.is_empty() {
            return bad("path needs at least one waypoint".into());
        }
        if matches!(self.obstacle, Obstacle::PointCloud { .. }) && !(self.pruning.horizon > 0.0) {
            return bad(format!("pruning.horizon must be positive, got {}", self.pruning.horizon));
        }
        if let InfeasibleAction::Expand { factor } = self.on_infeasible {
            if !(factor >= 1.0) {
                return bad(format!("expansion factor must be >= 1, got {factor}"));
            }
        }
        if !self.x0.is_finite() {
            return bad("initial state is not finite".into());
        }
        Ok(())
    }

    /// Shortest distance from the gravity center to any obstacle element;
    /// positions closer than this are treated as inside the body.
    fn inner_radius(&self) -> f64 {
        let c = match self.gravity {
            Gravity::PointMass { center, .. } => center,
            Gravity::None => self.obstacle.centroid(),
        };
        match &self.obstacle {
            Obstacle::Sphere { center, rho_t, rho_s } => (rho_t + rho_s - (center - c).norm()).max(rho_s.max(1e-6)),
            Obstacle::PointCloud { points, rho_s } => points
                .iter()
                .map(|p| (p - c).norm())
                .fold(f64::INFINITY, f64::min)
                .max(*rho_s),
        }
    }

    /// Bound on `‖f_μ‖ + ‖u‖` over the region outside the body.
    pub fn accel_bound(&self) -> f64 {
        self.gravity.max_magnitude(self.inner_radius()) + self.inputs.max_euclidean()
    }

    /// `a_max` for the polynomial barrier. The dissipation rate is sampled
    /// over the inscribed ball of the input set, so `H′` only relies on
    /// inputs every direction can deliver.
    pub fn resolve_a_max(&self) -> Result<f64> {
        if let Some(a) = self.a_max.value {
            if !(a > 0.0) {
                return Err(Error::NoValidAMax { value: a });
            }
            return Ok(a);
        }
        let model = self.model();
        let ball = self.inputs.inscribed_ball();
        let mut rng = ChaCha8Rng::seed_from_u64(self.a_max.seed);
        // the constraint about the gravity center makes d̂·f_μ = −‖f_μ‖, the
        // worst alignment any obstacle element can see
        let center = match self.gravity {
            Gravity::PointMass { center, .. } => center,
            Gravity::None => self.obstacle.centroid(),
        };
        let r_in = self.inner_radius();
        let reference = DistanceConstraint::new(center, r_in);
        let v_max = 5.0 * self.inputs.u_max.max(1e-3) * self.sim.duration;
        let samples = shell_samples(center, r_in, 5.0 * r_in, v_max, self.a_max.samples.max(1), &mut rng);
        compute_a_max(&model, &reference, &ball, &samples, self.a_max.margin)
    }
}

/// One logged control step. `u` is held over `[t, t + dt_ctrl)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: State,
    pub u: Vec3,
    /// Barrier values for the evaluated constraints, shifted back by the
    /// buffer so they refer to the true keep-out radius.
    pub barrier_values: Vec<f64>,
    pub evaluated: Vec<usize>,
    pub h_max: f64,
    pub barrier_max: f64,
    pub status: QpStatus,
    pub active_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub final_state: State,
    /// Largest `h` over all integrator substeps, not only control instants.
    pub h_max_continuous: f64,
    pub min_distance: f64,
    pub halted: bool,
    pub a_max: Option<f64>,
    pub inputs: InputSet,
    pub warnings: Vec<String>,
}

/// Indices of points whose constraint could reach `−margin` within
/// `horizon`. Two sound bounds are combined:
///
/// * `h + max(ḣ, 0)Δt + ½ sup ḧ Δt²` with `ḧ ≤ V²/d_min + A`, where `V` and
///   `d_min` bound the speed and distance over the horizon;
/// * `h + ‖v‖Δt + ½AΔt²` from the reachable displacement.
///
/// A point is dropped only if both bounds stay below `−margin`.
pub fn prune_pointcloud(
    points: &[Vec3],
    rho: f64,
    x: &State,
    accel_bound: f64,
    horizon: f64,
    margin: f64,
) -> Vec<usize> {
    let speed = x.v.norm();
    let reach = speed * horizon + 0.5 * accel_bound * horizon * horizon;
    let v_bar = speed + accel_bound * horizon;
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let d_vec = x.r - *p;
            let d = d_vec.norm();
            let h = rho - d;
            let displacement = h + reach;
            if displacement < -margin {
                return false;
            }
            let d_min = d - reach;
            if d_min <= 1e-12 {
                return true;
            }
            let hdot = -d_vec.dot(&x.v) / d;
            let sup_hddot = v_bar * v_bar / d_min + accel_bound;
            h + hdot.max(0.0) * horizon + 0.5 * sup_hddot * horizon * horizon >= -margin
        })
        .map(|(i, _)| i)
        .collect()
}

/// Surface samples of two overlapping spheres of radius `lobe_radius` with
/// centers `(±separation/2, 0, 0)`. Points inside the other lobe are rejected.
pub fn peanut_cloud(n: usize, lobe_radius: f64, separation: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [Vec3::new(-0.5 * separation, 0.0, 0.0), Vec3::new(0.5 * separation, 0.0, 0.0)];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let lobe = usize::from(rng.random::<bool>());
        let p = centers[lobe] + random_unit(&mut rng) * lobe_radius;
        if (p - centers[1 - lobe]).norm() > lobe_radius {
            out.push(p);
        }
    }
    out
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments are skipped.
pub fn load_point_cloud(path: &FsPath) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_point_cloud(&text, &path.display().to_string())
}

pub fn parse_point_cloud(text: &str, origin: &str) -> Result<Vec<Vec3>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| err(format!("'{tok}': {e}"))))
            .collect::<Result<_>>()?;
        if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
            return Err(err(format!("expected three finite coordinates, got '{line}'")));
        }
        points.push(Vec3::new(coords[0], coords[1], coords[2]));
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: 0,
            message: "no points".into(),
        });
    }
    Ok(points)
}

struct Evaluator<'a> {
    cfg: &'a ScenarioConfig,
    model: SystemModel,
    constraints: Vec<DistanceConstraint>,
    truth: Vec<DistanceConstraint>,
    poly: Option<PolyBarrier>,
}

impl Evaluator<'_> {
    fn evaluate(&self, i: usize, x: &State) -> Result<BarrierEvaluation> {
        let c = &self.constraints[i];
        match self.cfg.barrier {
            BarrierKind::Poly => eval_h_prime(self.poly.as_ref().unwrap(), &self.model, c, x),
            BarrierKind::Flow => eval_h(&self.model, c, x, &self.cfg.inputs.inscribed_ball(), &self.cfg.flow),
            BarrierKind::Ho => h_o_eval(&self.model, c, x),
        }
    }

    fn h_max(&self, x: &State) -> (f64, usize) {
        self.truth
            .iter()
            .enumerate()
            .map(|(i, c)| (c.value(x), i))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a })
    }

    fn retained(&self, x: &State) -> Vec<usize> {
        let (_, closest) = self.h_max(x);
        match &self.cfg.obstacle {
            Obstacle::PointCloud { points, rho_s } if self.cfg.pruning.enabled => {
                let mut idx = prune_pointcloud(
                    points,
                    rho_s + self.cfg.buffer,
                    x,
                    self.cfg.accel_bound(),
                    self.cfg.pruning.horizon,
                    self.cfg.pruning.margin,
                );
                // keep the nearest point so the barrier trace is always defined
                if let Err(pos) = idx.binary_search(&closest) {
                    idx.insert(pos, closest);
                }
                idx
            }
            _ => (0..self.constraints.len()).collect(),
        }
    }
}

/// Run the closed loop for either obstacle type.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let model = cfg.model();
    let a_max = match cfg.barrier {
        BarrierKind::Poly => Some(cfg.resolve_a_max()?),
        _ => None,
    };
    let guard_a = if cfg.sample_guard {
        Some(match a_max {
            Some(a) => a,
            None => cfg.resolve_a_max()?,
        })
    } else {
        None
    };
    let ev = Evaluator {
        cfg,
        model,
        constraints: cfg.obstacle.constraints(cfg.buffer),
        truth: cfg.obstacle.constraints(0.0),
        poly: a_max.map(|a| PolyBarrier::new(2, a)).transpose()?,
    };

    let mut warnings = Vec::new();
    let mut x = cfg.x0;
    let mut records = Vec::with_capacity(cfg.sim.steps());
    let mut h_max_continuous = ev.h_max(&x).0;
    let mut min_distance = cfg.obstacle.distance(&x.r);
    let mut halted = false;
    let dt = cfg.sim.dt_ctrl;
    let sub_dt = dt / cfg.sim.substeps as f64;

    for k in 0..cfg.sim.steps() {
        let t = k as f64 * dt;
        let target = cfg.path.at(t);
        let evaluated = ev.retained(&x);
        let evals: Vec<BarrierEvaluation> = evaluated
            .iter()
            .map(|&i| ev.evaluate(i, &x))
            .collect::<Result<_>>()?;
        let barrier_values: Vec<f64> = evals.iter().map(|e| e.value - cfg.buffer).collect();
        let barrier_max = barrier_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if k == 0 && barrier_max > 0.0 {
            warnings.push(format!(
                "initial state lies outside the barrier's safe set (value {barrier_max:e})"
            ));
        }

        let guards: Vec<QpRow> = if let Some(a) = guard_a {
            evaluated
                .iter()
                .map(|&i| {
                    let ld = ev.constraints[i].lie_derivatives(&model, &x)?;
                    Ok(sample_guard_row(&ld, dt, a, cfg.inputs.support(&ld.lg_lf_h)))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let solve = |inputs: &InputSet| {
            filter_step_with_rows(&evals, cfg.alpha_scale, &cfg.gains, &model, &x, &target, inputs, &guards)
        };
        let res = solve(&cfg.inputs)?;
        let (u, status, active_rows) = match res.status {
            QpStatus::Optimal => (res.u3(), QpStatus::Optimal, res.active_rows),
            QpStatus::Infeasible => match cfg.on_infeasible {
                InfeasibleAction::Halt => {
                    halted = true;
                    (Vec3::zeros(), QpStatus::Infeasible, Vec::new())
                }
                InfeasibleAction::Nominal => {
                    let (_, worst) = evals
                        .iter()
                        .zip(&evaluated)
                        .map(|(e, &i)| (e.value, i))
                        .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
                    let ld = ev.constraints[worst].lie_derivatives(&model, &x)?;
                    (cfg.inputs.inscribed_ball().argmin_linear(&ld.lg_lf_h), QpStatus::Infeasible, Vec::new())
                }
                InfeasibleAction::Expand { factor } => {
                    let wide = InputSet {
                        u_max: cfg.inputs.u_max * factor,
                        ..cfg.inputs
                    };
                    let again = solve(&wide)?;
                    if again.status == QpStatus::Infeasible {
                        halted = true;
                    }
                    (again.u3(), QpStatus::Infeasible, again.active_rows)
                }
            },
        };

        records.push(StepRecord {
            t,
            x,
            u,
            barrier_values,
            evaluated,
            h_max: ev.h_max(&x).0,
            barrier_max,
            status,
            active_rows,
        });
        if halted {
            break;
        }
        for j in 0..cfg.sim.substeps {
            x = rk4_step(&model, &x, &u, sub_dt).map_err(|_| Error::Divergence {
                t: t + (j + 1) as f64 * sub_dt,
            })?;
            h_max_continuous = h_max_continuous.max(ev.h_max(&x).0);
            min_distance = min_distance.min(cfg.obstacle.distance(&x.r));
        }
    }

    Ok(TrajectoryLog {
        records,
        final_state: x,
        h_max_continuous,
        min_distance,
        halted,
        a_max,
        inputs: cfg.inputs,
        warnings,
    })
}

/// Point-cloud entry point; identical loop with per-step pruning.
pub fn run_pointcloud_scenario(cfg: &ScenarioConfig) -> Result<TrajectoryLog> {
    if !matches!(cfg.obstacle, Obstacle::PointCloud { .. }) {
        return Err(Error::InvalidConfig("run_pointcloud_scenario needs a point-cloud obstacle".into()));
    }
    run_scenario(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SafetyReport {
    pub steps: usize,
    pub final_time: f64,
    /// Largest `h` at control instants.
    pub max_h: f64,
    /// Largest `h` including integrator substeps.
    pub max_h_continuous: f64,
    pub max_barrier: f64,
    /// Largest input norm in the input set's own norm.
    pub max_input_norm: f64,
    pub inputs_within_bounds: bool,
    pub infeasible_steps: usize,
    pub min_distance: f64,
    pub halted: bool,
    pub a_max: Option<f64>,
}

impl SafetyReport {
    /// Completed without halting, never above the tolerance, inputs in the set.
    pub fn is_safe(&self, tol: f64) -> bool {
        !self.halted && self.max_h_continuous <= tol && self.inputs_within_bounds
    }
}

pub fn safety_report(log: &TrajectoryLog) -> Result<SafetyReport> {
    if log.records.is_empty() {
        return Err(Error::InvalidConfig("empty trajectory log".into()));
    }
    let fold_max = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let max_input_norm = fold_max(&mut log.records.iter().map(|r| log.inputs.norm(&r.u)));
    Ok(SafetyReport {
        steps: log.records.len(),
        final_time: log.records.last().unwrap().t,
        max_h: fold_max(&mut log.records.iter().map(|r| r.h_max)),
        max_h_continuous: log.h_max_continuous,
        max_barrier: fold_max(&mut log.records.iter().map(|r| r.barrier_max)),
        max_input_norm,
        inputs_within_bounds: log.records.iter().all(|r| log.inputs.contains(&r.u, 0.0)),
        infeasible_steps: log.records.iter().filter(|r| r.status == QpStatus::Infeasible).count(),
        min_distance: log.min_distance,
        halted: log.halted,
        a_max: log.a_max,
    })
}

/// `true` when the QP with barrier rows built from `evals` admits the
/// nominal evader input, used to probe feasibility along a trajectory.
pub fn nominal_is_feasible(evals: &[BarrierEvaluation], alpha_scale: f64, u: &Vec3) -> bool {
    evals.iter().all(|e| {
        e.rows
            .iter()
            .all(|row| row.derivative(u.as_slice()) <= alpha_scale * (-e.value) + 1e-9)
    })
}
