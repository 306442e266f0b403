//! Flow-based barrier `H(x) = sup_t ψ_h(t; x, u*)`.
//!
//! `H` is evaluated by propagating the closed loop under the nominal evading
//! law `u*`, fitting a quadratic through the samples around each retained
//! discrete peak, and differentiating the peak value through the
//! sensitivity (variational) equation of the closed loop.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    propagate_flow, rk4, try_rk4, DistanceConstraint, InputSet, State, StateMatrix, StateVector,
    SystemModel, Vec3,
};
use crate::error::{Error, Result};

/// Finite-difference step for closed-loop Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowBarrierConfig {
    /// Fixed propagation horizon. `None` uses the braking-time bound
    /// `3·max(ḣ, 0)/a_lb + 10·dt`.
    pub horizon: Option<f64>,
    pub dt: f64,
    /// Samples in the quadratic peak fit (odd, at least 3).
    pub peak_window: usize,
    /// Local peaks within this fraction of the `ψ_h` range below the global
    /// peak are kept as extra maximizers.
    pub multi_max_tol: f64,
    /// Lower bound on the achievable dissipation rate of `ḣ`.
    pub a_lb: f64,
}

impl Default for FlowBarrierConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            dt: 1e-3,
            peak_window: 3,
            multi_max_tol: 0.02,
            a_lb: 1.0,
        }
    }
}

impl FlowBarrierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if let Some(t) = self.horizon {
            if !(t > 0.0) {
                return bad(format!("flow horizon must be positive, got {t}"));
            }
        }
        if !(self.dt > 0.0) {
            return bad(format!("flow dt must be positive, got {}", self.dt));
        }
        if self.peak_window < 3 || self.peak_window.is_multiple_of(2) {
            return bad(format!(
                "peak_window must be odd and >= 3, got {}",
                self.peak_window
            ));
        }
        if !(self.multi_max_tol > 0.0 && self.multi_max_tol < 1.0) {
            return bad(format!(
                "multi_max_tol must lie in (0, 1), got {}",
                self.multi_max_tol
            ));
        }
        if !(self.a_lb > 0.0) {
            return bad(format!("a_lb must be positive, got {}", self.a_lb));
        }
        Ok(())
    }

    pub fn horizon_for(&self, hdot: f64) -> f64 {
        self.horizon
            .unwrap_or(3.0 * hdot.max(0.0) / self.a_lb + 10.0 * self.dt)
    }
}

/// Affine barrier derivative `Ḃ(x, u) = lf + lg·u` at one maximizer.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierRow {
    pub lf: f64,
    pub lg: Vec<f64>,
}

impl BarrierRow {
    pub fn derivative(&self, u: &[f64]) -> f64 {
        self.lf + self.lg.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierEvaluation {
    pub value: f64,
    pub maximizer_times: Vec<f64>,
    /// One row per entry of `maximizer_times`.
    pub rows: Vec<BarrierRow>,
}

impl BarrierEvaluation {
    /// `Ḃ(x, u)` as the max over maximizer rows.
    pub fn derivative(&self, u: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|row| row.derivative(u))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A state-feedback law for which the flow sensitivity can be computed.
pub trait ClosedLoopPolicy {
    fn input(&self, x: &State) -> Result<Vec3>;

    /// `∂u/∂x`, when known in closed form. `None` falls back to central
    /// finite differences of the closed-loop field.
    fn input_jacobian(&self, _x: &State) -> Option<SMatrix<f64, 3, 6>> {
        None
    }
}

impl<F> ClosedLoopPolicy for F
where
    F: Fn(&State) -> Result<Vec3>,
{
    fn input(&self, x: &State) -> Result<Vec3> {
        self(x)
    }
}

/// A constant input, e.g. a saturated thrust that is locally fixed.
#[derive(Clone, Copy, Debug)]
pub struct ConstantInput(pub Vec3);

impl ClosedLoopPolicy for ConstantInput {
    fn input(&self, _x: &State) -> Result<Vec3> {
        Ok(self.0)
    }

    fn input_jacobian(&self, _x: &State) -> Option<SMatrix<f64, 3, 6>> {
        Some(SMatrix::zeros())
    }
}

/// Nominal evading law `u*(x) = argmin_{u ∈ U} L_g L_f h(x)·u`.
#[derive(Clone, Copy, Debug)]
pub struct NominalEvader<'a> {
    pub model: &'a SystemModel,
    pub constraint: &'a DistanceConstraint,
    pub inputs: InputSet,
}

impl ClosedLoopPolicy for NominalEvader<'_> {
    fn input(&self, x: &State) -> Result<Vec3> {
        u_star_ball(self.model, self.constraint, x, &self.inputs)
    }

    /// The box law is piecewise constant; it is frozen between sign changes.
    fn input_jacobian(&self, _x: &State) -> Option<SMatrix<f64, 3, 6>> {
        match self.inputs.shape {
            crate::dynamics::InputShape::Box => Some(SMatrix::zeros()),
            crate::dynamics::InputShape::Ball => None,
        }
    }
}

/// Pointwise minimizer of `h^{(r)}` over the input set.
pub fn u_star_ball(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x: &State,
    inputs: &InputSet,
) -> Result<Vec3> {
    let ld = constraint.lie_derivatives(model, x)?;
    Ok(inputs.argmin_linear(&ld.lg_lf_h))
}

fn closed_loop_field<P: ClosedLoopPolicy + ?Sized>(
    model: &SystemModel,
    policy: &P,
    x: &State,
) -> Result<StateVector> {
    Ok(model.field(x, &policy.input(x)?))
}

/// Jacobian of `f(y) + g(y)u*(y)` at `x`.
pub fn closed_loop_jacobian<P: ClosedLoopPolicy + ?Sized>(
    model: &SystemModel,
    policy: &P,
    x: &State,
) -> Result<StateMatrix> {
    let y = x.to_vector();
    let mut jac = StateMatrix::zeros();
    match policy.input_jacobian(x) {
        Some(du_dx) => {
            let u = policy.input(x)?;
            for i in 0..6 {
                let mut yp = y;
                let mut ym = y;
                yp[i] += JACOBIAN_STEP;
                ym[i] -= JACOBIAN_STEP;
                let col = (model.field(&State::from_vector(&yp), &u)
                    - model.field(&State::from_vector(&ym), &u))
                    / (2.0 * JACOBIAN_STEP);
                jac.set_column(i, &col);
            }
            jac += model.input_map() * du_dx;
        }
        None => {
            for i in 0..6 {
                let mut yp = y;
                let mut ym = y;
                yp[i] += JACOBIAN_STEP;
                ym[i] -= JACOBIAN_STEP;
                let col = (closed_loop_field(model, policy, &State::from_vector(&yp))?
                    - closed_loop_field(model, policy, &State::from_vector(&ym))?)
                    / (2.0 * JACOBIAN_STEP);
                jac.set_column(i, &col);
            }
        }
    }
    Ok(jac)
}

/// Splits `[0, t_end]` into steps of `dt` plus one shorter final step.
fn step_schedule(t_end: f64, dt: f64) -> impl Iterator<Item = f64> {
    let full = (t_end / dt).floor() as usize;
    let rest = t_end - full as f64 * dt;
    let tail = if rest > 1e-12 * dt { Some(rest) } else { None };
    std::iter::repeat_n(dt, full).chain(tail)
}

/// Integrates the variational equation `θ̇ = J(z)θ`, `θ(0) = I`, jointly with
/// `ż = F(z)`, `z(0) = x0`, for an arbitrary vector field `F` with Jacobian `J`.
pub fn sensitivity_ode_with<F, J>(
    field: F,
    jacobian: J,
    x0: &DVector<f64>,
    t_end: f64,
    dt: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    if !(t_end >= 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sensitivity integration needs t_end >= 0 and dt > 0 (got {t_end}, {dt})"
        )));
    }
    let n = x0.len();
    let mut y = DVector::zeros(n + n * n);
    y.rows_mut(0, n).copy_from(x0);
    for i in 0..n {
        y[n + i * n + i] = 1.0;
    }
    let joint = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let z = y.rows(0, n).into_owned();
        let theta = DMatrix::from_column_slice(n, n, &y.as_slice()[n..]);
        let mut out = DVector::zeros(n + n * n);
        out.rows_mut(0, n).copy_from(&field(&z)?);
        let dtheta = jacobian(&z)? * theta;
        out.rows_mut(n, n * n).copy_from_slice(dtheta.as_slice());
        Ok(out)
    };
    let mut t = 0.0;
    for h in step_schedule(t_end, dt) {
        y = try_rk4(joint, &y, h)?;
        t += h;
        if y.iter().any(|c| !c.is_finite()) {
            return Err(Error::Divergence { t });
        }
    }
    let z = y.rows(0, n).into_owned();
    let theta = DMatrix::from_column_slice(n, n, &y.as_slice()[n..]);
    Ok((theta, z))
}

/// State transition sensitivity `θ(t_end) = ∂ψ_x(t_end; x)/∂x` of the closed
/// loop under `policy`, and the propagated state `ψ_x(t_end; x)`.
pub fn sensitivity_ode<P: ClosedLoopPolicy + ?Sized>(
    model: &SystemModel,
    policy: &P,
    x: &State,
    t_end: f64,
    dt: f64,
) -> Result<(StateMatrix, State)> {
    if !(t_end >= 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sensitivity integration needs t_end >= 0 and dt > 0 (got {t_end}, {dt})"
        )));
    }
    let mut z = x.to_vector();
    let mut theta = StateMatrix::identity();
    let mut t = 0.0;
    for h in step_schedule(t_end, dt) {
        let joint = |p: &Pair| -> Result<Pair> {
            let s = State::from_vector(&p.0);
            Ok(Pair(
                closed_loop_field(model, policy, &s)?,
                closed_loop_jacobian(model, policy, &s)? * p.1,
            ))
        };
        let next = try_rk4(joint, &Pair(z, theta), h)?;
        z = next.0;
        theta = next.1;
        t += h;
        if z.iter().chain(theta.iter()).any(|c| !c.is_finite()) {
            return Err(Error::Divergence { t });
        }
    }
    Ok((theta, State::from_vector(&z)))
}

/// State and sensitivity integrated together.
#[derive(Clone, Copy, Debug)]
struct Pair(StateVector, StateMatrix);

impl std::ops::Add for Pair {
    type Output = Pair;
    fn add(self, rhs: Pair) -> Pair {
        Pair(self.0 + rhs.0, self.1 + rhs.1)
    }
}

impl std::ops::Mul<f64> for Pair {
    type Output = Pair;
    fn mul(self, k: f64) -> Pair {
        Pair(self.0 * k, self.1 * k)
    }
}

/// Closed-form `θ(t) = [[I, tI], [0, I]]` for the force-free double
/// integrator under a locally constant input.
pub fn double_integrator_theta(t: f64) -> StateMatrix {
    let mut theta = StateMatrix::identity();
    theta
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * t));
    theta
}

/// `∂ψ_h(t_q; x)/∂x = ∂h/∂x(ψ_x(t_q)) · θ(t_q)`.
pub fn eval_h_gradient<P: ClosedLoopPolicy + ?Sized>(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    policy: &P,
    x: &State,
    t_q: f64,
    cfg: &FlowBarrierConfig,
) -> Result<StateVector> {
    let (theta, z) = sensitivity_ode(model, policy, x, t_q, cfg.dt)?;
    let grad_h = constraint.gradient(&z)?;
    Ok(theta.transpose() * grad_h)
}

/// Least-squares `q(τ) = aτ² + bτ + c` through `(τ_i, ψ_i)`.
fn fit_quadratic(taus: &[f64], values: &[f64]) -> (f64, f64, f64) {
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for (&tau, &psi) in taus.iter().zip(values) {
        let basis = Vector3::new(tau * tau, tau, 1.0);
        normal += basis * basis.transpose();
        rhs += basis * psi;
    }
    let coef = normal
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| Vector3::new(0.0, 0.0, 0.0));
    (coef[0], coef[1], coef[2])
}

/// Discrete local maxima of `psi` that lie within `tol·range` of the global
/// maximum. Index 0 counts when `psi[0] >= psi[1]`.
fn retained_peaks(psi: &[f64], tol: f64) -> Vec<usize> {
    let max = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = psi.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = max - tol * (max - min);
    let last = psi.len() - 1;
    (0..=last)
        .filter(|&k| {
            let left = k == 0 || psi[k] > psi[k - 1];
            let right = k == last || psi[k] >= psi[k + 1];
            left && right && psi[k] >= cutoff
        })
        .collect()
}

fn row_from_gradient(model: &SystemModel, x: &State, grad: &StateVector) -> BarrierRow {
    let lf = grad.dot(&model.drift(x));
    let lg = model.input_map().transpose() * grad;
    BarrierRow {
        lf,
        lg: lg.iter().copied().collect(),
    }
}

/// Evaluate `H(x)` with `u*` minimizing over `nominal`.
pub fn eval_h(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x: &State,
    nominal: &InputSet,
    cfg: &FlowBarrierConfig,
) -> Result<BarrierEvaluation> {
    let ld = constraint.lie_derivatives(model, x)?;
    let at_zero = || BarrierRow {
        lf: ld.lf_h,
        lg: vec![0.0; 3],
    };
    let policy = NominalEvader {
        model,
        constraint,
        inputs: *nominal,
    };
    let horizon = cfg.horizon_for(ld.lf_h);
    let samples = propagate_flow(model, constraint, x, |y| policy.input(y), nominal, horizon, cfg.dt)?;
    let psi: Vec<f64> = samples.iter().map(|s| s.h).collect();
    let last = psi.len() - 1;
    let global = psi
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > psi[best] { k } else { best });

    if global == 0 && ld.lf_h <= 0.0 {
        return Ok(BarrierEvaluation {
            value: ld.h,
            maximizer_times: vec![0.0],
            rows: vec![at_zero()],
        });
    }
    if global == last {
        return Err(Error::HorizonTooShort { horizon });
    }

    let half = cfg.peak_window / 2;
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for k in retained_peaks(&psi, cfg.multi_max_tol) {
        if k == last {
            return Err(Error::HorizonTooShort { horizon });
        }
        if k == 0 && ld.lf_h <= 0.0 {
            candidates.push((0.0, ld.h));
            continue;
        }
        let lo = k.saturating_sub(half).min(last + 1 - cfg.peak_window.min(last + 1));
        let hi = (lo + cfg.peak_window).min(last + 1);
        let center = samples[k].t;
        let taus: Vec<f64> = samples[lo..hi].iter().map(|s| s.t - center).collect();
        let (a, b, c) = fit_quadratic(&taus, &psi[lo..hi]);
        if !(a < 0.0) {
            return Err(Error::DegeneratePeak {
                time: center,
                curvature: a,
            });
        }
        let t_q = center - b / (2.0 * a);
        if t_q <= 0.0 {
            candidates.push((0.0, ld.h));
        } else {
            candidates.push((t_q, c - b * b / (4.0 * a)));
        }
    }

    let value = candidates
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut maximizer_times = Vec::with_capacity(candidates.len());
    let mut rows = Vec::with_capacity(candidates.len());
    for (t_q, _) in candidates {
        let row = if t_q == 0.0 {
            at_zero()
        } else {
            let grad = eval_h_gradient(model, constraint, &policy, x, t_q, cfg)?;
            row_from_gradient(model, x, &grad)
        };
        maximizer_times.push(t_q);
        rows.push(row);
    }
    Ok(BarrierEvaluation {
        value,
        maximizer_times,
        rows,
    })
}

/// Bundles everything needed to evaluate `H` at arbitrary states.
#[derive(Clone, Copy, Debug)]
pub struct FlowBarrier {
    pub model: SystemModel,
    pub constraint: DistanceConstraint,
    /// Set over which `u*` minimizes.
    pub nominal: InputSet,
    pub cfg: FlowBarrierConfig,
}

impl FlowBarrier {
    pub fn evaluate(&self, x: &State) -> Result<BarrierEvaluation> {
        eval_h(&self.model, &self.constraint, x, &self.nominal, &self.cfg)
    }
}

/// `ψ_x(t; x, u)` by plain RK4 on the fixed grid, used to cross-check the
/// sensitivity integration.
pub fn flow_state<P: ClosedLoopPolicy + ?Sized>(
    model: &SystemModel,
    policy: &P,
    x: &State,
    t_end: f64,
    dt: f64,
) -> Result<State> {
    let mut z = x.to_vector();
    for h in step_schedule(t_end, dt) {
        let u = policy.input(&State::from_vector(&z))?;
        z = rk4(|y: &StateVector| model.field(&State::from_vector(y), &u), &z, h);
    }
    Ok(State::from_vector(&z))
}
