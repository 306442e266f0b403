//! Translational spacecraft dynamics, the distance constraint and its Lie
//! derivatives, and the fixed-step integrator used by every flow computation.
//!
//! The state is `x = [r, v]` with `ṙ = v` and `v̇ = f_μ(r) + u`, so the input
//! map is `g = [0; I]` and the distance constraint has relative degree 2.

use std::ops::{Add, Mul};

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type StateVector = SVector<f64, 6>;
pub type StateMatrix = SMatrix<f64, 6, 6>;
pub type InputMatrix = SMatrix<f64, 6, 3>;

/// Default guard on `‖r − r_s‖` below which the constraint is treated as singular.
pub const DEFAULT_EPS_SING: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub r: Vec3,
    pub v: Vec3,
}

impl State {
    pub fn new(r: Vec3, v: Vec3) -> Self {
        Self { r, v }
    }

    pub fn at_rest(r: Vec3) -> Self {
        Self { r, v: Vec3::zeros() }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::from_column_slice(&[
            self.r.x, self.r.y, self.r.z, self.v.x, self.v.y, self.v.z,
        ])
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            r: Vec3::new(x[0], x[1], x[2]),
            v: Vec3::new(x[3], x[4], x[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.v.iter()).all(|c| c.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gravity {
    None,
    /// Point mass with gravitational parameter `mu` (length³/time²).
    PointMass { mu: f64, center: Vec3 },
}

impl Gravity {
    pub fn accel(&self, r: &Vec3) -> Vec3 {
        match *self {
            Gravity::None => Vec3::zeros(),
            Gravity::PointMass { mu, center } => {
                let d = r - center;
                let n = d.norm();
                -mu * d / (n * n * n)
            }
        }
    }

    /// Largest gravity magnitude at distance `>= min_distance` from the center.
    pub fn max_magnitude(&self, min_distance: f64) -> f64 {
        match *self {
            Gravity::None => 0.0,
            Gravity::PointMass { mu, .. } => mu / (min_distance * min_distance),
        }
    }
}

/// Control-affine model `ẋ = f(x) + g(x)u` for the translational spacecraft.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub gravity: Gravity,
}

impl SystemModel {
    pub const RELATIVE_DEGREE: usize = 2;

    pub fn double_integrator() -> Self {
        Self {
            gravity: Gravity::None,
        }
    }

    pub fn with_gravity(gravity: Gravity) -> Self {
        Self { gravity }
    }

    /// Drift `f(x) = [v, f_μ(r)]`.
    pub fn drift(&self, x: &State) -> StateVector {
        let a = self.gravity.accel(&x.r);
        StateVector::from_column_slice(&[x.v.x, x.v.y, x.v.z, a.x, a.y, a.z])
    }

    /// Input map `g(x) = [0; I]`.
    pub fn input_map(&self) -> InputMatrix {
        let mut g = InputMatrix::zeros();
        g.fixed_view_mut::<3, 3>(3, 0).fill_with_identity();
        g
    }

    pub fn field(&self, x: &State, u: &Vec3) -> StateVector {
        let mut dx = self.drift(x);
        dx[3] += u.x;
        dx[4] += u.y;
        dx[5] += u.z;
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputShape {
    Box,
    Ball,
}

/// Admissible control set: `‖u‖_∞ ≤ u_max` (box) or `‖u‖₂ ≤ u_max` (ball).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSet {
    pub shape: InputShape,
    pub u_max: f64,
}

impl InputSet {
    /// `u_max = 0` is accepted here so that zero authority can be reported
    /// by the barrier constructions rather than at configuration time.
    pub fn new(shape: InputShape, u_max: f64) -> Result<Self> {
        if !u_max.is_finite() || u_max < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "input bound must be finite and nonnegative, got {u_max}"
            )));
        }
        Ok(Self { shape, u_max })
    }

    pub fn unit_box(u_max: f64) -> Self {
        Self {
            shape: InputShape::Box,
            u_max,
        }
    }

    pub fn ball(u_max: f64) -> Self {
        Self {
            shape: InputShape::Ball,
            u_max,
        }
    }

    /// Largest ball contained in the set.
    pub fn inscribed_ball(&self) -> Self {
        Self::ball(self.u_max)
    }

    /// The norm whose unit ball this set is a scaling of.
    pub fn norm(&self, u: &Vec3) -> f64 {
        match self.shape {
            InputShape::Box => u.amax(),
            InputShape::Ball => u.norm(),
        }
    }

    pub fn contains(&self, u: &Vec3, tol: f64) -> bool {
        self.norm(u) <= self.u_max * (1.0 + tol) + tol
    }

    /// `max_{u ∈ U} cᵀu`.
    pub fn support(&self, c: &Vec3) -> f64 {
        match self.shape {
            InputShape::Box => self.u_max * c.lp_norm(1),
            InputShape::Ball => self.u_max * c.norm(),
        }
    }

    /// `argmin_{u ∈ U} cᵀu`. Zero components of `c` get a zero input on the
    /// box; `c = 0` returns the zero input.
    pub fn argmin_linear(&self, c: &Vec3) -> Vec3 {
        match self.shape {
            InputShape::Box => c.map(|ci| {
                if ci > 0.0 {
                    -self.u_max
                } else if ci < 0.0 {
                    self.u_max
                } else {
                    0.0
                }
            }),
            InputShape::Ball => {
                let n = c.norm();
                if n == 0.0 {
                    Vec3::zeros()
                } else {
                    -self.u_max * c / n
                }
            }
        }
    }

    /// Euclidean bound on any admissible input.
    pub fn max_euclidean(&self) -> f64 {
        match self.shape {
            InputShape::Box => self.u_max * 3f64.sqrt(),
            InputShape::Ball => self.u_max,
        }
    }
}

/// Keep-out constraint `h(x) = ρ_a − ‖r − r_s‖ ≤ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceConstraint {
    pub center: Vec3,
    pub radius: f64,
    pub eps_sing: f64,
}

/// `h`, `L_f h`, `L_f² h` and `L_g L_f h` at one state. `L_g h` is identically
/// zero for this model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LieDerivatives {
    pub h: f64,
    pub lf_h: f64,
    pub lf2_h: f64,
    pub lg_lf_h: Vec3,
}

impl LieDerivatives {
    /// `ḧ(x, u) = L_f² h + L_g L_f h · u`.
    pub fn hddot(&self, u: &Vec3) -> f64 {
        self.lf2_h + self.lg_lf_h.dot(u)
    }
}

impl DistanceConstraint {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self {
            center,
            radius,
            eps_sing: DEFAULT_EPS_SING,
        }
    }

    fn offset(&self, r: &Vec3) -> Result<(Vec3, f64)> {
        let d = r - self.center;
        let n = d.norm();
        if !(n >= self.eps_sing) {
            return Err(Error::Singularity {
                distance: n,
                eps: self.eps_sing,
            });
        }
        Ok((d, n))
    }

    pub fn value(&self, x: &State) -> f64 {
        self.radius - (x.r - self.center).norm()
    }

    pub fn distance(&self, x: &State) -> f64 {
        (x.r - self.center).norm()
    }

    /// `∂h/∂x = [−d̂ᵀ, 0]`.
    pub fn gradient(&self, x: &State) -> Result<StateVector> {
        let (d, n) = self.offset(&x.r)?;
        let mut grad = StateVector::zeros();
        grad.fixed_rows_mut::<3>(0).copy_from(&(-d / n));
        Ok(grad)
    }

    pub fn lie_derivatives(&self, model: &SystemModel, x: &State) -> Result<LieDerivatives> {
        let (d, n) = self.offset(&x.r)?;
        let d_hat = d / n;
        let radial_speed = d_hat.dot(&x.v);
        let grav = model.gravity.accel(&x.r);
        Ok(LieDerivatives {
            h: self.radius - n,
            lf_h: -radial_speed,
            lf2_h: (-x.v.norm_squared() + radial_speed * radial_speed - d.dot(&grav)) / n,
            lg_lf_h: -d_hat,
        })
    }
}

pub fn lie_derivatives(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x: &State,
) -> Result<LieDerivatives> {
    constraint.lie_derivatives(model, x)
}

/// One classical fourth-order Runge–Kutta step of `ẏ = field(y)`.
pub fn rk4<V, F>(field: F, y: &V, dt: f64) -> V
where
    V: Clone + Add<Output = V> + Mul<f64, Output = V>,
    F: Fn(&V) -> V,
{
    let k1 = field(y);
    let k2 = field(&(y.clone() + k1.clone() * (0.5 * dt)));
    let k3 = field(&(y.clone() + k2.clone() * (0.5 * dt)));
    let k4 = field(&(y.clone() + k3.clone() * dt));
    y.clone() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// [`rk4`] for fields that can fail part-way through a step.
pub fn try_rk4<V, F>(field: F, y: &V, dt: f64) -> Result<V>
where
    V: Clone + Add<Output = V> + Mul<f64, Output = V>,
    F: Fn(&V) -> Result<V>,
{
    let k1 = field(y)?;
    let k2 = field(&(y.clone() + k1.clone() * (0.5 * dt)))?;
    let k3 = field(&(y.clone() + k2.clone() * (0.5 * dt)))?;
    let k4 = field(&(y.clone() + k3.clone() * dt))?;
    Ok(y.clone() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Advance `x` by `dt` with `u` held constant over the step.
pub fn rk4_step(model: &SystemModel, x: &State, u: &Vec3, dt: f64) -> Result<State> {
    let y = rk4(
        |y: &StateVector| model.field(&State::from_vector(y), u),
        &x.to_vector(),
        dt,
    );
    let next = State::from_vector(&y);
    if !next.is_finite() {
        return Err(Error::Divergence { t: dt });
    }
    Ok(next)
}

/// Value of a constraint along the trajectory at one sample time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub x: State,
    pub h: f64,
}

/// Number of grid samples covering `[0, horizon]` with spacing `dt`.
pub fn sample_count(horizon: f64, dt: f64) -> usize {
    // the slack keeps T = k·dt from picking up an extra sample through rounding
    (horizon / dt - 1e-9).ceil().max(0.0) as usize + 1
}

/// Propagate `x0` under the state-feedback `policy` and record `ψ_h` on the
/// grid `t_k = k·dt`, `k = 0..=⌈T/dt⌉`. The input is held constant within
/// each step.
pub fn propagate_flow<P>(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x0: &State,
    policy: P,
    inputs: &InputSet,
    horizon: f64,
    dt: f64,
) -> Result<Vec<FlowSample>>
where
    P: Fn(&State) -> Result<Vec3>,
{
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "propagation needs dt > 0 and T >= 0 (got dt = {dt}, T = {horizon})"
        )));
    }
    let n = sample_count(horizon, dt);
    let mut samples = Vec::with_capacity(n);
    let mut x = *x0;
    samples.push(FlowSample {
        t: 0.0,
        x,
        h: constraint.value(&x),
    });
    for k in 1..n {
        let u = policy(&x)?;
        if !inputs.contains(&u, 1e-12) {
            return Err(Error::InputOutsideSet {
                input: u.iter().copied().collect(),
            });
        }
        x = rk4_step(model, &x, &u, dt).map_err(|_| Error::Divergence { t: k as f64 * dt })?;
        samples.push(FlowSample {
            t: k as f64 * dt,
            x,
            h: constraint.value(&x),
        });
    }
    Ok(samples)
}
