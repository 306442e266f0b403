//! Pointwise CLF–CBF quadratic program
//!
//! ```text
//! min_{u ∈ U, δ}  uᵀu + J δ²
//! s.t.            L_f H + L_g H u ≤ α(−H)          (one row per maximizer)
//!                 L_f V + L_g V u + δ ≤ −k₃ V
//! ```
//!
//! with a small dual active-set solver (Goldfarb–Idnani) for the linear
//! rows and box bounds. A ball bound is handled by searching the multiplier
//! of `‖u‖² ≤ u_max²`, which only rescales the `u` block of the cost.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{DistanceConstraint, InputSet, InputShape, LieDerivatives, State, SystemModel, Vec3};
use crate::error::{Error, Result};
use crate::flow_cbf::{BarrierEvaluation, BarrierRow};

/// Feasibility tolerance for rows and bounds.
pub const QP_FEAS_TOL: f64 = 1e-10;

const MAX_BALL_ITERS: usize = 200;

/// Lyapunov tracking function
/// `V = ½‖r − r_p‖² + ½k₂‖v − k₁(r − r_p)‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClfSpec {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// Slack penalty `J`.
    pub slack_weight: f64,
}

impl Default for ClfSpec {
    /// `k₁ < 0` makes the velocity target point at the reference.
    fn default() -> Self {
        Self {
            k1: -0.2,
            k2: 5.0,
            k3: 0.2,
            slack_weight: 10.0,
        }
    }
}

impl ClfSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.k2 > 0.0 && self.k3 > 0.0 && self.slack_weight > 0.0) || !self.k1.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "CLF gains need k2, k3, J > 0 and finite k1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn value(&self, x: &State, target: &Vec3) -> f64 {
        let e = x.r - target;
        let w = x.v - self.k1 * e;
        0.5 * e.norm_squared() + 0.5 * self.k2 * w.norm_squared()
    }

    /// `(V, L_f V, L_g V)` with the target frozen.
    pub fn lie_derivatives(&self, model: &SystemModel, x: &State, target: &Vec3) -> (f64, f64, Vec3) {
        let e = x.r - target;
        let w = x.v - self.k1 * e;
        let grad_r = e - self.k1 * self.k2 * w;
        let grad_v = self.k2 * w;
        let grav = model.gravity.accel(&x.r);
        (
            self.value(x, target),
            grad_r.dot(&x.v) + grad_v.dot(&grav),
            grad_v,
        )
    }
}

/// Linear inequality `coeffs · (u, δ) ≤ rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// CLF row with slack coefficient `+1` and right-hand side `−k₃V − L_f V`.
pub fn clf_row(spec: &ClfSpec, model: &SystemModel, x: &State, target: &Vec3) -> QpRow {
    let (v, lf_v, lg_v) = spec.lie_derivatives(model, x, target);
    QpRow {
        coeffs: vec![lg_v.x, lg_v.y, lg_v.z, 1.0],
        rhs: -spec.k3 * v - lf_v,
    }
}

/// One row per maximizer: `L_g B·u ≤ α(−B) − L_f B` with `α(λ) = alpha_scale·λ`.
pub fn cbf_row(eval: &BarrierEvaluation, alpha_scale: f64) -> Vec<QpRow> {
    eval.rows
        .iter()
        .map(|row| {
            let mut coeffs = row.lg.clone();
            coeffs.push(0.0);
            QpRow {
                coeffs,
                rhs: alpha_scale * (-eval.value) - row.lf,
            }
        })
        .collect()
}

/// `H_o = (arctan ḣ + π/2)·h` and its affine derivative.
pub fn h_o_eval(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x: &State,
) -> Result<BarrierEvaluation> {
    let ld = constraint.lie_derivatives(model, x)?;
    let bend = ld.lf_h.atan() + std::f64::consts::FRAC_PI_2;
    let damp = ld.h / (1.0 + ld.lf_h * ld.lf_h);
    Ok(BarrierEvaluation {
        value: bend * ld.h,
        maximizer_times: vec![0.0],
        rows: vec![BarrierRow {
            lf: bend * ld.lf_h + damp * ld.lf2_h,
            lg: (ld.lg_lf_h * damp).iter().copied().collect(),
        }],
    })
}

pub fn h_o_row(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x: &State,
    alpha_scale: f64,
) -> Result<QpRow> {
    Ok(cbf_row(&h_o_eval(model, constraint, x)?, alpha_scale).remove(0))
}

/// `min uᵀu + Jδ²` subject to `rows` and optional bounds on `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub n_u: usize,
    pub slack_weight: f64,
    pub rows: Vec<QpRow>,
    pub bounds: Option<InputSet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    pub u: Vec<f64>,
    pub slack: f64,
    pub kkt_residual: f64,
    /// Indices into `rows` with positive multipliers. Bounds are not listed.
    pub active_rows: Vec<usize>,
    pub multipliers: Vec<f64>,
}

impl QpResult {
    pub fn objective(&self, slack_weight: f64) -> f64 {
        self.u.iter().map(|v| v * v).sum::<f64>() + slack_weight * self.slack * self.slack
    }

    pub fn u3(&self) -> Vec3 {
        Vec3::new(self.u[0], self.u[1], self.u[2])
    }
}

struct DualSolution {
    y: DVector<f64>,
    multipliers: Vec<f64>,
}

/// Goldfarb–Idnani for `min ½‖y‖²` s.t. `nᵢ·y ≥ bᵢ`. Returns `None` when the
/// constraints are inconsistent.
fn goldfarb_idnani(normals: &[DVector<f64>], b: &[f64], dim: usize) -> Result<Option<DualSolution>> {
    let m = normals.len();
    let scale = 1.0 + b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let viol_tol = 1e-13 * scale;
    let mut y = DVector::<f64>::zeros(dim);
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 50 * (m + dim) + 100;
    let mut iter = 0;

    loop {
        let mut pick = None;
        let mut worst = -viol_tol;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = normals[i].dot(&y) - b[i];
            let norm = normals[i].norm().max(1e-300);
            if s / norm < worst {
                worst = s / norm;
                pick = Some(i);
            }
        }
        let Some(p) = pick else {
            let mut multipliers = vec![0.0; m];
            for (&i, &u) in active.iter().zip(&mult) {
                multipliers[i] = u;
            }
            return Ok(Some(DualSolution { y, multipliers }));
        };
        let np = &normals[p];
        let mut u_p = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::QpIterationLimit { iterations: max_iter });
            }
            let k = active.len();
            let (z, r) = if k == 0 {
                (np.clone(), DVector::zeros(0))
            } else {
                let n_mat = DMatrix::from_columns(&active.iter().map(|&i| normals[i].clone()).collect::<Vec<_>>());
                let gram = n_mat.transpose() * &n_mat;
                let r = gram
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&(n_mat.transpose() * np)))
                    .or_else(|| gram.lu().solve(&(n_mat.transpose() * np)))
                    .unwrap_or_else(|| DVector::zeros(k));
                (np - &n_mat * &r, r)
            };
            let s_p = np.dot(&y) - b[p];
            let zn = z.dot(np);
            let t2 = if z.norm() > 1e-12 * np.norm().max(1.0) && zn > 0.0 {
                -s_p / zn
            } else {
                f64::INFINITY
            };
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for j in 0..k {
                if r[j] > 1e-14 {
                    let ratio = mult[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        block = Some(j);
                    }
                }
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                return Ok(None);
            }
            for j in 0..k {
                mult[j] -= t * r[j];
            }
            u_p += t;
            if t2.is_finite() {
                y += &z * t;
            }
            if t2 <= t1 {
                active.push(p);
                mult.push(u_p);
                break;
            }
            let j = block.expect("partial step without a blocking constraint");
            active.remove(j);
            mult.remove(j);
        }
    }
}

/// Solve with `u` block weighted by `u_weight`.
fn solve_weighted(p: &QpProblem, u_weight: f64, include_box: bool) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let n = p.n_u + 1;
    let sqrt_w: Vec<f64> = (0..n)
        .map(|i| if i < p.n_u { u_weight.sqrt() } else { p.slack_weight.sqrt() })
        .collect();
    let mut normals = Vec::new();
    let mut b = Vec::new();
    for row in &p.rows {
        normals.push(DVector::from_iterator(
            n,
            row.coeffs.iter().zip(&sqrt_w).map(|(a, s)| -a / s),
        ));
        b.push(-row.rhs);
    }
    if include_box {
        if let Some(bounds) = p.bounds {
            for i in 0..p.n_u {
                for sign in [1.0, -1.0] {
                    let mut nrm = DVector::zeros(n);
                    nrm[i] = -sign / sqrt_w[i];
                    normals.push(nrm);
                    b.push(-bounds.u_max);
                }
            }
        }
    }
    let Some(sol) = goldfarb_idnani(&normals, &b, n)? else {
        return Ok(None);
    };
    let z: Vec<f64> = sol.y.iter().zip(&sqrt_w).map(|(y, s)| y / s).collect();
    // ½‖y‖² multipliers map to λ = 2u for the uᵀu + Jδ² cost
    let lambda: Vec<f64> = sol.multipliers.iter().map(|u| 2.0 * u).collect();
    Ok(Some((z, lambda)))
}

fn kkt_residual(p: &QpProblem, z: &[f64], lambda: &[f64], ball_mult: f64) -> f64 {
    let n = p.n_u + 1;
    let mut station: Vec<f64> = (0..n)
        .map(|i| {
            let w = if i < p.n_u { 1.0 + ball_mult } else { p.slack_weight };
            2.0 * w * z[i]
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (row, &l) in p.rows.iter().zip(lambda) {
        for (st, c) in station.iter_mut().zip(&row.coeffs) {
            *st += l * c;
        }
        let s = row.coeffs.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() - row.rhs;
        worst = worst.max(s).max(-l).max((l * s).abs());
        scale = scale.max(row.rhs.abs());
    }
    if let Some(bounds) = p.bounds {
        let u = &z[..p.n_u];
        match bounds.shape {
            InputShape::Box => {
                for (k, &ui) in u.iter().enumerate() {
                    let (lp, lm) = (lambda[p.rows.len() + 2 * k], lambda[p.rows.len() + 2 * k + 1]);
                    station[k] += lp - lm;
                    worst = worst
                        .max(ui.abs() - bounds.u_max)
                        .max((lp * (ui - bounds.u_max)).abs())
                        .max((lm * (-ui - bounds.u_max)).abs());
                }
            }
            InputShape::Ball => {
                let norm2: f64 = u.iter().map(|v| v * v).sum();
                let r2 = bounds.u_max * bounds.u_max;
                worst = worst
                    .max(norm2.sqrt() - bounds.u_max)
                    .max((ball_mult * (norm2 - r2)).abs() / r2.max(1.0));
            }
        }
        scale = scale.max(bounds.u_max);
    }
    let station_max = station.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    station_max.max(worst) / scale
}

fn finish(p: &QpProblem, mut z: Vec<f64>, lambda: Vec<f64>, ball_mult: f64) -> QpResult {
    // remove rounding-level excursions so u lies in the set exactly
    if let Some(bounds) = p.bounds {
        let u = &mut z[..p.n_u];
        match bounds.shape {
            InputShape::Box => u.iter_mut().for_each(|v| *v = v.clamp(-bounds.u_max, bounds.u_max)),
            InputShape::Ball => {
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > bounds.u_max {
                    u.iter_mut().for_each(|v| *v *= bounds.u_max / n);
                }
            }
        }
    }
    let kkt = kkt_residual(p, &z, &lambda, ball_mult);
    let active_rows = (0..p.rows.len()).filter(|&i| lambda[i] > 0.0).collect();
    QpResult {
        status: QpStatus::Optimal,
        slack: z[p.n_u],
        u: z[..p.n_u].to_vec(),
        kkt_residual: kkt,
        active_rows,
        multipliers: lambda,
    }
}

fn infeasible(p: &QpProblem) -> QpResult {
    QpResult {
        status: QpStatus::Infeasible,
        u: vec![0.0; p.n_u],
        slack: 0.0,
        kkt_residual: f64::INFINITY,
        active_rows: Vec::new(),
        multipliers: Vec::new(),
    }
}

pub fn solve_qp(p: &QpProblem) -> Result<QpResult> {
    if !(p.slack_weight > 0.0) {
        return Err(Error::InvalidConfig("slack weight must be positive".into()));
    }
    for row in &p.rows {
        if row.coeffs.len() != p.n_u + 1 || !row.rhs.is_finite() || row.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig(format!("malformed QP row {row:?}")));
        }
    }
    let ball = matches!(p.bounds, Some(InputSet { shape: InputShape::Ball, .. }));
    if !ball {
        return Ok(match solve_weighted(p, 1.0, true)? {
            Some((z, lambda)) => finish(p, z, lambda, 0.0),
            None => infeasible(p),
        });
    }

    let radius = p.bounds.unwrap().u_max;
    let u_norm = |z: &[f64]| z[..p.n_u].iter().map(|v| v * v).sum::<f64>().sqrt();
    let Some((z0, l0)) = solve_weighted(p, 1.0, false)? else {
        return Ok(infeasible(p));
    };
    if u_norm(&z0) <= radius * (1.0 + 1e-12) {
        return Ok(finish(p, z0, l0, 0.0));
    }
    // ‖u(μ)‖ is nonincreasing in the ball multiplier μ
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = loop {
        match solve_weighted(p, 1.0 + hi, false)? {
            Some((z, l)) if u_norm(&z) <= radius => break (z, l, hi),
            Some(_) if hi < 1e15 => {
                lo = hi;
                hi *= 4.0;
            }
            _ => return Ok(infeasible(p)),
        }
    };
    for _ in 0..MAX_BALL_ITERS {
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match solve_weighted(p, 1.0 + mid, false)? {
            Some((z, l)) if u_norm(&z) <= radius => {
                hi = mid;
                best = (z, l, mid);
            }
            Some(_) => lo = mid,
            None => return Ok(infeasible(p)),
        }
    }
    let (z, lambda, mu) = best;
    // the weighted problem's multipliers carry the (1 + μ) factor already
    Ok(finish(p, z, lambda, mu))
}

/// Sampled-data guard: `H′ = h + max(ḣ, 0)²/(2a)` predicted one hold
/// interval ahead must stay nonpositive.
///
/// With `ḧ = A` held, `h⁺ = h + ḣ·dt + ½A·dt²` and `ḣ⁺ = ḣ + A·dt`. The
/// convex term `max(ḣ⁺, 0)²` is replaced by its secant over the reachable
/// interval `A ∈ [L_f²h − σ, L_f²h + σ]`, `σ = max_{u∈U} L_gL_fh·u`, which
/// keeps the row linear in `u` and never underestimates. Full braking
/// satisfies the row whenever `H′ ≤ 0` and `σ − L_f²h ≥ a`.
///
/// The barrier rows alone lose input authority at `ḣ ≈ 0`, so a held input
/// can carry `h` past zero between samples; this row closes that gap.
pub fn sample_guard_row(ld: &LieDerivatives, dt: f64, a: f64, sigma: f64) -> QpRow {
    let a_lo = ld.lf2_h - sigma;
    let a_hi = ld.lf2_h + sigma;
    let q = |acc: f64| (ld.lf_h + acc * dt).max(0.0).powi(2);
    let slope = if a_hi - a_lo > 1e-300 {
        (q(a_hi) - q(a_lo)) / (a_hi - a_lo)
    } else {
        0.0
    };
    // h⁺ + (q_lo + slope·(A − A_lo))/(2a) ≤ 0 with A = L_f²h + L_gL_fh·u
    let k = 0.5 * dt * dt + slope / (2.0 * a);
    QpRow {
        coeffs: vec![k * ld.lg_lf_h.x, k * ld.lg_lf_h.y, k * ld.lg_lf_h.z, 0.0],
        rhs: -ld.h - ld.lf_h * dt - q(a_lo) / (2.0 * a) + slope * a_lo / (2.0 * a) - k * ld.lf2_h,
    }
}

/// One safety-filter step: CLF row with slack, every barrier row without
/// slack, and the input bounds. Infeasibility is returned as a status.
pub fn filter_step(
    barriers: &[BarrierEvaluation],
    alpha_scale: f64,
    spec: &ClfSpec,
    model: &SystemModel,
    x: &State,
    target: &Vec3,
    inputs: &InputSet,
) -> Result<QpResult> {
    filter_step_with_rows(barriers, alpha_scale, spec, model, x, target, inputs, &[])
}

/// [`filter_step`] with additional hard rows appended after the barrier rows.
#[allow(clippy::too_many_arguments)]
pub fn filter_step_with_rows(
    barriers: &[BarrierEvaluation],
    alpha_scale: f64,
    spec: &ClfSpec,
    model: &SystemModel,
    x: &State,
    target: &Vec3,
    inputs: &InputSet,
    extra: &[QpRow],
) -> Result<QpResult> {
    let mut rows = vec![clf_row(spec, model, x, target)];
    for eval in barriers {
        rows.extend(cbf_row(eval, alpha_scale));
    }
    rows.extend_from_slice(extra);
    solve_qp(&QpProblem {
        n_u: 3,
        slack_weight: spec.slack_weight,
        rows,
        bounds: Some(*inputs),
    })
}
