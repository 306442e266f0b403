//! Constant-authority barrier `H′`.
//!
//! If every state in the safe set admits an input with `h^{(r)} = −a_max`,
//! the flow of `h` under such inputs is the polynomial
//!
//! ```text
//! ψ_h(t) = Σ_{i<r} h^{(i)}(x) tⁱ/i! − a_max tʳ/r!
//! ```
//!
//! and `H′(x)` is its maximum over `t ≥ 0`. The maximizers come from the
//! closed-form roots of `dψ_h/dt`, which has degree `r − 1 ≤ 3`.

use rand::Rng;

use crate::dynamics::{DistanceConstraint, InputSet, State, SystemModel, Vec3};
use crate::error::{Error, Result};
use crate::flow_cbf::{BarrierEvaluation, BarrierRow};
use crate::roots;

pub type PolyEvaluation = BarrierEvaluation;

/// Relative tolerance for treating two candidate peaks as tied.
pub const DEFAULT_EPS_MAX: f64 = 1e-12;

/// Relative margin taken off the sampled `a_max`.
pub const DEFAULT_A_MAX_MARGIN: f64 = 0.01;

/// `h, ḣ, …, h^{(r−1)}` at a state, plus the affine form of `h^{(r)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeStack {
    pub derivs: Vec<f64>,
    /// `L_f^r h(x)`.
    pub lf_r: f64,
    /// `L_g L_f^{r−1} h(x)`.
    pub lg_lf: Vec<f64>,
}

impl DerivativeStack {
    pub fn order(&self) -> usize {
        self.derivs.len()
    }

    /// Stack of the distance constraint for the translational model (`r = 2`).
    pub fn for_distance(
        model: &SystemModel,
        constraint: &DistanceConstraint,
        x: &State,
    ) -> Result<Self> {
        let ld = constraint.lie_derivatives(model, x)?;
        Ok(Self {
            derivs: vec![ld.h, ld.lf_h],
            lf_r: ld.lf2_h,
            lg_lf: ld.lg_lf_h.iter().copied().collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolyBarrier {
    pub order: usize,
    pub a_max: f64,
}

impl PolyBarrier {
    pub fn new(order: usize, a_max: f64) -> Result<Self> {
        if !(2..=4).contains(&order) {
            return Err(Error::InvalidConfig(format!(
                "polynomial barrier supports relative degree 2..=4, got {order}"
            )));
        }
        if !(a_max > 0.0) {
            return Err(Error::NoValidAMax { value: a_max });
        }
        Ok(Self { order, a_max })
    }

    fn check(&self, stack: &DerivativeStack) -> Result<()> {
        if stack.order() != self.order {
            return Err(Error::InvalidConfig(format!(
                "derivative stack has order {} but the barrier expects {}",
                stack.order(),
                self.order
            )));
        }
        Ok(())
    }

    pub fn coeffs(&self, stack: &DerivativeStack) -> Result<Vec<f64>> {
        self.check(stack)?;
        Ok(poly_coeffs(&stack.derivs, self.a_max))
    }

    pub fn evaluate(&self, stack: &DerivativeStack) -> Result<PolyEvaluation> {
        let coeffs = self.coeffs(stack)?;
        let times = maximizers(&coeffs);
        let value = roots::eval(&coeffs, times[0]);
        let r = self.order;
        let rows = times
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    BarrierRow {
                        lf: stack.derivs[1],
                        lg: vec![0.0; stack.lg_lf.len()],
                    }
                } else {
                    let k = t.powi(r as i32 - 1) / factorial(r - 1);
                    BarrierRow {
                        lf: k * (self.a_max + stack.lf_r),
                        lg: stack.lg_lf.iter().map(|c| k * c).collect(),
                    }
                }
            })
            .collect();
        Ok(PolyEvaluation {
            value,
            maximizer_times: times,
            rows,
        })
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `[h, ḣ, …, h^{(r−1)}/(r−1)!, −a_max/r!]` in ascending powers of `t`.
pub fn poly_coeffs(derivs: &[f64], a_max: f64) -> Vec<f64> {
    let r = derivs.len();
    let mut c: Vec<f64> = derivs
        .iter()
        .enumerate()
        .map(|(i, d)| d / factorial(i))
        .collect();
    c.push(-a_max / factorial(r));
    c
}

/// Argmax set of the polynomial over `t ≥ 0`. The leading coefficient must
/// be negative so the maximum exists.
pub fn maximizers(coeffs: &[f64]) -> Vec<f64> {
    maximizers_with_tol(coeffs, DEFAULT_EPS_MAX)
}

pub fn maximizers_with_tol(coeffs: &[f64], eps: f64) -> Vec<f64> {
    debug_assert!(*coeffs.last().unwrap() < 0.0);
    let slope = roots::derivative(coeffs);
    let mut candidates = vec![0.0];
    candidates.extend(roots::real_roots(&slope).into_iter().filter(|&t| t > 0.0));
    let values: Vec<f64> = candidates.iter().map(|&t| roots::eval(coeffs, t)).collect();
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = eps * best.abs().max(1.0);
    let mut times: Vec<f64> = candidates
        .into_iter()
        .zip(values)
        .filter(|&(_, v)| best - v <= tol)
        .map(|(t, _)| t)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    times
}

/// `H′` for the distance constraint, which has relative degree 2.
pub fn eval_h_prime(
    barrier: &PolyBarrier,
    model: &SystemModel,
    constraint: &DistanceConstraint,
    x: &State,
) -> Result<PolyEvaluation> {
    barrier.evaluate(&DerivativeStack::for_distance(model, constraint, x)?)
}

/// `H′` for `r = 2`: `h` while receding, `h + ḣ²/(2 a_max)` otherwise.
pub fn closed_form_r2(h: f64, hdot: f64, a_max: f64) -> f64 {
    if hdot < 0.0 {
        h
    } else {
        h + hdot * hdot / (2.0 * a_max)
    }
}

/// Largest dissipation rate of `h^{(r)}` that every sampled state can
/// sustain, reduced by the relative `margin`.
///
/// At each sample the fastest decrease of `h^{(r)} = L_f^r h + c·u` over the
/// input set is `σ − L_f^r h` with `σ = max_{u∈U} c·u`. Only this upper end
/// matters: the barrier derivative is nonpositive whenever
/// `h^{(r)} ≤ −a_max`, so states whose drift alone already decreases
/// `h^{(r)}` faster than `a_max` impose no constraint.
pub fn compute_a_max(
    model: &SystemModel,
    constraint: &DistanceConstraint,
    inputs: &InputSet,
    samples: &[State],
    margin: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig(
            "a_max needs at least one sampled state".into(),
        ));
    }
    let mut upper = f64::INFINITY;
    for x in samples {
        let ld = constraint.lie_derivatives(model, x)?;
        if ld.h > 0.0 {
            return Err(Error::InvalidConfig(format!(
                "a_max sample {:?} lies outside the safe set (h = {})",
                x.r, ld.h
            )));
        }
        let sigma = inputs.support(&ld.lg_lf_h);
        upper = upper.min(sigma - ld.lf2_h);
    }
    let a = upper * (1.0 - margin);
    if !(a > 0.0) {
        return Err(Error::NoValidAMax { value: a });
    }
    Ok(a)
}

/// States for sampling `a_max`: positions uniform in the spherical shell
/// `[r_in, r_out]` about `center`, each paired once at rest and once with a
/// uniformly random velocity of speed at most `v_max`.
pub fn shell_samples<R: Rng>(
    center: Vec3,
    r_in: f64,
    r_out: f64,
    v_max: f64,
    n_positions: usize,
    rng: &mut R,
) -> Vec<State> {
    let mut out = Vec::with_capacity(2 * n_positions);
    for _ in 0..n_positions {
        let dir = random_unit(rng);
        let radius = rng.random_range(r_in..=r_out);
        let r = center + dir * radius;
        out.push(State::at_rest(r));
        let speed = rng.random_range(0.0..=v_max);
        out.push(State::new(r, random_unit(rng) * speed));
    }
    out
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Gravity;
    use rand::SeedableRng;

    fn stack(derivs: &[f64]) -> DerivativeStack {
        DerivativeStack {
            derivs: derivs.to_vec(),
            lf_r: 0.0,
            lg_lf: vec![1.0],
        }
    }

    /// Maximum of the polynomial on a dense grid.
    fn grid_max(coeffs: &[f64], t_max: f64, n: usize) -> (f64, f64) {
        (0..=n)
            .map(|k| {
                let t = t_max * k as f64 / n as f64;
                (t, roots::eval(coeffs, t))
            })
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }

    #[test]
    fn coefficient_examples() {
        let b2 = PolyBarrier::new(2, 2.0).unwrap();
        assert_eq!(b2.coeffs(&stack(&[-5.0, 4.0])).unwrap(), vec![-5.0, 4.0, -1.0]);
        let b3 = PolyBarrier::new(3, 1.5).unwrap();
        assert_eq!(
            b3.coeffs(&stack(&[0.0, 0.0, 0.0])).unwrap(),
            vec![0.0, 0.0, 0.0, -1.5 / 6.0]
        );

        let model = SystemModel::double_integrator();
        let c = DistanceConstraint::new(Vec3::zeros(), 1.0);
        let (d, s, u_max) = (4.0, 1.2, 0.5);
        let x = State::new(Vec3::new(d, 0.0, 0.0), Vec3::new(-s, 0.0, 0.0));
        let st = DerivativeStack::for_distance(&model, &c, &x).unwrap();
        let co = PolyBarrier::new(2, u_max).unwrap().coeffs(&st).unwrap();
        assert_eq!(co, vec![1.0 - d, s, -u_max / 2.0]);
    }

    #[test]
    fn maximizer_examples() {
        assert_eq!(maximizers(&poly_coeffs(&[-5.0, 4.0], 2.0)), vec![2.0]);
        assert_eq!(maximizers(&poly_coeffs(&[-5.0, -1.0], 2.0)), vec![0.0]);
        assert_eq!(maximizers(&poly_coeffs(&[0.3, 0.0, 0.0], 1.0)), vec![0.0]);
    }

    #[test]
    fn order_three_interior_peak() {
        // ψ = −1 + t + 0·t²/2 − t³/6 peaks at t = √2
        let ev = PolyBarrier::new(3, 1.0)
            .unwrap()
            .evaluate(&stack(&[-1.0, 1.0, 0.0]))
            .unwrap();
        assert_eq!(ev.maximizer_times.len(), 1);
        assert!((ev.maximizer_times[0] - 2f64.sqrt()).abs() < 1e-12);
        let (_, gm) = grid_max(&poly_coeffs(&[-1.0, 1.0, 0.0], 1.0), 5.0, 1_000_000);
        assert!((ev.value - gm).abs() < 1e-9);
    }

    #[test]
    fn order_four_tied_peaks_are_both_kept() {
        // ψ = −t²(t − 2)²/24 has equal peaks at t = 0 and t = 2:
        // −(t⁴ − 4t³ + 4t²)/24 matches h = 0, ḣ = 0, ḧ/2 = −4/24, h'''/6 = 4/24, a/24 = 1/24
        let derivs = [0.0, 0.0, -8.0 / 24.0, 1.0];
        let c = poly_coeffs(&derivs, 1.0);
        assert!((c[2] + 4.0 / 24.0).abs() < 1e-15 && (c[3] - 4.0 / 24.0).abs() < 1e-15);
        let times = maximizers(&c);
        assert_eq!(times.len(), 2, "{times:?}");
        assert_eq!(times[0], 0.0);
        assert!((times[1] - 2.0).abs() < 1e-9);
        let ev = PolyBarrier::new(4, 1.0).unwrap().evaluate(&stack(&derivs)).unwrap();
        assert_eq!(ev.rows.len(), 2);
    }

    #[test]
    fn h_prime_examples() {
        let b = PolyBarrier::new(2, 2.0).unwrap();
        let ev = b.evaluate(&stack(&[-5.0, 4.0])).unwrap();
        let (_, gm) = grid_max(&poly_coeffs(&[-5.0, 4.0], 2.0), 10.0, 1_000_000);
        assert!((ev.value + 1.0).abs() < 1e-12);
        assert!((gm + 1.0).abs() < 1e-9);

        let ev = b.evaluate(&stack(&[-3.0, -0.5])).unwrap();
        assert_eq!(ev.value, -3.0);

        let ev = b.evaluate(&stack(&[-1.0, 2.0])).unwrap();
        assert!(ev.value.abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(closed_form_r2(-5.0, 4.0, 2.0), -1.0);
        assert_eq!(closed_form_r2(-1.0, -3.0, 2.0), -1.0);
        assert_eq!(closed_form_r2(0.0, 0.0, 2.0), 0.0);
    }

    #[test]
    fn rows_follow_stationarity_identity() {
        let b = PolyBarrier::new(2, 2.0).unwrap();
        let st = DerivativeStack {
            derivs: vec![-5.0, 4.0],
            lf_r: 0.25,
            lg_lf: vec![-1.0, 0.0, 0.0],
        };
        let ev = b.evaluate(&st).unwrap();
        // t = 2, factor = t
        assert_eq!(ev.rows[0].lf, 2.0 * (2.0 + 0.25));
        assert_eq!(ev.rows[0].lg, vec![-2.0, 0.0, 0.0]);
        // receding: zero maximizer row is (ḣ, 0)
        let st = DerivativeStack {
            derivs: vec![-5.0, -4.0],
            ..st
        };
        let ev = b.evaluate(&st).unwrap();
        assert_eq!(ev.rows[0].lf, -4.0);
        assert_eq!(ev.rows[0].lg, vec![0.0; 3]);
    }

    #[test]
    fn seam_uses_zero_maximizer_row() {
        let b = PolyBarrier::new(2, 1.0).unwrap();
        let ev = b.evaluate(&stack(&[-1.0, 0.0])).unwrap();
        assert_eq!(ev.maximizer_times, vec![0.0]);
        assert_eq!(ev.rows[0].lg, vec![0.0]);
    }

    #[test]
    fn invalid_barriers() {
        assert!(PolyBarrier::new(5, 1.0).is_err());
        assert!(PolyBarrier::new(1, 1.0).is_err());
        assert!(matches!(PolyBarrier::new(2, 0.0), Err(Error::NoValidAMax { .. })));
        let b = PolyBarrier::new(3, 1.0).unwrap();
        assert!(b.evaluate(&stack(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn a_max_is_u_max_without_gravity() {
        let model = SystemModel::double_integrator();
        let c = DistanceConstraint::new(Vec3::zeros(), 2.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples = shell_samples(Vec3::zeros(), 2.0, 10.0, 5.0, 500, &mut rng);
        for inputs in [InputSet::ball(0.7), InputSet::unit_box(0.7)] {
            let a = compute_a_max(&model, &c, &inputs, &samples, 0.0).unwrap();
            assert!(a >= 0.7 - 1e-12, "{a}");
            // the box only exceeds the ball along off-axis directions
            if inputs.shape == crate::dynamics::InputShape::Ball {
                assert!((a - 0.7).abs() < 1e-12);
            }
        }
        let a = compute_a_max(&model, &c, &InputSet::ball(0.7), &samples, DEFAULT_A_MAX_MARGIN)
            .unwrap();
        assert!((a - 0.693).abs() < 1e-12);
    }

    #[test]
    fn a_max_subtracts_worst_case_gravity() {
        let mu = 2.0;
        let r_in = 3.0;
        let model = SystemModel::with_gravity(Gravity::PointMass {
            mu,
            center: Vec3::zeros(),
        });
        let c = DistanceConstraint::new(Vec3::zeros(), r_in);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut samples = shell_samples(Vec3::zeros(), r_in, 4.0 * r_in, 1.0, 2000, &mut rng);
        samples.push(State::at_rest(Vec3::new(0.0, 0.0, r_in)));
        let u_max = 1.0;
        let a = compute_a_max(&model, &c, &InputSet::ball(u_max), &samples, 0.0).unwrap();
        let expected = u_max - mu / (r_in * r_in);
        assert!((a - expected).abs() < 1e-12, "{a} vs {expected}");

        // direction sweep at the inner shell: braking authority minus the
        // inward pull is never below the reported rate
        for k in 0..2000 {
            let th = std::f64::consts::PI * (k as f64 + 0.5) / 2000.0;
            let ph = 2.4 * k as f64;
            let d = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
            let ld = c.lie_derivatives(&model, &State::at_rest(d * r_in)).unwrap();
            assert!(u_max - ld.lf2_h >= a - 1e-12);
        }
    }

    #[test]
    fn zero_authority_has_no_a_max() {
        let model = SystemModel::double_integrator();
        let c = DistanceConstraint::new(Vec3::zeros(), 1.0);
        let samples = [State::at_rest(Vec3::new(2.0, 0.0, 0.0))];
        let err = compute_a_max(&model, &c, &InputSet::ball(0.0), &samples, 0.01).unwrap_err();
        assert!(matches!(err, Error::NoValidAMax { .. }));
    }
}
