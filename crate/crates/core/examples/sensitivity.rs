//! Propagate the variational equation under the ball evader with point-mass
//! gravity and compare it with finite differences of the closed-loop flow.

use cbf_shield::dynamics::{rk4, DistanceConstraint, Gravity, InputSet, State, StateVector, SystemModel, Vec3};
use cbf_shield::flow_cbf::{sensitivity_ode, ClosedLoopPolicy, NominalEvader};

/// Closed-loop flow with the input re-evaluated at every RK4 stage.
fn closed_loop_flow(model: &SystemModel, policy: &NominalEvader, x: StateVector, t: f64, dt: f64) -> StateVector {
    let steps = (t / dt).round() as usize;
    let field = |y: &StateVector| {
        let s = State::from_vector(y);
        model.field(&s, &policy.input(&s).expect("finite state"))
    };
    (0..steps).fold(x, |y, _| rk4(field, &y, dt))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = SystemModel::with_gravity(Gravity::PointMass {
        mu: 0.5,
        center: Vec3::zeros(),
    });
    let sphere = DistanceConstraint::new(Vec3::zeros(), 1.0);
    let evader = NominalEvader {
        model: &model,
        constraint: &sphere,
        inputs: InputSet::ball(1.0),
    };
    let x = State::new(Vec3::new(3.0, 0.5, -0.2), Vec3::new(-0.8, 0.1, 0.0));
    let dt = 1e-3;

    for t in [0.5, 1.0, 2.0] {
        let (theta, _) = sensitivity_ode(&model, &evader, &x, t, dt)?;
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for j in 0..6 {
            let mut plus = x.to_vector();
            let mut minus = x.to_vector();
            plus[j] += eps;
            minus[j] -= eps;
            let column = (closed_loop_flow(&model, &evader, plus, t, dt) - closed_loop_flow(&model, &evader, minus, t, dt))
                / (2.0 * eps);
            worst = worst.max((column - theta.column(j)).amax());
        }
        println!("t = {t:.1}: max |theta - finite difference| = {worst:.2e}");
        println!("{theta:.4}");
    }
    Ok(())
}
