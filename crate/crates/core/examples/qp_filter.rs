//! One filter step near a sphere: compare the pure tracking input with the
//! filtered one and show which rows bind.

use cbf_shield::dynamics::{DistanceConstraint, InputSet, State, SystemModel, Vec3};
use cbf_shield::poly_cbf::{eval_h_prime, PolyBarrier};
use cbf_shield::safety_filter::{filter_step, ClfSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = SystemModel::double_integrator();
    let sphere = DistanceConstraint::new(Vec3::zeros(), 6.0);
    let inputs = InputSet::unit_box(0.1);
    let poly = PolyBarrier::new(2, 0.099)?;
    let gains = ClfSpec::default();
    let target = Vec3::new(-5.0, 0.0, 0.0);

    for dist in [12.0, 8.0, 6.5, 6.05] {
        let x = State::new(Vec3::new(-dist, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0));
        let free = filter_step(&[], 1.0, &gains, &model, &x, &target, &inputs)?;
        let eval = eval_h_prime(&poly, &model, &sphere, &x)?;
        let safe = filter_step(std::slice::from_ref(&eval), 1.0, &gains, &model, &x, &target, &inputs)?;
        println!(
            "dist {dist:5.2}  H' {:+.4}  tracking u_x {:+.4}  filtered u_x {:+.4}  slack {:+.3e}  active rows {:?}  kkt {:.1e}",
            eval.value,
            free.u[0],
            safe.u[0],
            safe.slack,
            safe.active_rows,
            safe.kkt_residual
        );
    }
    Ok(())
}
