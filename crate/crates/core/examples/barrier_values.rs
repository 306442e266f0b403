//! Tabulate h, H' and the flow barrier H along a head-on approach to a unit
//! sphere, with the maximizer times of each barrier.

use cbf_shield::dynamics::{DistanceConstraint, InputSet, State, SystemModel, Vec3};
use cbf_shield::flow_cbf::{eval_h, FlowBarrierConfig};
use cbf_shield::poly_cbf::{eval_h_prime, PolyBarrier};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = SystemModel::double_integrator();
    let sphere = DistanceConstraint::new(Vec3::zeros(), 1.0);
    let inputs = InputSet::ball(1.0);
    let poly = PolyBarrier::new(2, 1.0)?;
    let cfg = FlowBarrierConfig::default();

    println!("{:>6} {:>6} {:>10} {:>10} {:>8} {:>10} {:>8}", "dist", "speed", "h", "H'", "t'", "H", "t");
    for dist in [4.0, 3.0, 2.0, 1.5] {
        for speed in [0.0, 0.5, 1.0, 1.5] {
            let x = State::new(Vec3::new(dist, 0.0, 0.0), Vec3::new(-speed, 0.1, 0.0));
            let hp = eval_h_prime(&poly, &model, &sphere, &x)?;
            let hf = eval_h(&model, &sphere, &x, &inputs, &cfg)?;
            println!(
                "{dist:6.2} {speed:6.2} {:10.4} {:10.4} {:8.4} {:10.4} {:8.4}",
                sphere.value(&x),
                hp.value,
                hp.maximizer_times[0],
                hf.value,
                hf.maximizer_times[0],
            );
        }
    }
    Ok(())
}
