//! Estimate the dissipation rate a_max for several input sets and gravity
//! strengths.

use cbf_shield::dynamics::{DistanceConstraint, Gravity, InputSet, SystemModel, Vec3};
use cbf_shield::poly_cbf::{compute_a_max, shell_samples, DEFAULT_A_MAX_MARGIN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let radius = 2.0;
    let constraint = DistanceConstraint::new(Vec3::zeros(), radius);
    for mu in [0.0, 0.1, 0.3] {
        let model = if mu == 0.0 {
            SystemModel::double_integrator()
        } else {
            SystemModel::with_gravity(Gravity::PointMass { mu, center: Vec3::zeros() })
        };
        for inputs in [InputSet::ball(0.1), InputSet::ball(1.0), InputSet::unit_box(1.0).inscribed_ball()] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let samples = shell_samples(Vec3::zeros(), radius, 5.0 * radius, 5.0 * inputs.u_max, 5000, &mut rng);
            match compute_a_max(&model, &constraint, &inputs, &samples, DEFAULT_A_MAX_MARGIN) {
                Ok(a) => println!(
                    "mu {mu:.1}  u_max {:.2}  gravity at surface {:.3}  a_max {a:.4}",
                    inputs.u_max,
                    mu / (radius * radius)
                ),
                Err(e) => println!("mu {mu:.1}  u_max {:.2}  {e}", inputs.u_max),
            }
        }
    }
    Ok(())
}
