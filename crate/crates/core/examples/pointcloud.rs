//! Fly past a synthetic peanut-shaped point cloud and report how many
//! constraints the pruning step keeps per control step.
//!
//! Usage: `cargo run --release --example pointcloud [N] [seed] [points.txt]`

use cbf_shield::scenarios::{load_point_cloud, run_scenario, safety_report, Obstacle, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n = args.first().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let seed = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut cfg = ScenarioConfig::pointcloud_default(n, seed);
    if let Some(path) = args.get(2) {
        let points = load_point_cloud(std::path::Path::new(path))?;
        cfg.obstacle = Obstacle::PointCloud { points, rho_s: 1.0 };
    }

    let started = std::time::Instant::now();
    let log = run_scenario(&cfg)?;
    let report = safety_report(&log)?;
    let kept: Vec<usize> = log.records.iter().map(|r| r.evaluated.len()).collect();
    let mean = kept.iter().sum::<usize>() as f64 / kept.len() as f64;
    println!(
        "{n} points, a_max {:.4}: max h {:+.3e}, min distance {:.4}, infeasible {}, {:.2?}",
        report.a_max.unwrap_or(f64::NAN),
        report.max_h_continuous,
        report.min_distance,
        report.infeasible_steps,
        started.elapsed()
    );
    println!(
        "constraints kept per step: mean {mean:.1}, max {}",
        kept.iter().max().copied().unwrap_or(0)
    );
    for r in log.records.iter().step_by(100) {
        println!("t {:5.1}  kept {:4}  h {:+.4}  |u| {:.4}", r.t, r.evaluated.len(), r.h_max, r.u.amax());
    }
    Ok(())
}
