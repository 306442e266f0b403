//! Fly the default sphere scenario under each barrier and print the safety
//! summary of every run.

use cbf_shield::scenarios::{run_scenario, safety_report, BarrierKind, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for kind in [BarrierKind::Flow, BarrierKind::Poly, BarrierKind::Ho] {
        let cfg = ScenarioConfig {
            barrier: kind,
            ..ScenarioConfig::sphere_default()
        };
        let started = std::time::Instant::now();
        let log = run_scenario(&cfg)?;
        let report = safety_report(&log)?;
        println!(
            "{:>7}: steps {:4}  max h {:+.3e}  max H {:+.3e}  max |u|inf {:.4}  infeasible {}  halted {}  min dist {:.4}  ({:.2?})",
            kind.as_str(),
            report.steps,
            report.max_h_continuous,
            report.max_barrier,
            report.max_input_norm,
            report.infeasible_steps,
            report.halted,
            report.min_distance,
            started.elapsed(),
        );
        if let Some(first) = log.records.iter().find(|r| r.status.as_str() == "infeasible") {
            println!("         first infeasible step at t = {:.1}", first.t);
        }
    }
    Ok(())
}
