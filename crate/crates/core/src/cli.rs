//! Command-line front end: `run`, `check` and `sweep`.
//!
//! Configuration is flat `key = value` text with dotted section names and
//! `#` comments. Every key has a default taken from the scenario preset, so
//! a config file only lists what it changes. The effective configuration is
//! written next to the outputs and reproduces the run when fed back in.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dynamics::{Gravity, InputSet, InputShape, State, Vec3};
use crate::error::{Error, Result};
use crate::flow_cbf::eval_h;
use crate::poly_cbf::{eval_h_prime, PolyBarrier};
use crate::safety_filter::h_o_eval;
use crate::scenarios::{
    load_point_cloud, peanut_cloud, run_scenario, safety_report, BarrierKind, InfeasibleAction, Obstacle,
    SafetyReport, ScenarioConfig, TrajectoryLog, PEANUT_LOBE_RADIUS, PEANUT_SEPARATION,
};

/// Exit code for a run that finished every step safely.
pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
/// The run stopped at an infeasible QP.
pub const EXIT_INFEASIBLE: i32 = 2;
/// `check`: the initial state lies outside the barrier's safe set.
pub const EXIT_OUTSIDE: i32 = 3;
/// The run completed but `h` exceeded the tolerance or an input left `U`.
pub const EXIT_UNSAFE: i32 = 4;

/// Safety tolerance on `h` used for exit codes.
pub const SAFETY_TOL: f64 = 1e-6;

/// Environment variable that overrides `--out`.
pub const OUT_ENV: &str = "CBF_SHIELD_OUT";

pub const CSV_HEADER: &str = "t,rx,ry,rz,vx,vy,vz,ux,uy,uz,h_max,H_max,qp_status,n_active_rows";

#[derive(Debug, Parser)]
#[command(name = "cbf-shield", version, about = "Input-constrained barrier-function safety filter for a spacecraft")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write trajectory.csv, summary.json and manifest.json.
    Run(CommonArgs),
    /// Validate the config and report the barrier value at the initial state.
    Check(CommonArgs),
    /// Run the scenario once per parameter value and tabulate the safety reports.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Built-in scenario: sphere or pointcloud.
    #[arg(long)]
    pub scenario: Option<String>,
    /// h_flow, hprime or ho.
    #[arg(long)]
    pub barrier: Option<String>,
    /// Override any config key, e.g. `--set inputs.u_max=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// u_max, alpha_scale, dt_ctrl or a_lb.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Setting {
    value: String,
    source: String,
    line: usize,
}

/// Fully populated flat configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    entries: BTreeMap<String, Setting>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_vec(v: &Vec3) -> String {
    format!("{}, {}, {}", fmt_f(v.x), fmt_f(v.y), fmt_f(v.z))
}

/// Parse `key = value` lines into `(key, value, line)`.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: source.into(),
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: source.into(),
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((key.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

impl Settings {
    /// Every key with its preset value for `scenario` (`sphere` or `pointcloud`).
    pub fn defaults(scenario: &str) -> Result<Self> {
        let (cfg, cloud) = match scenario {
            "sphere" => (ScenarioConfig::sphere_default(), false),
            "pointcloud" => (ScenarioConfig::pointcloud_default(2000, 0), true),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scenario '{other}' (expected sphere or pointcloud)"
                )))
            }
        };
        let mut m: Vec<(&str, String)> = vec![
            ("scenario", scenario.to_string()),
            ("barrier", cfg.barrier.as_str().to_string()),
            ("seed", cfg.a_max.seed.to_string()),
        ];
        match &cfg.obstacle {
            Obstacle::Sphere { center, rho_t, rho_s } => {
                m.push(("obstacle.center", fmt_vec(center)));
                m.push(("obstacle.rho_t", fmt_f(*rho_t)));
                m.push(("obstacle.rho_s", fmt_f(*rho_s)));
            }
            Obstacle::PointCloud { points, rho_s } => {
                m.push(("obstacle.rho_s", fmt_f(*rho_s)));
                m.push(("obstacle.points_file", String::new()));
                m.push(("obstacle.n_points", points.len().to_string()));
                m.push(("obstacle.lobe_radius", fmt_f(PEANUT_LOBE_RADIUS)));
                m.push(("obstacle.separation", fmt_f(PEANUT_SEPARATION)));
            }
        }
        let (mu, gc) = match cfg.gravity {
            Gravity::None => (0.0, Vec3::zeros()),
            Gravity::PointMass { mu, center } => (mu, center),
        };
        m.push(("gravity.mu", fmt_f(mu)));
        m.push(("gravity.center", fmt_vec(&gc)));
        m.push((
            "path.waypoints",
            cfg.path.waypoints.iter().map(fmt_vec).collect::<Vec<_>>().join("; "),
        ));
        m.push(("path.t_start", fmt_f(cfg.path.t_start)));
        m.push(("path.t_end", fmt_f(cfg.path.t_end)));
        m.push(("x0.r", fmt_vec(&cfg.x0.r)));
        m.push(("x0.v", fmt_vec(&cfg.x0.v)));
        m.push((
            "inputs.shape",
            match cfg.inputs.shape {
                InputShape::Box => "box",
                InputShape::Ball => "ball",
            }
            .to_string(),
        ));
        m.push(("inputs.u_max", fmt_f(cfg.inputs.u_max)));
        m.push(("alpha_scale", fmt_f(cfg.alpha_scale)));
        m.push(("clf.k1", fmt_f(cfg.gains.k1)));
        m.push(("clf.k2", fmt_f(cfg.gains.k2)));
        m.push(("clf.k3", fmt_f(cfg.gains.k3)));
        m.push(("clf.slack_weight", fmt_f(cfg.gains.slack_weight)));
        m.push(("sim.duration", fmt_f(cfg.sim.duration)));
        m.push(("sim.dt_ctrl", fmt_f(cfg.sim.dt_ctrl)));
        m.push(("sim.substeps", cfg.sim.substeps.to_string()));
        m.push(("pruning.enabled", cfg.pruning.enabled.to_string()));
        m.push(("pruning.horizon", fmt_f(cfg.pruning.horizon)));
        m.push(("pruning.margin", fmt_f(cfg.pruning.margin)));
        m.push(("flow.horizon", cfg.flow.horizon.map_or("auto".into(), fmt_f)));
        m.push(("flow.dt", fmt_f(cfg.flow.dt)));
        m.push(("flow.peak_window", cfg.flow.peak_window.to_string()));
        m.push(("flow.multi_max_tol", fmt_f(cfg.flow.multi_max_tol)));
        m.push(("flow.a_lb", fmt_f(cfg.flow.a_lb)));
        m.push(("a_max.value", cfg.a_max.value.map_or("auto".into(), fmt_f)));
        m.push(("a_max.samples", cfg.a_max.samples.to_string()));
        m.push(("a_max.margin", fmt_f(cfg.a_max.margin)));
        m.push(("filter.buffer", fmt_f(cfg.buffer)));
        m.push(("filter.sample_guard", cfg.sample_guard.to_string()));
        m.push((
            "on_infeasible",
            match cfg.on_infeasible {
                InfeasibleAction::Halt => "halt".into(),
                InfeasibleAction::Nominal => "nominal".into(),
                InfeasibleAction::Expand { factor } => format!("expand:{}", fmt_f(factor)),
            },
        ));
        debug_assert!(!cloud || m.iter().any(|(k, _)| *k == "obstacle.n_points"));
        let entries = m
            .into_iter()
            .map(|(k, v)| {
                (
                    k.to_string(),
                    Setting {
                        value: v,
                        source: "<default>".into(),
                        line: 0,
                    },
                )
            })
            .collect();
        Ok(Self { entries })
    }

    /// Replace a known key.
    pub fn set(&mut self, key: &str, value: &str, source: &str, line: usize) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(s) => {
                *s = Setting {
                    value: value.to_string(),
                    source: source.to_string(),
                    line,
                };
                Ok(())
            }
            None => Err(Error::Parse {
                path: source.to_string(),
                line,
                message: format!("unknown key '{key}' for scenario '{}'", self.get("scenario")),
            }),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.entries.get(key).map_or("", |s| s.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Effective configuration as config-file text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {}", v.value);
        }
        s
    }

    fn err(&self, key: &str, message: String) -> Error {
        let s = &self.entries[key];
        Error::Parse {
            path: s.source.clone(),
            line: s.line,
            message: format!("key '{key}': {message}"),
        }
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(key, format!("expected a finite number, got '{v}'")))
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.get(key) == "auto" {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key);
        v.parse::<usize>()
            .map_err(|_| self.err(key, format!("expected a nonnegative integer, got '{v}'")))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key);
        v.parse::<u64>()
            .map_err(|_| self.err(key, format!("expected a 64-bit unsigned integer, got '{v}'")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(key, format!("expected true or false, got '{v}'"))),
        }
    }

    fn parse_vec(&self, key: &str, text: &str) -> Result<Vec3> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let nums: Option<Vec<f64>> = parts
            .iter()
            .map(|p| p.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        match nums {
            Some(n) if n.len() == 3 => Ok(Vec3::new(n[0], n[1], n[2])),
            _ => Err(self.err(key, format!("expected 'x, y, z', got '{text}'"))),
        }
    }

    fn vec3(&self, key: &str) -> Result<Vec3> {
        self.parse_vec(key, self.get(key))
    }

    /// Build the scenario. Relative point-cloud paths resolve against `base`.
    pub fn build(&self, base: Option<&Path>) -> Result<ScenarioConfig> {
        let scenario = self.get("scenario");
        let seed = self.u64("seed")?;
        let mut cfg = match scenario {
            "sphere" => ScenarioConfig::sphere_default(),
            "pointcloud" => ScenarioConfig::pointcloud_default(1, seed),
            other => return Err(self.err("scenario", format!("unknown scenario '{other}'"))),
        };
        cfg.a_max.seed = seed;
        cfg.barrier = self.get("barrier").parse().map_err(|e: Error| self.err("barrier", e.to_string()))?;
        cfg.obstacle = match scenario {
            "sphere" => Obstacle::Sphere {
                center: self.vec3("obstacle.center")?,
                rho_t: self.f64("obstacle.rho_t")?,
                rho_s: self.f64("obstacle.rho_s")?,
            },
            _ => {
                let file = self.get("obstacle.points_file");
                let points = if file.is_empty() {
                    let n = self.usize("obstacle.n_points")?;
                    let lobe = self.f64("obstacle.lobe_radius")?;
                    let sep = self.f64("obstacle.separation")?;
                    if n == 0 || !(lobe > 0.0) || !(sep >= 0.0 && sep < 2.0 * lobe) {
                        return Err(self.err(
                            "obstacle.n_points",
                            format!("synthetic cloud needs n > 0, lobe_radius > 0, 0 <= separation < 2 lobe_radius (n = {n}, lobe = {lobe}, separation = {sep})"),
                        ));
                    }
                    peanut_cloud(n, lobe, sep, seed)
                } else {
                    let p = Path::new(file);
                    let resolved = match base {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p.to_path_buf(),
                    };
                    load_point_cloud(&resolved)?
                };
                Obstacle::PointCloud {
                    points,
                    rho_s: self.f64("obstacle.rho_s")?,
                }
            }
        };
        let mu = self.f64("gravity.mu")?;
        cfg.gravity = if mu == 0.0 {
            Gravity::None
        } else if mu > 0.0 {
            Gravity::PointMass {
                mu,
                center: self.vec3("gravity.center")?,
            }
        } else {
            return Err(self.err("gravity.mu", format!("must be >= 0, got {mu}")));
        };
        cfg.path.waypoints = self
            .get("path.waypoints")
            .split(';')
            .map(|w| self.parse_vec("path.waypoints", w))
            .collect::<Result<_>>()?;
        cfg.path.t_start = self.f64("path.t_start")?;
        cfg.path.t_end = self.f64("path.t_end")?;
        cfg.x0 = State::new(self.vec3("x0.r")?, self.vec3("x0.v")?);
        let shape = match self.get("inputs.shape") {
            "box" => InputShape::Box,
            "ball" => InputShape::Ball,
            v => return Err(self.err("inputs.shape", format!("expected box or ball, got '{v}'"))),
        };
        cfg.inputs = InputSet::new(shape, self.f64("inputs.u_max")?).map_err(|e| self.err("inputs.u_max", e.to_string()))?;
        cfg.alpha_scale = self.f64("alpha_scale")?;
        cfg.gains.k1 = self.f64("clf.k1")?;
        cfg.gains.k2 = self.f64("clf.k2")?;
        cfg.gains.k3 = self.f64("clf.k3")?;
        cfg.gains.slack_weight = self.f64("clf.slack_weight")?;
        cfg.sim.duration = self.f64("sim.duration")?;
        cfg.sim.dt_ctrl = self.f64("sim.dt_ctrl")?;
        cfg.sim.substeps = self.usize("sim.substeps")?;
        cfg.pruning.enabled = self.bool("pruning.enabled")?;
        cfg.pruning.horizon = self.f64("pruning.horizon")?;
        cfg.pruning.margin = self.f64("pruning.margin")?;
        cfg.flow.horizon = self.opt_f64("flow.horizon")?;
        cfg.flow.dt = self.f64("flow.dt")?;
        cfg.flow.peak_window = self.usize("flow.peak_window")?;
        cfg.flow.multi_max_tol = self.f64("flow.multi_max_tol")?;
        cfg.flow.a_lb = self.f64("flow.a_lb")?;
        cfg.a_max.value = self.opt_f64("a_max.value")?;
        cfg.a_max.samples = self.usize("a_max.samples")?;
        cfg.a_max.margin = self.f64("a_max.margin")?;
        cfg.buffer = self.f64("filter.buffer")?;
        cfg.sample_guard = self.bool("filter.sample_guard")?;
        cfg.on_infeasible = match self.get("on_infeasible") {
            "halt" => InfeasibleAction::Halt,
            "nominal" => InfeasibleAction::Nominal,
            v => match v.strip_prefix("expand:").and_then(|f| f.trim().parse::<f64>().ok()) {
                Some(factor) => InfeasibleAction::Expand { factor },
                None => {
                    return Err(self.err(
                        "on_infeasible",
                        format!("expected halt, nominal or expand:<factor>, got '{v}'"),
                    ))
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Config file, flags and `--set` overrides merged over the scenario preset.
pub fn resolve_settings(args: &CommonArgs) -> Result<Settings> {
    let (file_entries, source) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            let src = path.display().to_string();
            (parse_config_text(&text, &src)?, src)
        }
        None => (Vec::new(), String::new()),
    };
    let scenario = args
        .scenario
        .clone()
        .or_else(|| file_entries.iter().rev().find(|(k, _, _)| k == "scenario").map(|(_, v, _)| v.clone()))
        .unwrap_or_else(|| "sphere".into());
    let mut settings = Settings::defaults(&scenario)?;
    for (k, v, line) in &file_entries {
        if k == "scenario" {
            continue;
        }
        settings.set(k, v, &source, *line)?;
    }
    if let Some(b) = &args.barrier {
        settings.set("barrier", b, "--barrier", 0)?;
    }
    if let Some(seed) = args.seed {
        settings.set("seed", &seed.to_string(), "--seed", 0)?;
    }
    for (i, o) in args.overrides.iter().enumerate() {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Parse {
                path: "--set".into(),
                line: i + 1,
                message: format!("expected KEY=VALUE, got '{o}'"),
            });
        };
        settings.set(k.trim(), v.trim(), "--set", i + 1)?;
    }
    Ok(settings)
}

fn config_dir(args: &CommonArgs) -> Option<PathBuf> {
    args.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf))
}

pub fn out_dir(args: &CommonArgs) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .or_else(|| args.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub seed: u64,
    pub scenario: String,
    pub barrier: String,
    /// Effective configuration in config-file syntax.
    pub config: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
    pub exit_code: i32,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub barrier: String,
    pub safe: bool,
    pub report: SafetyReport,
    pub warnings: Vec<String>,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Trajectory CSV, floats with 17 significant digits.
pub fn trajectory_csv(log: &TrajectoryLog) -> String {
    let mut s = String::with_capacity(256 * (log.records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in &log.records {
        let nums = [
            r.t, r.x.r.x, r.x.r.y, r.x.r.z, r.x.v.x, r.x.v.y, r.x.v.z, r.u.x, r.u.y, r.u.z, r.h_max, r.barrier_max,
        ];
        for v in nums {
            let _ = write!(s, "{v:.16e},");
        }
        let _ = writeln!(s, "{},{}", r.status.as_str(), r.active_rows.len());
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

/// Exit code for a finished log.
pub fn classify(report: &SafetyReport) -> i32 {
    if report.halted {
        EXIT_INFEASIBLE
    } else if report.is_safe(SAFETY_TOL) {
        EXIT_OK
    } else {
        EXIT_UNSAFE
    }
}

pub fn cmd_run(args: &CommonArgs) -> Result<i32> {
    let started = now_unix();
    let settings = resolve_settings(args)?;
    let cfg = settings.build(config_dir(args).as_deref())?;
    let log = run_scenario(&cfg)?;
    let report = safety_report(&log)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    let code = classify(&report);

    let out = out_dir(args);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let names = ["trajectory.csv", "summary.json", "config.txt", "manifest.json"];
    write_file(&out.join(names[0]), &trajectory_csv(&log))?;
    let summary = RunSummary {
        scenario: settings.get("scenario").into(),
        barrier: settings.get("barrier").into(),
        safe: code == EXIT_OK,
        report: report.clone(),
        warnings: log.warnings.clone(),
    };
    write_file(&out.join(names[1]), &to_json(&summary)?)?;
    write_file(&out.join(names[2]), &settings.render())?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.a_max.seed,
        scenario: settings.get("scenario").into(),
        barrier: settings.get("barrier").into(),
        config: settings.render(),
        started_unix: started,
        finished_unix: now_unix(),
        outputs: names.iter().map(|n| out.join(n).display().to_string()).collect(),
        exit_code: code,
    };
    write_file(&out.join(names[3]), &to_json(&manifest)?)?;

    println!(
        "{} / {}: {} steps, max h {:.3e}, max barrier {:.3e}, max |u| {:.4}, infeasible steps {}{}",
        summary.scenario,
        summary.barrier,
        report.steps,
        report.max_h_continuous,
        report.max_barrier,
        report.max_input_norm,
        report.infeasible_steps,
        if report.halted { " (halted)" } else { "" }
    );
    Ok(code)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))
}

/// Barrier value at the initial state and the index of the worst constraint.
pub fn initial_barrier(cfg: &ScenarioConfig) -> Result<(f64, f64)> {
    let model = cfg.model();
    let constraints = cfg.obstacle.constraints(cfg.buffer);
    let truth = cfg.obstacle.constraints(0.0);
    let h0 = truth.iter().map(|c| c.value(&cfg.x0)).fold(f64::NEG_INFINITY, f64::max);
    let mut worst = f64::NEG_INFINITY;
    let poly = match cfg.barrier {
        BarrierKind::Poly => Some(PolyBarrier::new(2, cfg.resolve_a_max()?)?),
        _ => None,
    };
    for c in &constraints {
        let ev = match cfg.barrier {
            BarrierKind::Poly => eval_h_prime(poly.as_ref().unwrap(), &model, c, &cfg.x0)?,
            BarrierKind::Flow => eval_h(&model, c, &cfg.x0, &cfg.inputs.inscribed_ball(), &cfg.flow)?,
            BarrierKind::Ho => h_o_eval(&model, c, &cfg.x0)?,
        };
        worst = worst.max(ev.value - cfg.buffer);
    }
    Ok((h0, worst))
}

pub fn cmd_check(args: &CommonArgs) -> Result<i32> {
    let settings = resolve_settings(args)?;
    let cfg = settings.build(config_dir(args).as_deref())?;
    if cfg.barrier == BarrierKind::Poly {
        println!("a_max = {:.6e}", cfg.resolve_a_max()?);
    }
    let (h0, b0) = initial_barrier(&cfg)?;
    let name = match cfg.barrier {
        BarrierKind::Poly => "H'",
        BarrierKind::Flow => "H",
        BarrierKind::Ho => "H_o",
    };
    println!("h(x0) = {h0:.6e}");
    println!("{name}(x0) = {b0:.6e}");
    if b0 <= 0.0 {
        println!("x0 is inside the safe set of {name}");
        Ok(EXIT_OK)
    } else {
        println!("x0 is outside the safe set of {name}: value {b0:.6e} > 0");
        Ok(EXIT_OUTSIDE)
    }
}

/// Config key driven by a sweep parameter.
pub fn sweep_key(param: &str) -> Result<&'static str> {
    match param {
        "u_max" => Ok("inputs.u_max"),
        "alpha_scale" => Ok("alpha_scale"),
        "dt_ctrl" => Ok("sim.dt_ctrl"),
        "a_lb" => Ok("flow.a_lb"),
        other => Err(Error::InvalidConfig(format!(
            "unknown sweep parameter '{other}' (expected u_max, alpha_scale, dt_ctrl or a_lb)"
        ))),
    }
}

pub const SWEEP_HEADER: &str = "param,value,status,exit_code,steps,max_h,max_h_continuous,max_barrier,max_input_norm,inputs_within_bounds,infeasible_steps,min_distance,halted,a_max,error";

/// One sweep row: the report, or the error that stopped the run.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: std::result::Result<SafetyReport, String>,
}

pub fn run_sweep(settings: &Settings, base: Option<&Path>, param: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    let key = sweep_key(param)?;
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|&value| {
                let mut s = settings.clone();
                scope.spawn(move || {
                    let outcome = s
                        .set(key, &fmt_f(value), "--values", 0)
                        .and_then(|_| s.build(base))
                        .and_then(|cfg| run_scenario(&cfg))
                        .and_then(|log| safety_report(&log))
                        .map_err(|e| e.to_string());
                    SweepRow { value, outcome }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    Ok(rows)
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    s.push_str(SWEEP_HEADER);
    s.push('\n');
    for row in rows {
        match &row.outcome {
            Ok(r) => {
                let code = classify(r);
                let _ = writeln!(
                    s,
                    "{param},{:.16e},{},{code},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e},{},{},",
                    row.value,
                    if code == EXIT_OK { "ok" } else if r.halted { "infeasible" } else { "unsafe" },
                    r.steps,
                    r.max_h,
                    r.max_h_continuous,
                    r.max_barrier,
                    r.max_input_norm,
                    r.inputs_within_bounds,
                    r.infeasible_steps,
                    r.min_distance,
                    r.halted,
                    r.a_max.map_or(String::new(), |a| format!("{a:.16e}")),
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{param},{:.16e},error,{EXIT_ERROR},,,,,,,,,,,\"{}\"", row.value, e.replace('"', "'"));
            }
        }
    }
    s
}

/// Writes `sweep_<param>.csv`; exit 0 once the table is written.
pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let settings = resolve_settings(&args.common)?;
    let base = config_dir(&args.common);
    let rows = run_sweep(&settings, base.as_deref(), &args.param, &args.values)?;
    let table = sweep_csv(&args.param, &rows);
    let out = out_dir(&args.common);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let path = out.join(format!("sweep_{}.csv", args.param));
    write_file(&path, &table)?;
    print!("{table}");
    Ok(EXIT_OK)
}

/// Parse arguments, dispatch, and map errors to exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Check(a) => cmd_check(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
