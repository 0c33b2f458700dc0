//! `vrof` subcommands.
//!
//! Every subcommand reads one JSON config, writes its outputs under `--out`
//! and maps the result to an exit code: 0 on success, 2 when a checked
//! estimate fails above slack, 1 on configuration or solver errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use vrof_core::anisotropy::{reshetnyak_probe, strict_midpoint_audit, Anisotropy};
use vrof_core::bvsignal::{derivative, GridSignal, MeasureWindow};
use vrof_core::config::{generate_datum, ExperimentConfig, Method, TheoremChoice};
use vrof_core::flow::{flow_monotonicity_report, minimizing_movements, FlowConfig, FlowSolver, FlowTrajectory};
use vrof_core::io::{fmt_f64, write_atoms_json, write_json, write_signal_csv, Table};
use vrof_core::regularizer::{df_injectivity_probe, Regularizer};
use vrof_core::rng::SeedStream;
use vrof_core::solver::{continuation_solve, energy, solve_exact_discrete, taut_string_oracle};
use vrof_core::verify::{report_table, run_battery, BatterySpec, SlackPolicy, Theorem};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_THEOREM: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{op}: {source}")]
    Core {
        op: &'static str,
        #[source]
        source: vrof_core::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

trait Op<T> {
    fn op(self, op: &'static str) -> Result<T>;
}

impl<T> Op<T> for vrof_core::Result<T> {
    fn op(self, op: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Core { op, source })
    }
}

#[derive(Debug, Parser)]
#[command(name = "vrof", version, about = "Vector-valued anisotropic ROF denoising in 1D")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "K")]
    pub jobs: Option<usize>,
    /// Replace `grid_cells`.
    #[arg(long = "grid-override", global = true, value_name = "N")]
    pub grid_override: Option<usize>,
    /// Replace the config seed.
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Solve one instance.
    Solve,
    /// Minimizing movements from the datum.
    Flow,
    /// Seeded battery with refinement study.
    Verify,
    /// Solve over the `sweep.lambdas x sweep.seeds` grid.
    Sweep,
    /// Hypothesis probes for the configured regularizer.
    Probe,
}

/// Whether the checked estimates held.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    TheoremFailure,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    match execute(cli.command, &cli.common) {
        Ok(Verdict::Pass) => EXIT_OK,
        Ok(Verdict::TheoremFailure) => {
            log::warn!("an estimate failed above slack; see report.csv");
            EXIT_THEOREM
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn execute(command: Command, common: &Common) -> Result<Verdict> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path).op("config::load")?;
    if let Some(n) = common.grid_override {
        cfg.grid_cells = n;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate().op("config::validate")?;
    let out = &common.out;
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    let resolved = cfg.resolved();
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&resolved).unwrap_or_default()
    );
    write_json(&out.join("resolved_config.json"), &resolved).op("io::write_json")?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Solve => solve(&cfg, out),
        Command::Flow => flow(&cfg, out),
        Command::Verify => verify(&cfg, out),
        Command::Sweep => sweep(&cfg, out),
        Command::Probe => probe(&cfg, out),
    })
}

fn datum(cfg: &ExperimentConfig, cells: usize, seed: u64) -> Result<GridSignal> {
    let grid = vrof_core::Grid::new(cfg.interval.a, cfg.interval.b, cells).op("config::grid")?;
    // instance 0 of the battery with the same seed
    generate_datum(&cfg.datum, &grid, cfg.channels, SeedStream::new(seed).child(0)).op("config::generate_datum")
}

fn write_datum(out: &Path, h: &GridSignal) -> Result<()> {
    write_signal_csv(&out.join("datum.csv"), h).op("io::write_signal_csv")?;
    write_atoms_json(&out.join("atoms.json"), h).op("io::write_atoms_json")
}

fn regularizer(cfg: &ExperimentConfig) -> Result<Regularizer> {
    Regularizer::from_spec(&cfg.regularizer_spec()).op("regularizer::from_spec")
}

#[derive(Serialize)]
struct SolveDiagnostics {
    method: Method,
    energy: f64,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    continuation: Option<vrof_core::solver::SolveDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_check_l2: Option<f64>,
}

struct Solved {
    u: GridSignal,
    cross_check: Option<GridSignal>,
    diag: SolveDiagnostics,
}

fn solve_instance(cfg: &ExperimentConfig, h: &GridSignal, lambda: f64) -> Result<Solved> {
    let reg = regularizer(cfg)?;
    let mut sc = cfg.solve_config();
    sc.lambda = lambda;
    let method = cfg.method();
    let (u, mut diag) = match method {
        Method::Pd | Method::Auto => {
            let s = solve_exact_discrete(h, &reg, lambda, &sc.pd).op("solver::solve_exact_discrete")?;
            let d = SolveDiagnostics {
                method: Method::Pd,
                energy: s.energy,
                converged: s.converged,
                gap: Some(s.gap),
                iterations: Some(s.iterations),
                continuation: None,
                cross_check_l2: None,
            };
            (s.u, d)
        }
        Method::Continuation => {
            let s = continuation_solve(h, &sc).op("solver::continuation_solve")?;
            let d = SolveDiagnostics {
                method,
                energy: energy(&s.u, h, &reg, lambda).op("solver::energy")?,
                converged: s.diagnostics.converged,
                gap: None,
                iterations: None,
                continuation: Some(s.diagnostics),
                cross_check_l2: None,
            };
            (s.u, d)
        }
        Method::TautString => {
            if h.channels() != 1 || !reg.is_homogeneous() {
                return Err(CliError::Core {
                    op: "solver::taut_string_oracle",
                    source: vrof_core::Error::Unsupported("the taut string needs scalar data and f = identity".into()),
                });
            }
            let u = taut_string_oracle(h, lambda).op("solver::taut_string_oracle")?;
            let d = SolveDiagnostics {
                method,
                energy: energy(&u, h, &reg, lambda).op("solver::energy")?,
                converged: true,
                gap: None,
                iterations: None,
                continuation: None,
                cross_check_l2: None,
            };
            (u, d)
        }
    };
    let mut cross_check = None;
    if cfg.solver.cross_check.unwrap_or(false) && method != Method::Continuation {
        let c = continuation_solve(h, &sc).op("solver::continuation_solve")?;
        diag.cross_check_l2 = Some(c.u.l2_distance(&u).op("bvsignal::l2_distance")?);
        diag.continuation = Some(c.diagnostics);
        cross_check = Some(c.u);
    }
    Ok(Solved { u, cross_check, diag })
}

fn write_solved(dir: &Path, s: &Solved) -> Result<()> {
    write_signal_csv(&dir.join("solution.csv"), &s.u).op("io::write_signal_csv")?;
    if let Some(c) = &s.cross_check {
        write_signal_csv(&dir.join("solution_continuation.csv"), c).op("io::write_signal_csv")?;
    }
    write_json(&dir.join("diagnostics.json"), &s.diag).op("io::write_json")
}

fn solve(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict> {
    let h = datum(cfg, cfg.grid_cells, cfg.seed)?;
    write_datum(out, &h)?;
    write_solved(out, &solve_instance(cfg, &h, cfg.lambda)?)?;
    Ok(Verdict::Pass)
}

fn flow_config(cfg: &ExperimentConfig) -> FlowConfig {
    let mut solver = cfg.solve_config();
    if cfg.solver.pd.is_none() {
        // window variations drift by about the step gap
        solver.pd.tol_gap = 1e-12;
    }
    let method = match cfg.method() {
        Method::Continuation => FlowSolver::Continuation,
        _ => FlowSolver::Pd,
    };
    FlowConfig {
        steps: cfg.flow.steps,
        tau: cfg.flow.tau,
        solver,
        record_every: cfg.flow.record_every,
        method,
    }
}

fn run_flow(cfg: &ExperimentConfig, cells: usize) -> Result<(GridSignal, FlowTrajectory, Vec<MeasureWindow>)> {
    let h = datum(cfg, cells, cfg.seed)?;
    let windows = cfg.windows.build(h.grid()).op("config::windows")?;
    let traj = minimizing_movements(&h, &flow_config(cfg), &windows).op("flow::minimizing_movements")?;
    Ok((h, traj, windows))
}

fn flow(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict> {
    // slack calibrated on a grid four times coarser, as in the batteries
    let coarse = (cfg.grid_cells / 4).max(16);
    let slack = if coarse < cfg.grid_cells {
        let (_, t, w) = run_flow(cfg, coarse)?;
        let calib = flow_monotonicity_report(&t, &w, SlackPolicy::floor_only());
        SlackPolicy::calibrated(&calib.violations(), (cfg.interval.b - cfg.interval.a) / coarse as f64)
    } else {
        SlackPolicy::floor_only()
    };
    let (h, traj, windows) = run_flow(cfg, cfg.grid_cells)?;
    write_datum(out, &h)?;
    let mut t = Table::new(["t", "window_id", "var", "singular_mass"]);
    for r in &traj.records {
        for (k, (v, s)) in r.variation.iter().zip(&r.singular_mass).enumerate() {
            t.push(vec![fmt_f64(r.t), k.to_string(), fmt_f64(*v), fmt_f64(*s)]);
        }
    }
    t.write(&out.join("trajectory.csv")).op("io::write_csv")?;
    let mut d = Table::new(["step", "lhs", "rhs", "tolerance", "holds"]);
    for r in &traj.dissipation {
        d.push(vec![
            r.step.to_string(),
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            fmt_f64(r.tolerance),
            r.holds.to_string(),
        ]);
    }
    d.write(&out.join("dissipation.csv")).op("io::write_csv")?;
    let report = flow_monotonicity_report(&traj, &windows, slack);
    let mut rt = report_table();
    report.append_to(&mut rt, "");
    rt.write(&out.join("report.csv")).op("io::write_csv")?;
    if let Some(last) = traj.records.last() {
        write_signal_csv(&out.join("solution.csv"), &last.v).op("io::write_signal_csv")?;
    }
    let diag = json!({
        "homogeneous": traj.homogeneous,
        "banner": report.banner,
        "slack": slack,
        "monotone_pass": report.pass,
        "dissipation_pass": traj.dissipation_holds(),
        "mean_drift": traj.mean_drift,
        "records": traj.records.len(),
        "aborted": traj.aborted,
        "energies": traj.records.iter().map(|r| r.energy).collect::<Vec<_>>(),
    });
    write_json(&out.join("diagnostics.json"), &diag).op("io::write_json")?;
    if let Some(a) = &traj.aborted {
        return Err(CliError::Core {
            op: "flow::minimizing_movements",
            source: vrof_core::Error::Solver {
                stage: "flow".into(),
                message: a.clone(),
            },
        });
    }
    Ok(if report.pass && traj.dissipation_holds() {
        Verdict::Pass
    } else {
        Verdict::TheoremFailure
    })
}

fn battery_spec(cfg: &ExperimentConfig) -> Result<BatterySpec> {
    let reg = regularizer(cfg)?;
    let theorem = match cfg.verify.theorem {
        TheoremChoice::Auto => Theorem::for_regularizer(&reg),
        TheoremChoice::Homogeneous => Theorem::Homogeneous,
        TheoremChoice::SingularConstant => Theorem::SingularConstant,
        TheoremChoice::SingularRegular => Theorem::SingularRegular,
    };
    let grids = if cfg.verify.refinement.is_empty() {
        vec![cfg.grid_cells]
    } else {
        cfg.verify.refinement.clone()
    };
    Ok(BatterySpec {
        name: theorem.tag().into(),
        theorem,
        interval: cfg.interval,
        channels: cfg.channels,
        lambda: cfg.lambda,
        regularizer: cfg.regularizer_spec(),
        datum: cfg.datum.clone(),
        instances: cfg.verify.instances,
        seed: cfg.seed,
        grids,
        windows: cfg.windows.clone(),
        pd: cfg.solve_config().pd,
        thetas: cfg.verify.thetas.clone(),
        certificate: true,
        c_cert: 4.0,
    })
}

fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict> {
    let spec = battery_spec(cfg)?;
    let res = run_battery(&spec).op("verify::run_battery")?;
    let write = |name: &str, s: String| {
        fs::write(out.join(name), s).map_err(|source| CliError::Io {
            path: out.join(name),
            source,
        })
    };
    write("report.csv", res.report_csv())?;
    write("refinement.csv", res.refinement.to_csv())?;
    let instances: Vec<_> = res
        .instances
        .iter()
        .map(|o| {
            json!({
                "cells": o.cells,
                "index": o.index,
                "seed": o.seed,
                "gap": o.gap,
                "solver_converged": o.solver_converged,
                "pass": o.report.pass,
                "failures": o.report.failures(),
                "worst_violation": o.report.worst_violation(),
                "certificate": o.certificate,
            })
        })
        .collect();
    let diag = json!({
        "theorem": res.theorem,
        "slack": res.slack,
        "reports_pass": res.reports_pass,
        "certificates_pass": res.certificates_pass,
        "refinement": res.refinement,
        "instances": instances,
    });
    write_json(&out.join("diagnostics.json"), &diag).op("io::write_json")?;
    let unconverged = res.instances.iter().filter(|o| !o.solver_converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} battery solves did not reach the gap tolerance");
    }
    let pass = res.reports_pass && res.refinement.pass && res.certificates_pass;
    Ok(if pass { Verdict::Pass } else { Verdict::TheoremFailure })
}

fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict> {
    let jobs: Vec<(f64, u64)> = cfg
        .sweep
        .lambdas
        .iter()
        .flat_map(|&l| cfg.sweep.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let rows: Vec<Vec<String>> = jobs
        .par_iter()
        .map(|&(lambda, seed)| -> Result<Vec<String>> {
            let dir = out.join(format!("lambda_{}_seed_{seed}", fmt_f64(lambda)));
            fs::create_dir_all(&dir).map_err(|source| CliError::Io {
                path: dir.clone(),
                source,
            })?;
            let h = datum(cfg, cfg.grid_cells, seed)?;
            write_datum(&dir, &h)?;
            let s = solve_instance(cfg, &h, lambda)?;
            write_solved(&dir, &s)?;
            let full = MeasureWindow::full(h.grid());
            let tv = |w: &GridSignal| vrof_core::bvsignal::interval_variation(&derivative(w), &full);
            Ok(vec![
                fmt_f64(lambda),
                seed.to_string(),
                fmt_f64(s.diag.energy),
                s.diag.converged.to_string(),
                fmt_f64(tv(&h)),
                fmt_f64(tv(&s.u)),
            ])
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(["lambda", "seed", "energy", "converged", "datum_variation", "variation"]);
    for r in rows {
        t.push(r);
    }
    t.write(&out.join("summary.csv")).op("io::write_csv")?;
    Ok(Verdict::Pass)
}

fn probe(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict> {
    let reg = regularizer(cfg)?;
    let phi: &Anisotropy = reg.anisotropy();
    let f = reg.profile();
    let seed = SeedStream::new(cfg.seed);
    let reshetnyak = reshetnyak_probe(phi, 20_000, seed.named("reshetnyak").seed());
    let midpoint = strict_midpoint_audit(phi, |t| t * t, 2000, seed.named("midpoint").seed());
    let injectivity = df_injectivity_probe(&reg, 2000, seed.named("injectivity").seed())
        .map_err(|e| e.to_string());
    let constants = phi.equivalence_constants();
    let report = json!({
        "anisotropy": phi.spec(),
        "profile": cfg.profile,
        "homogeneous": reg.is_homogeneous(),
        "phi_c1": phi.is_c1(),
        "dual_projection": phi.has_dual_projection(),
        "equivalence_constants": constants,
        "singular_factor": constants.singular_factor(),
        "reshetnyak": reshetnyak,
        "midpoint": midpoint,
        "profile_flags": f.regular_flags(),
        "f_prime_0": f.deriv(0.0),
        "f_inf": f.f_inf(),
        "df_injectivity": match injectivity {
            Ok(r) => json!(r),
            Err(e) => json!({ "error": e }),
        },
        "regular_case": reg.regular_case().err(),
        "theorem": Theorem::for_regularizer(&reg),
    });
    write_json(&out.join("probe.json"), &report).op("io::write_json")?;
    Ok(Verdict::Pass)
}
