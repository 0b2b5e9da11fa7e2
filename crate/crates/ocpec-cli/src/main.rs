//! Command-line front end: load problem instances, run the simulate /
//! solve / check / cq / pipeline stages, and emit trajectories, multiplier
//! families, adjoint plot data, and machine-readable JSON reports.
//!
//! Every command writes `report.json` into `--out` (with a `status` block
//! naming the failed stage when a run stops early, partial artifacts
//! retained) and exits nonzero with a JSON error object on stderr on any
//! failure. Outputs are byte-identical across reruns with the same
//! configuration and seed.

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use ocpec::pipeline::{comp_residual, run_pipeline, PipelineConfig};
use ocpec::problem::{DiscreteTrajectory, OcpecProblem};
use ocpec::report::{
    adjoint_csv, multipliers_csv, trajectory_csv, CqSummary, ProblemSummary, Report, RunStatus,
    SimulationSummary, Versions,
};
use ocpec::transcribe::{solve_homotopy, FiniteMpec, HomotopySchedule};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ocpec",
    version,
    about = "Optimal control with complementarity constraints: simulate, solve, and certify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-simulate an affine instance by per-step complementarity pivoting
    Simulate(CommonArgs),
    /// Solve the transcribed problem by relaxation homotopy
    Solve(CommonArgs),
    /// Validate a trajectory CSV against the instance's constraint system
    Check(CheckArgs),
    /// Audit constraint qualifications node-by-node along a trajectory
    Cq(CqArgs),
    /// Full chain: simulate, solve, recover both multiplier families,
    /// grade stationarity, run the pointwise maximum check, audit CQs
    Pipeline(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Instance: `builtin:<name>` or a path to a JSON problem file
    #[arg(long)]
    problem: String,
    /// Grid points (state rows; must be at least 2)
    #[arg(long, default_value_t = 101)]
    nodes: usize,
    /// Initial complementarity relaxation
    #[arg(long)]
    tau0: Option<f64>,
    /// Final complementarity relaxation
    #[arg(long)]
    tau_min: Option<f64>,
    /// Activity tolerance for index-set classification
    #[arg(long)]
    tol_act: Option<f64>,
    /// Componentwise gap above which the multiplier families diverge
    #[arg(long)]
    tol_div: Option<f64>,
    /// Sampling radius override for the pointwise maximum check
    #[arg(long)]
    radius: Option<f64>,
    /// Samples per node for the pointwise maximum check
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Seed for every sampling stage
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trajectory CSV to validate (header `t,x1..xn,u1..um`)
    #[arg(long)]
    traj: PathBuf,
}

#[derive(Args)]
struct CqArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trajectory CSV to audit; solved from scratch when absent
    #[arg(long)]
    traj: Option<PathBuf>,
}

/// Machine-readable failure printed to stderr.
#[derive(Serialize)]
struct ErrorObject {
    error: ErrorBody,
}

#[derive(Serialize)]
struct ErrorBody {
    stage: String,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_residual: Option<f64>,
    seed: u64,
}

impl ErrorObject {
    fn new(stage: &str, message: impl ToString, seed: u64) -> ErrorObject {
        ErrorObject {
            error: ErrorBody {
                stage: stage.to_string(),
                message: message.to_string(),
                max_residual: None,
                seed,
            },
        }
    }

    fn with_residual(mut self, r: f64) -> ErrorObject {
        self.error.max_residual = Some(r);
        self
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Solve(a) => cmd_solve(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Cq(a) => cmd_cq(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&err).expect("error serialization")
            );
            ExitCode::FAILURE
        }
    }
}

fn load_problem(spec: &str, seed: u64) -> Result<OcpecProblem, ErrorObject> {
    let parsed = match spec.strip_prefix("builtin:") {
        Some(name) => OcpecProblem::builtin(name),
        None => OcpecProblem::load(Path::new(spec)),
    };
    parsed.map_err(|e| ErrorObject::new("load", e, seed))
}

fn write_file(dir: &Path, name: &str, content: &str, seed: u64) -> Result<(), ErrorObject> {
    std::fs::create_dir_all(dir)
        .map_err(|e| ErrorObject::new("write", format!("{}: {e}", dir.display()), seed))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| ErrorObject::new("write", format!("{}: {e}", path.display()), seed))
}

/// Report skeleton for the single-stage commands.
fn base_report(p: &OcpecProblem, a: &CommonArgs) -> Report {
    Report {
        status: RunStatus::Ok,
        problem: ProblemSummary::of(p),
        nodes: a.nodes,
        seed: a.seed,
        lambda0: None,
        simulation: None,
        solver: None,
        adjoint: None,
        per_node: None,
        aggregate: None,
        divergence: None,
        weierstrass: None,
        cq: None,
        versions: Versions::default(),
    }
}

fn schedule_from(a: &CommonArgs) -> HomotopySchedule {
    let mut sched = HomotopySchedule::default();
    if let Some(t) = a.tau0 {
        sched.tau0 = t;
    }
    if let Some(t) = a.tau_min {
        sched.tau_min = t;
    }
    sched
}

fn config_from(a: &CommonArgs) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        nodes: a.nodes,
        schedule: schedule_from(a),
        radius: a.radius,
        samples: a.samples,
        seed: a.seed,
        ..PipelineConfig::default()
    };
    if let Some(t) = a.tol_act {
        cfg.tol_act = t;
    }
    if let Some(t) = a.tol_div {
        cfg.tol_divergence = t;
    }
    cfg
}

/// Write the report, then surface the stage error (if any) as the exit
/// error object.
fn finish(
    dir: &Path,
    report: &Report,
    seed: u64,
    residual: Option<f64>,
) -> Result<(), ErrorObject> {
    write_file(dir, "report.json", &report.to_json(), seed)?;
    match &report.status {
        RunStatus::Ok => Ok(()),
        RunStatus::Error { stage, message } => {
            let mut err = ErrorObject::new(stage, message, seed);
            if let Some(r) = residual {
                err = err.with_residual(r);
            }
            Err(err)
        }
    }
}

fn cmd_simulate(a: &CommonArgs) -> Result<(), ErrorObject> {
    let p = load_problem(&a.problem, a.seed)?;
    let mut report = base_report(&p, a);
    match ocpec::lcp::simulate_lcs(&p, a.nodes) {
        Ok(sim) => {
            report.simulation = Some(SimulationSummary {
                comp_residual: comp_residual(&p, &sim),
                solve_mismatch: None,
            });
            write_file(&a.out, "trajectory.csv", &trajectory_csv(&sim), a.seed)?;
        }
        Err(e) => {
            report.status = RunStatus::Error {
                stage: "simulate".into(),
                message: e.to_string(),
            };
        }
    }
    finish(&a.out, &report, a.seed, None)
}

fn cmd_solve(a: &CommonArgs) -> Result<(), ErrorObject> {
    let p = load_problem(&a.problem, a.seed)?;
    let mut report = base_report(&p, a);
    if a.nodes < 2 {
        report.status = RunStatus::Error {
            stage: "config".into(),
            message: format!("need at least 2 grid nodes, got {}", a.nodes),
        };
        return finish(&a.out, &report, a.seed, None);
    }
    let fm = FiniteMpec::new(&p, a.nodes - 1);
    let (traj, info) = solve_homotopy(&fm, &schedule_from(a));
    report.solver = Some(info);
    write_file(&a.out, "trajectory.csv", &trajectory_csv(&traj), a.seed)?;
    finish(&a.out, &report, a.seed, None)
}

fn cmd_check(a: &CheckArgs) -> Result<(), ErrorObject> {
    let c = &a.common;
    let p = load_problem(&c.problem, c.seed)?;
    let mut report = base_report(&p, c);
    let traj = match read_trajectory_csv(&a.traj, &p) {
        Ok(t) => t,
        Err(msg) => {
            report.status = RunStatus::Error {
                stage: "input".into(),
                message: msg,
            };
            return finish(&c.out, &report, c.seed, None);
        }
    };
    report.nodes = traj.ts.len();
    let fm = FiniteMpec::new(&p, traj.intervals());
    let rr = fm.residuals(&fm.pack(&traj));
    let tol = c.tol_act.unwrap_or(1e-6);
    let worst = rr.max_violation().max(rr.comp_product);
    report.simulation = Some(SimulationSummary {
        comp_residual: comp_residual(&p, &traj),
        solve_mismatch: None,
    });
    if worst > tol {
        report.status = RunStatus::Error {
            stage: "check".into(),
            message: format!(
                "trajectory violates the constraint system: max residual {worst:.6e} \
                 (dynamics {:.3e}, equality {:.3e}, inequality {:.3e}, cone {:.3e}, \
                 product {:.3e}, bounds {:.3e}) above tolerance {tol:.1e}",
                rr.dynamics,
                rr.equality,
                rr.inequality,
                rr.comp_negativity,
                rr.comp_product,
                rr.bounds
            ),
        };
        return finish(&c.out, &report, c.seed, Some(worst));
    }
    finish(&c.out, &report, c.seed, None)
}

fn cmd_cq(a: &CqArgs) -> Result<(), ErrorObject> {
    let c = &a.common;
    let p = load_problem(&c.problem, c.seed)?;
    let mut report = base_report(&p, c);
    let traj = match &a.traj {
        Some(path) => match read_trajectory_csv(path, &p) {
            Ok(t) => t,
            Err(msg) => {
                report.status = RunStatus::Error {
                    stage: "input".into(),
                    message: msg,
                };
                return finish(&c.out, &report, c.seed, None);
            }
        },
        None => {
            if c.nodes < 2 {
                report.status = RunStatus::Error {
                    stage: "config".into(),
                    message: format!("need at least 2 grid nodes, got {}", c.nodes),
                };
                return finish(&c.out, &report, c.seed, None);
            }
            let fm = FiniteMpec::new(&p, c.nodes - 1);
            let (traj, info) = solve_homotopy(&fm, &schedule_from(c));
            report.solver = Some(info);
            traj
        }
    };
    report.nodes = traj.ts.len();
    let tol_sv = ocpec::cq::DEFAULT_TOL_SV;
    match ocpec::cq::audit_trajectory(&p, &traj, tol_sv, c.seed) {
        Ok(verdicts) => {
            report.cq = Some(CqSummary::of(&verdicts, p.is_linear(), tol_sv));
            let mut body = serde_json::to_string_pretty(&verdicts).expect("verdict serialization");
            body.push('\n');
            write_file(&c.out, "cq.json", &body, c.seed)?;
        }
        Err(e) => {
            report.status = RunStatus::Error {
                stage: "cq".into(),
                message: e.to_string(),
            };
        }
    }
    finish(&c.out, &report, c.seed, None)
}

fn cmd_pipeline(a: &CommonArgs) -> Result<(), ErrorObject> {
    let p = load_problem(&a.problem, a.seed)?;
    let out = run_pipeline(&p, &config_from(a));
    if let Some(sim) = &out.simulated {
        write_file(&a.out, "simulated.csv", &trajectory_csv(sim), a.seed)?;
    }
    if let Some(traj) = &out.trajectory {
        write_file(&a.out, "trajectory.csv", &trajectory_csv(traj), a.seed)?;
        if let Some(arc) = &out.adjoint {
            write_file(&a.out, "adjoint.csv", &adjoint_csv(&traj.ts, arc), a.seed)?;
        }
        if let (Some(lambda), Some(eta)) = (&out.lambda, &out.eta) {
            write_file(
                &a.out,
                "multipliers.csv",
                &multipliers_csv(&traj.ts, lambda, eta),
                a.seed,
            )?;
        }
    }
    finish(&a.out, &out.report, a.seed, None)
}

/// Parse a trajectory CSV produced by this tool (or shaped like one) and
/// validate it against the instance's dimensions and uniform grid.
fn read_trajectory_csv(path: &Path, p: &OcpecProblem) -> Result<DiscreteTrajectory, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr
        .headers()
        .map_err(|e| format!("{}: {e}", path.display()))?
        .clone();
    let mut expected = vec!["t".to_string()];
    expected.extend((1..=p.n).map(|j| format!("x{j}")));
    expected.extend((1..=p.m).map(|j| format!("u{j}")));
    let got: Vec<String> = headers.iter().map(str::to_string).collect();
    if got != expected {
        return Err(format!(
            "header mismatch: expected `{}`, got `{}`",
            expected.join(","),
            got.join(",")
        ));
    }
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    let mut us = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("row {}: {e}", row + 1))?;
        if rec.len() != 1 + p.n + p.m {
            return Err(format!(
                "row {}: expected {} cells, got {}",
                row + 1,
                1 + p.n + p.m,
                rec.len()
            ));
        }
        let cell = |i: usize| -> Result<f64, String> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| format!("row {} cell {}: {e}", row + 1, i + 1))
        };
        ts.push(cell(0)?);
        xs.push(DVector::from_iterator(
            p.n,
            (0..p.n)
                .map(|j| cell(1 + j))
                .collect::<Result<Vec<_>, _>>()?,
        ));
        us.push(DVector::from_iterator(
            p.m,
            (0..p.m)
                .map(|j| cell(1 + p.n + j))
                .collect::<Result<Vec<_>, _>>()?,
        ));
    }
    if ts.len() < 2 {
        return Err(format!("need at least 2 grid rows, got {}", ts.len()));
    }
    // The final row repeats the last interval's control; drop it so the
    // control sequence has one entry per interval.
    us.pop();
    let intervals = ts.len() - 1;
    let grid = ocpec::problem::uniform_grid(p.t0, p.t1, intervals);
    let scale = p.t1.abs().max(p.t0.abs()).max(1.0);
    for (k, (a, b)) in ts.iter().zip(&grid).enumerate() {
        if (a - b).abs() > 1e-9 * scale {
            return Err(format!(
                "row {}: time {a} does not lie on the uniform grid of [{}, {}] \
                 with {intervals} intervals (expected {b})",
                k + 1,
                p.t0,
                p.t1
            ));
        }
    }
    Ok(DiscreteTrajectory { ts, xs, us })
}
