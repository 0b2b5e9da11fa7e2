//! Machine-readable run artifacts: the JSON report assembled by the
//! pipeline and the CSV renderings of trajectories, multiplier families,
//! and adjoint arcs.
//!
//! All numeric CSV cells use 17-significant-digit scientific notation so
//! that round-trips through text are lossless, and every renderer is a pure
//! function of its inputs so reruns with the same configuration produce
//! byte-identical files.

use crate::cq::CqVerdict;
use crate::problem::{DiscreteTrajectory, OcpecProblem};
use crate::stationarity::{
    AdjointArc, EtaNode, MultiplierTrajectory, NodeClassification, StationarityLabel,
    StationarityReport, WeierstrassReport,
};
use crate::transcribe::SolveInfo;
use serde::Serialize;

/// Terminal state of a run: either every stage finished, or the named stage
/// failed with a message (earlier artifacts are still emitted).
#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Error { stage: String, message: String },
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

/// Identity block of the instance the run operated on.
#[derive(Clone, Debug, Serialize)]
pub struct ProblemSummary {
    pub name: String,
    /// `"linear"` when the constraint data is affine, else `"general"`.
    pub kind: &'static str,
    pub states: usize,
    pub controls: usize,
    pub pairs: usize,
    pub inequalities: usize,
    pub equalities: usize,
    pub t0: f64,
    pub t1: f64,
}

impl ProblemSummary {
    pub fn of(p: &OcpecProblem) -> ProblemSummary {
        ProblemSummary {
            name: p.name.clone(),
            kind: if p.is_linear() { "linear" } else { "general" },
            states: p.n,
            controls: p.m,
            pairs: p.l,
            inequalities: p.l1,
            equalities: p.l2,
            t0: p.t0,
            t1: p.t1,
        }
    }
}

/// Forward-simulation stage summary (linear instances only).
#[derive(Clone, Debug, Serialize)]
pub struct SimulationSummary {
    /// Worst distance of a node's pair values from the complementarity cone.
    pub comp_residual: f64,
    /// `‖x_sim − x_solve‖∞ ∨ ‖u_sim − u_solve‖∞`, once both exist.
    pub solve_mismatch: Option<f64>,
}

/// Adjoint-arc stage summary.
#[derive(Clone, Debug, Serialize)]
pub struct AdjointSummary {
    pub lambda0: f64,
    pub p_initial: Vec<f64>,
    pub p_terminal: Vec<f64>,
    pub transversality_residual: f64,
    pub max_costate: f64,
}

/// Aggregate stationarity grades (weakest node label per family).
#[derive(Clone, Debug, Serialize)]
pub struct AggregateLabels {
    pub label_lambda: StationarityLabel,
    pub label_eta: StationarityLabel,
}

/// Family-divergence summary: on how many nodes the two multiplier families
/// disagree beyond tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct DivergenceSummary {
    pub fraction: f64,
    pub divergent_nodes: usize,
    pub total_nodes: usize,
    pub tolerance: f64,
}

/// Per-node entry of the report: stationarity grading plus the full
/// constraint-qualification verdict.
#[derive(Clone, Debug, Serialize)]
pub struct NodeEntry {
    #[serde(flatten)]
    pub classification: NodeClassification,
    /// `None` when the qualification audit did not run or failed.
    pub cq: Option<CqVerdict>,
}

/// Trajectory-level constraint-qualification summary.
#[derive(Clone, Debug, Serialize)]
pub struct CqSummary {
    /// Nodes where the gradient-independence test holds.
    pub licq_nodes: usize,
    /// Nodes where no abnormal multiplier exists.
    pub quasi_normality_nodes: usize,
    /// Nodes left inconclusive by an abnormal witness.
    pub inconclusive_nodes: usize,
    pub linear_condition: bool,
    /// Affine data makes the polyhedral error bound hold with no further
    /// tests; mirrors `linear_condition`.
    pub error_bound_satisfied: bool,
    /// Largest finite κ over nodes; `None` when some node is unbounded.
    pub kappa_max: Option<f64>,
    pub kappa_unbounded_nodes: usize,
    /// Largest finite slope constant `k_S`; `None` when some node is
    /// unbounded.
    pub k_s_max: Option<f64>,
    pub tol_sv: f64,
}

impl CqSummary {
    pub fn of(verdicts: &[CqVerdict], linear: bool, tol_sv: f64) -> CqSummary {
        let mut kappa_max = 0.0_f64;
        let mut k_s_max = 0.0_f64;
        let mut unbounded = 0usize;
        for v in verdicts {
            match v.kappa.kappa {
                Some(k) => kappa_max = kappa_max.max(k),
                None => unbounded += 1,
            }
            if let Some(ks) = v.bounded_slope.k_s {
                k_s_max = k_s_max.max(ks);
            }
        }
        CqSummary {
            licq_nodes: verdicts.iter().filter(|v| v.licq.holds).count(),
            quasi_normality_nodes: verdicts
                .iter()
                .filter(|v| v.quasi_normality.holds())
                .count(),
            inconclusive_nodes: verdicts
                .iter()
                .filter(|v| !v.quasi_normality.holds())
                .count(),
            linear_condition: linear,
            error_bound_satisfied: linear,
            kappa_max: (unbounded == 0).then_some(kappa_max),
            kappa_unbounded_nodes: unbounded,
            k_s_max: (unbounded == 0).then_some(k_s_max),
            tol_sv,
        }
    }
}

/// Versions of the code that produced a report.
#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub ocpec: &'static str,
    pub report_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            ocpec: env!("CARGO_PKG_VERSION"),
            report_format: 1,
        }
    }
}

/// Top-level JSON report of a run. Stage blocks are `None` when the run
/// ended before reaching them; `status` names the failed stage in that
/// case.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub status: RunStatus,
    pub problem: ProblemSummary,
    /// Grid-point count of the run (state rows in the trajectory CSV).
    #[serde(rename = "N")]
    pub nodes: usize,
    pub seed: u64,
    pub lambda0: Option<f64>,
    pub simulation: Option<SimulationSummary>,
    pub solver: Option<SolveInfo>,
    pub adjoint: Option<AdjointSummary>,
    pub per_node: Option<Vec<NodeEntry>>,
    pub aggregate: Option<AggregateLabels>,
    pub divergence: Option<DivergenceSummary>,
    pub weierstrass: Option<WeierstrassReport>,
    pub cq: Option<CqSummary>,
    pub versions: Versions,
}

impl Report {
    /// Serialize with stable field order and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

/// One float cell: scientific notation with 17 significant digits, enough
/// for an exact binary round-trip.
pub fn fmt_cell(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, cells: &[f64]) {
    for (i, c) in cells.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_cell(*c));
    }
    out.push('\n');
}

/// Render a trajectory as CSV with header `t,x1..xn,u1..um`. One row per
/// grid point; the final row repeats the last interval's control so every
/// row has the same shape.
pub fn trajectory_csv(traj: &DiscreteTrajectory) -> String {
    let n = traj.xs.first().map_or(0, |x| x.len());
    let m = traj.us.first().map_or(0, |u| u.len());
    let mut out = String::from("t");
    for j in 1..=n {
        out.push_str(&format!(",x{j}"));
    }
    for j in 1..=m {
        out.push_str(&format!(",u{j}"));
    }
    out.push('\n');
    for (k, t) in traj.ts.iter().enumerate() {
        let u = &traj.us[k.min(traj.us.len().saturating_sub(1))];
        let mut cells = Vec::with_capacity(1 + n + m);
        cells.push(*t);
        cells.extend(traj.xs[k].iter());
        cells.extend(u.iter());
        push_row(&mut out, &cells);
    }
    out
}

/// Render both multiplier families as CSV with header
/// `t,lamG1..,lamH1..,etaG1..,etaH1..,residual`. One row per interval node;
/// the residual column is the worse of the two per-node recovery residuals.
pub fn multipliers_csv(ts: &[f64], lambda: &MultiplierTrajectory, eta: &[EtaNode]) -> String {
    let l = lambda.sets.first().map_or(0, |s| s.comp_g.len());
    let mut out = String::from("t");
    for tag in ["lamG", "lamH", "etaG", "etaH"] {
        for j in 1..=l {
            out.push_str(&format!(",{tag}{j}"));
        }
    }
    out.push_str(",residual\n");
    for k in 0..lambda.sets.len() {
        let mut cells = Vec::with_capacity(2 + 4 * l);
        cells.push(ts[k]);
        cells.extend(lambda.sets[k].comp_g.iter());
        cells.extend(lambda.sets[k].comp_h.iter());
        cells.extend(eta[k].set.comp_g.iter());
        cells.extend(eta[k].set.comp_h.iter());
        cells.push(lambda.residuals[k].max(eta[k].residual));
        push_row(&mut out, &cells);
    }
    out
}

/// Render the adjoint arc as plot-ready CSV with header `t,p1..pn`, one row
/// per grid point.
pub fn adjoint_csv(ts: &[f64], arc: &AdjointArc) -> String {
    let n = arc.p.first().map_or(0, |p| p.len());
    let mut out = String::from("t");
    for j in 1..=n {
        out.push_str(&format!(",p{j}"));
    }
    out.push('\n');
    for (k, t) in ts.iter().enumerate() {
        let mut cells = Vec::with_capacity(1 + n);
        cells.push(*t);
        cells.extend(arc.p[k].iter());
        push_row(&mut out, &cells);
    }
    out
}

/// Divergence block of a stationarity report.
pub fn divergence_summary(st: &StationarityReport) -> DivergenceSummary {
    DivergenceSummary {
        fraction: st.divergence_fraction,
        divergent_nodes: st.divergent_nodes.len(),
        total_nodes: st.nodes.len(),
        tolerance: st.tol_divergence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::uniform_grid;
    use nalgebra::DVector;

    #[test]
    fn cells_round_trip_exactly() {
        for v in [
            0.0,
            1.0,
            -1.0 / 3.0,
            0.1,
            std::f64::consts::PI,
            1.2345678901234567e-210,
            -9.87e300,
        ] {
            let s = fmt_cell(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn trajectory_csv_shape_and_header() {
        let n = 11usize;
        let traj = DiscreteTrajectory {
            ts: uniform_grid(0.0, 1.0, n - 1),
            xs: (0..n).map(|k| DVector::from_element(2, k as f64)).collect(),
            us: (0..n - 1).map(|_| DVector::zeros(1)).collect(),
        };
        let csv = trajectory_csv(&traj);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2,u1");
        // Header plus one row per grid point.
        assert_eq!(lines.len(), 1 + n);
        // Identical inputs render to identical bytes.
        assert_eq!(csv, trajectory_csv(&traj));
    }

    #[test]
    fn multiplier_csv_header_orders_families() {
        let lambda = MultiplierTrajectory {
            sets: vec![crate::problem::MultiplierSet::zeros(0, 0, 2)],
            residuals: vec![3e-12],
        };
        let eta = vec![EtaNode {
            set: crate::problem::MultiplierSet::zeros(0, 0, 2),
            residual: 4e-12,
            feasible: true,
        }];
        let csv = multipliers_csv(&[0.0], &lambda, &eta);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "t,lamG1,lamG2,lamH1,lamH2,etaG1,etaG2,etaH1,etaH2,residual"
        );
        assert_eq!(lines.len(), 2);
        assert!(lines[1].ends_with(&fmt_cell(4e-12)));
    }
}
