//! End-to-end orchestration: forward simulation (affine kinds), homotopy
//! solve, recovery of both multiplier families, stationarity grading, the
//! pointwise Hamiltonian-maximum check, and the constraint-qualification
//! audit, collected into one report plus renderable artifacts.
//!
//! Stage failures do not panic and do not discard earlier results: the
//! output keeps every artifact produced so far and the report's `status`
//! names the stage that stopped the run.

use crate::compgeom;
use crate::cq::{self, CqVerdict};
use crate::error::Result;
use crate::lcp;
use crate::problem::{DiscreteTrajectory, OcpecProblem};
use crate::report::{
    divergence_summary, AdjointSummary, AggregateLabels, CqSummary, NodeEntry, ProblemSummary,
    Report, RunStatus, SimulationSummary, Versions,
};
use crate::stationarity::{
    self, AdjointArc, EtaNode, MultiplierTrajectory, StationarityReport, WeierstrassReport,
};
use crate::transcribe::{solve_homotopy, FiniteMpec, HomotopySchedule, SolveInfo};

/// Everything a run needs besides the instance itself.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Grid points (state rows in the trajectory); intervals = nodes − 1.
    pub nodes: usize,
    pub schedule: HomotopySchedule,
    /// Cost multiplier for adjoint recovery.
    pub lambda0: f64,
    /// Activity tolerance for index-set classification.
    pub tol_act: f64,
    /// Componentwise gap above which the two families count as divergent.
    pub tol_divergence: f64,
    /// Residual above which a node's recovery is graded `failed`.
    pub tol_recover: f64,
    /// Singular-value gate of the gradient-independence test.
    pub tol_sv: f64,
    /// Pointwise-maximum sampling radius override (defaults to the
    /// instance's own radius).
    pub radius: Option<f64>,
    /// Pointwise-maximum samples per node.
    pub samples: usize,
    /// Seed for every sampling stage; recorded in the report.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            nodes: 101,
            schedule: HomotopySchedule::default(),
            lambda0: 1.0,
            tol_act: stationarity::DEFAULT_TOL_ACT,
            tol_divergence: stationarity::DEFAULT_TOL_DIVERGENCE,
            tol_recover: stationarity::DEFAULT_TOL_RECOVER,
            tol_sv: cq::DEFAULT_TOL_SV,
            radius: None,
            samples: 64,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error::InvalidArgument;
        if self.nodes < 2 {
            return Err(InvalidArgument(format!(
                "need at least 2 grid nodes, got {}",
                self.nodes
            )));
        }
        for (name, v) in [
            ("tol_act", self.tol_act),
            ("tol_divergence", self.tol_divergence),
            ("tol_recover", self.tol_recover),
            ("tol_sv", self.tol_sv),
            ("tau0", self.schedule.tau0),
            ("tau_min", self.schedule.tau_min),
        ] {
            if !(v > 0.0) {
                return Err(InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.schedule.tau_min > self.schedule.tau0 {
            return Err(InvalidArgument(format!(
                "tau_min {} above tau0 {}",
                self.schedule.tau_min, self.schedule.tau0
            )));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor < 1.0) {
            return Err(InvalidArgument(format!(
                "homotopy factor must lie in (0, 1), got {}",
                self.schedule.factor
            )));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(InvalidArgument(format!("radius must be positive, got {r}")));
            }
        }
        if self.lambda0 < 0.0 {
            return Err(InvalidArgument(format!(
                "lambda0 must be nonnegative, got {}",
                self.lambda0
            )));
        }
        Ok(())
    }
}

/// All artifacts of a run; later stages are `None` when an earlier stage
/// stopped the pipeline.
#[derive(Debug)]
pub struct PipelineOutput {
    pub simulated: Option<DiscreteTrajectory>,
    pub trajectory: Option<DiscreteTrajectory>,
    pub solver: Option<SolveInfo>,
    pub adjoint: Option<AdjointArc>,
    pub lambda: Option<MultiplierTrajectory>,
    pub eta: Option<Vec<EtaNode>>,
    pub stationarity: Option<StationarityReport>,
    pub weierstrass: Option<WeierstrassReport>,
    pub cq: Option<Vec<CqVerdict>>,
    pub report: Report,
}

impl PipelineOutput {
    fn new(p: &OcpecProblem, cfg: &PipelineConfig) -> PipelineOutput {
        PipelineOutput {
            simulated: None,
            trajectory: None,
            solver: None,
            adjoint: None,
            lambda: None,
            eta: None,
            stationarity: None,
            weierstrass: None,
            cq: None,
            report: Report {
                status: RunStatus::Ok,
                problem: ProblemSummary::of(p),
                nodes: cfg.nodes,
                seed: cfg.seed,
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
            },
        }
    }

    fn fail(mut self, stage: &str, message: impl ToString) -> PipelineOutput {
        self.report.status = RunStatus::Error {
            stage: stage.to_string(),
            message: message.to_string(),
        };
        self
    }
}

/// Worst distance of a trajectory's pair values from the complementarity
/// cone, over interval nodes.
pub fn comp_residual(p: &OcpecProblem, traj: &DiscreteTrajectory) -> f64 {
    (0..traj.intervals())
        .map(|k| {
            let (t, x, u) = (traj.ts[k], &traj.xs[k], &traj.us[k]);
            let g = p.comp_g(t, x, u).val;
            let h = p.comp_h(t, x, u).val;
            compgeom::dist_c(g.as_slice(), h.as_slice())
        })
        .fold(0.0, f64::max)
}

fn trajectory_gap(a: &DiscreteTrajectory, b: &DiscreteTrajectory) -> f64 {
    let mut gap = 0.0_f64;
    for (xa, xb) in a.xs.iter().zip(&b.xs) {
        gap = gap.max((xa - xb).amax());
    }
    for (ua, ub) in a.us.iter().zip(&b.us) {
        gap = gap.max((ua - ub).amax());
    }
    gap
}

/// Run every stage against one instance. Never panics on instance data;
/// the report's `status` field records how far the run got.
pub fn run_pipeline(p: &OcpecProblem, cfg: &PipelineConfig) -> PipelineOutput {
    let mut out = PipelineOutput::new(p, cfg);
    if let Err(e) = cfg.validate() {
        return out.fail("config", e);
    }

    if p.is_linear() {
        match lcp::simulate_lcs(p, cfg.nodes) {
            Ok(sim) => {
                out.report.simulation = Some(SimulationSummary {
                    comp_residual: comp_residual(p, &sim),
                    solve_mismatch: None,
                });
                out.simulated = Some(sim);
            }
            Err(e) => return out.fail("simulate", e),
        }
    }

    let fm = FiniteMpec::new(p, cfg.nodes - 1);
    let (traj, info) = solve_homotopy(&fm, &cfg.schedule);
    out.report.solver = Some(info.clone());
    out.solver = Some(info);
    if let (Some(sim), Some(block)) = (&out.simulated, out.report.simulation.as_mut()) {
        block.solve_mismatch = Some(trajectory_gap(sim, &traj));
    }
    out.trajectory = Some(traj);
    let traj = out.trajectory.as_ref().unwrap();

    let (arc, lambda) = match stationarity::recover_adjoint_with(p, traj, cfg.lambda0, cfg.tol_act)
    {
        Ok(pair) => pair,
        Err(e) => return out.fail("recover_adjoint", e),
    };
    out.report.lambda0 = Some(arc.lambda0);
    out.report.adjoint = Some(AdjointSummary {
        lambda0: arc.lambda0,
        p_initial: arc
            .p
            .first()
            .map_or(Vec::new(), |v| v.iter().copied().collect()),
        p_terminal: arc
            .p
            .last()
            .map_or(Vec::new(), |v| v.iter().copied().collect()),
        transversality_residual: arc.transversality_residual,
        max_costate: arc.max_costate(),
    });

    let eta = match stationarity::hamiltonian_trajectory(p, traj, &arc, cfg.tol_act) {
        Ok(e) => e,
        Err(e) => {
            out.adjoint = Some(arc);
            out.lambda = Some(lambda);
            return out.fail("hamiltonian_multipliers", e);
        }
    };

    let sets = match stationarity::node_index_sets(p, traj, cfg.tol_act) {
        Ok(s) => s,
        Err(e) => {
            out.adjoint = Some(arc);
            out.lambda = Some(lambda);
            out.eta = Some(eta);
            return out.fail("classify", e);
        }
    };
    let st = match stationarity::classify(
        &lambda,
        &eta,
        &sets,
        &traj.ts,
        cfg.tol_divergence,
        cfg.tol_recover,
    ) {
        Ok(st) => st,
        Err(e) => {
            out.adjoint = Some(arc);
            out.lambda = Some(lambda);
            out.eta = Some(eta);
            return out.fail("classify", e);
        }
    };
    out.report.aggregate = Some(AggregateLabels {
        label_lambda: st.aggregate_lambda,
        label_eta: st.aggregate_eta,
    });
    out.report.divergence = Some(divergence_summary(&st));
    out.report.per_node = Some(
        st.nodes
            .iter()
            .map(|c| NodeEntry {
                classification: c.clone(),
                cq: None,
            })
            .collect(),
    );

    let wr = stationarity::weierstrass_check_with(p, traj, &arc, cfg.samples, cfg.seed, cfg.radius);
    out.report.weierstrass = Some(wr.clone());
    out.weierstrass = Some(wr);

    let verdicts = match cq::audit_trajectory(p, traj, cfg.tol_sv, cfg.seed) {
        Ok(v) => v,
        Err(e) => {
            out.adjoint = Some(arc);
            out.lambda = Some(lambda);
            out.eta = Some(eta);
            out.stationarity = Some(st);
            return out.fail("cq", e);
        }
    };
    out.report.cq = Some(CqSummary::of(&verdicts, p.is_linear(), cfg.tol_sv));
    if let Some(entries) = out.report.per_node.as_mut() {
        for (entry, v) in entries.iter_mut().zip(&verdicts) {
            entry.cq = Some(v.clone());
        }
    }

    out.adjoint = Some(arc);
    out.lambda = Some(lambda);
    out.eta = Some(eta);
    out.stationarity = Some(st);
    out.cq = Some(verdicts);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stationarity::StationarityLabel;

    fn quick_cfg(nodes: usize) -> PipelineConfig {
        PipelineConfig {
            nodes,
            samples: 8,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn counterexample_pipeline_report() {
        let p = OcpecProblem::counterexample();
        let out = run_pipeline(&p, &quick_cfg(21));
        assert!(out.report.status.is_ok(), "{:?}", out.report.status);
        assert!(out.report.simulation.is_none(), "not a linear kind");
        let agg = out.report.aggregate.as_ref().unwrap();
        assert_eq!(agg.label_lambda, StationarityLabel::W);
        assert_eq!(agg.label_eta, StationarityLabel::M);
        let div = out.report.divergence.as_ref().unwrap();
        assert!(div.fraction >= 0.9, "fraction {}", div.fraction);
        let adj = out.report.adjoint.as_ref().unwrap();
        assert!((adj.p_terminal[0] + 1.0).abs() <= 1e-8);
        assert!(adj.p_initial[0].abs() <= 1e-8);
        assert_eq!(out.report.lambda0, Some(1.0));
        let cqs = out.report.cq.as_ref().unwrap();
        assert_eq!(cqs.licq_nodes, 0);
        assert_eq!(cqs.inconclusive_nodes, 20);
        assert_eq!(cqs.kappa_unbounded_nodes, 20);
        assert!(!cqs.error_bound_satisfied);
        let wr = out.report.weierstrass.as_ref().unwrap();
        assert!(wr.violations.is_empty());
        let json = out.report.to_json();
        assert!(json.contains("\"state\": \"ok\""));
        assert!(json.contains("\"label_eta\": \"M\""));
    }

    #[test]
    fn linear_pipeline_simulates_and_matches() {
        let p = OcpecProblem::linear_lcs_default();
        let out = run_pipeline(&p, &quick_cfg(26));
        assert!(out.report.status.is_ok(), "{:?}", out.report.status);
        let sim = out.report.simulation.as_ref().unwrap();
        assert!(sim.comp_residual <= 1e-10, "comp {}", sim.comp_residual);
        assert!(
            sim.solve_mismatch.unwrap() <= 1e-4,
            "mismatch {:?}",
            sim.solve_mismatch
        );
        let agg = out.report.aggregate.as_ref().unwrap();
        assert_eq!(agg.label_lambda, StationarityLabel::S);
        assert_eq!(agg.label_eta, StationarityLabel::S);
        assert_eq!(out.report.divergence.as_ref().unwrap().divergent_nodes, 0);
        let cqs = out.report.cq.as_ref().unwrap();
        assert_eq!(cqs.licq_nodes, 25);
        assert!(cqs.error_bound_satisfied);
        assert_eq!(cqs.kappa_max, Some(1.0));
        assert_eq!(cqs.k_s_max, Some(1.0));
        assert_eq!(out.report.per_node.as_ref().unwrap().len(), 25);
    }

    #[test]
    fn invalid_config_reports_stage() {
        let p = OcpecProblem::counterexample();
        let mut cfg = quick_cfg(1);
        let out = run_pipeline(&p, &cfg);
        match &out.report.status {
            RunStatus::Error { stage, .. } => assert_eq!(stage, "config"),
            RunStatus::Ok => panic!("expected config error"),
        }
        assert!(out.trajectory.is_none());
        cfg.nodes = 11;
        cfg.tol_act = -1.0;
        let out = run_pipeline(&p, &cfg);
        assert!(!out.report.status.is_ok());
        let json = out.report.to_json();
        assert!(json.contains("\"state\": \"error\""));
        assert!(json.contains("\"stage\": \"config\""));
    }
}
