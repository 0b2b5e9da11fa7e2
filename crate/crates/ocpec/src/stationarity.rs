//! Adjoint reconstruction, multiplier recovery, and stationarity grading for
//! a discrete trajectory.
//!
//! Two multiplier families are recovered along one adjoint arc:
//!
//! * the **direct family λ**, solved from the control row of the adjoint
//!   inclusion with only the structural zeros enforced (no sign conditions
//!   at degenerate complementarity indices), and
//! * the **pointwise family η**, solved from the same row under the
//!   mixed-sign cone conditions of the pointwise control problem, by
//!   enumerating the sign branches at each degenerate index.
//!
//! The two families need not agree; the per-node gap and the fraction of
//! nodes where they differ are the headline outputs. The module also grades
//! each node on the W/C/M/S sign lattice, audits the pointwise-maximum
//! (Weierstrass) condition by feasible sampling, and cross-checks S-graded
//! nodes against Fritz John stationarity of the plain inequality
//! reformulation of the complementarity system.

use crate::compgeom::{self, IndexSets, SignClass};
use crate::error::{Error, Result};
use crate::linalg::{self, QpConstraint, QpConstraintKind};
use crate::problem::{
    ControlSet, DiscreteTrajectory, EndpointComponent, MultiplierSet, OcpecProblem,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Activity tolerance for classifying constraint branches.
pub const DEFAULT_TOL_ACT: f64 = 1e-6;
/// Residual gate above which a node's recovery is reported as failed.
pub const DEFAULT_TOL_RECOVER: f64 = 1e-6;
/// Componentwise gap above which the two multiplier families are considered
/// divergent at a node.
pub const DEFAULT_TOL_DIVERGENCE: f64 = 1e-6;
/// Hamiltonian-improvement gate for the sampled pointwise-maximum audit.
pub const DEFAULT_TOL_WEIERSTRASS: f64 = 1e-8;

/// Curvature weight of the null-direction roughness objective; also the
/// ridge that pins directions the data does not determine.
const SMOOTH_EPS: f64 = 1e-10;
/// Weight tying the reported per-node multipliers to the arc-construction
/// solution when the control row is rank-deficient.
const ANCHOR_EPS: f64 = 1e-10;
/// Minimum-norm ridge for the branch systems of the pointwise family. Keeps
/// near-vanishing constraint gradients from absorbing the whole row with an
/// enormous multiplier.
const RIDGE_EPS: f64 = 1e-10;
/// Nontriviality threshold on `max‖p‖ + λ₀`.
const TRIVIAL_TOL: f64 = 1e-8;
/// Feasibility required of the sampled comparison controls.
const SAMPLE_FEAS_TOL: f64 = 1e-10;

/// Adjoint arc of the discretized problem: one costate per node plus the
/// endpoint normal-cone elements realizing transversality.
#[derive(Clone, Debug)]
pub struct AdjointArc {
    /// Costates `p_0 … p_N`.
    pub p: Vec<DVector<f64>>,
    /// Cost multiplier; `0` encodes an abnormal arc.
    pub lambda0: f64,
    /// Initial normal component: `p_0 − λ₀·∇_{x0} f`.
    pub xi0: DVector<f64>,
    /// Terminal normal component: `−p_N − λ₀·∇_{x1} f`.
    pub xi1: DVector<f64>,
    /// Distance of `(ξ₀, ξ₁)` from the endpoint normal cones.
    pub transversality_residual: f64,
}

impl AdjointArc {
    /// Largest costate magnitude along the arc.
    pub fn max_costate(&self) -> f64 {
        self.p.iter().map(|p| p.amax()).fold(0.0, f64::max)
    }

    /// Nontriviality: the arc and the cost multiplier do not both vanish.
    pub fn nontrivial(&self) -> bool {
        self.max_costate() + self.lambda0 > TRIVIAL_TOL
    }
}

/// One multiplier set per interval node, with the per-node least-squares
/// residual of the control row it was solved from.
#[derive(Clone, Debug)]
pub struct MultiplierTrajectory {
    pub sets: Vec<MultiplierSet>,
    pub residuals: Vec<f64>,
}

/// Pointwise-family multipliers at one node.
#[derive(Clone, Debug)]
pub struct EtaNode {
    pub set: MultiplierSet,
    /// Control-row residual of the best sign branch.
    pub residual: f64,
    /// Whether some branch met the recovery tolerance.
    pub feasible: bool,
}

/// Stationarity grade of a node. Ordered by strength: a failed recovery is
/// weaker than any graded label, and `S ⇒ M ⇒ C ⇒ W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StationarityLabel {
    #[serde(rename = "failed")]
    Failed,
    W,
    C,
    M,
    S,
}

/// Per-node grading outcome for both multiplier families.
#[derive(Clone, Debug, Serialize)]
pub struct NodeClassification {
    pub node: usize,
    pub t: f64,
    pub label_lambda: StationarityLabel,
    pub label_eta: StationarityLabel,
    pub residual_lambda: f64,
    pub residual_eta: f64,
    /// Largest componentwise gap between the two families.
    pub divergence: f64,
    pub divergent: bool,
}

/// Node-by-node stationarity report with the divergence measure.
#[derive(Clone, Debug, Serialize)]
pub struct StationarityReport {
    pub nodes: Vec<NodeClassification>,
    /// Weakest λ-label attained over all nodes.
    pub aggregate_lambda: StationarityLabel,
    /// Weakest η-label attained over all nodes.
    pub aggregate_eta: StationarityLabel,
    pub divergent_nodes: Vec<usize>,
    /// Divergent node count over total node count — the discrete stand-in
    /// for the measure of the disagreement set.
    pub divergence_fraction: f64,
    pub tol_divergence: f64,
    pub tol_recover: f64,
}

/// A sampled control that beat the trajectory control's Hamiltonian.
#[derive(Clone, Debug, Serialize)]
pub struct WeierstrassViolation {
    pub node: usize,
    pub t: f64,
    /// Worst improving control found at the node.
    pub control: Vec<f64>,
    /// Hamiltonian improvement over the trajectory control.
    pub improvement: f64,
}

/// Outcome of the sampled pointwise-maximum audit.
#[derive(Clone, Debug, Serialize)]
pub struct WeierstrassReport {
    /// Worst violation per offending node.
    pub violations: Vec<WeierstrassViolation>,
    /// Nodes where no feasible comparison control was found.
    pub unsampled: Vec<usize>,
    /// Feasible comparison controls accepted per node.
    pub accepted: Vec<usize>,
    pub samples: usize,
    /// Comparison radius; `None` means unbounded.
    pub radius: Option<f64>,
    pub tol: f64,
}

/// Transform of a direct-family multiplier set into Fritz John multipliers
/// of the inequality reformulation `G ≥ 0, H ≥ 0, GᵀH ≤ 0`.
#[derive(Clone, Debug, Serialize)]
pub struct FjCrosscheck {
    /// Whether the transformed multipliers satisfy the Fritz John system.
    pub ok: bool,
    /// Control-row residual of the transformed system.
    pub residual: f64,
    /// Multiplier on the scalar product constraint `GᵀH ≤ 0`.
    pub product_multiplier: f64,
}

/// Branch classification of every interval node of a trajectory.
pub fn node_index_sets(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    tol_act: f64,
) -> Result<Vec<IndexSets>> {
    (0..traj.intervals())
        .map(|k| {
            let (t, x, u) = (traj.ts[k], &traj.xs[k], &traj.us[k]);
            let ge = p.g(t, x, u);
            let gg = p.comp_g(t, x, u);
            let hh = p.comp_h(t, x, u);
            compgeom::classify_indices(
                ge.val.as_slice(),
                gg.val.as_slice(),
                hh.val.as_slice(),
                tol_act,
            )
        })
        .collect()
}

/// Column roles of the per-node control-row system.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    /// Multiplier on an active inequality row `g_i ≤ 0` (sign ≥ 0).
    Ineq(usize),
    /// Multiplier on an equality row `h_i = 0` (free).
    Eq(usize),
    /// Multiplier on `G_i` (column `−∇ᵤG_i`).
    CompG(usize),
    /// Multiplier on `H_i` (column `−∇ᵤH_i`).
    CompH(usize),
    /// Control-box normal component at an active face (not a constraint
    /// multiplier; excluded from smoothing and from the reported sets).
    Face { j: usize, upper: bool, signed: bool },
}

/// The control-row system of one node: `A·m ≈ b(p)` with
/// `b(p) = ∇ᵤφᵀp − λ₀∇ᵤF`, plus the state-row coefficients needed by the
/// backward recursion.
struct NodeBasis {
    slots: Vec<Slot>,
    /// m × q control-row coefficients.
    a: DMatrix<f64>,
    /// n × q state-row coefficients (`∇ₓΨ` columns; face columns are zero).
    sx: DMatrix<f64>,
    /// Sign-constrained columns (active `g`, signed box faces).
    nonneg: Vec<bool>,
    /// Constant part of the right-hand side: `−λ₀·∇ᵤF`.
    b_const: DVector<f64>,
    /// `∇ᵤφᵀ` (m × n).
    ju_phi_t: DMatrix<f64>,
    /// `∇ₓφᵀ` (n × n).
    jx_phi_t: DMatrix<f64>,
    /// `λ₀·∇ₓF`.
    fx_scaled: DVector<f64>,
    /// Pseudoinverse of `a` (q × m).
    pinv: DMatrix<f64>,
    /// Orthonormal nullspace basis of `a` (q × z).
    z: DMatrix<f64>,
    /// Degenerate complementarity indices at this node.
    degenerate: Vec<usize>,
}

impl NodeBasis {
    fn build(
        p: &OcpecProblem,
        traj: &DiscreteTrajectory,
        sets: &IndexSets,
        lambda0: f64,
        k: usize,
        tol_act: f64,
    ) -> NodeBasis {
        let (t, x, u) = (traj.ts[k], &traj.xs[k], &traj.us[k]);
        let phi = p.dynamics(t, x, u);
        let fr = p.running_cost(t, x, u);
        let ge = p.g(t, x, u);
        let he = p.h(t, x, u);
        let gg = p.comp_g(t, x, u);
        let hh = p.comp_h(t, x, u);

        let mut slots = Vec::new();
        let mut nonneg = Vec::new();
        for &i in &sets.i_zero {
            slots.push(Slot::Ineq(i));
            nonneg.push(true);
        }
        for i in 0..p.l2 {
            slots.push(Slot::Eq(i));
            nonneg.push(false);
        }
        let mut keep_g: Vec<usize> = sets.i_0plus.iter().chain(&sets.i_00).copied().collect();
        keep_g.sort_unstable();
        let mut keep_h: Vec<usize> = sets.i_plus0.iter().chain(&sets.i_00).copied().collect();
        keep_h.sort_unstable();
        for &i in &keep_g {
            slots.push(Slot::CompG(i));
            nonneg.push(false);
        }
        for &i in &keep_h {
            slots.push(Slot::CompH(i));
            nonneg.push(false);
        }
        if let ControlSet::Box { lo, hi } = &p.control_set {
            for j in 0..p.m {
                if lo[j] == hi[j] {
                    // Pinned control component: the normal cone is a line.
                    slots.push(Slot::Face {
                        j,
                        upper: true,
                        signed: false,
                    });
                    nonneg.push(false);
                } else if hi[j].is_finite() && (u[j] - hi[j]).abs() <= tol_act {
                    slots.push(Slot::Face {
                        j,
                        upper: true,
                        signed: true,
                    });
                    nonneg.push(true);
                } else if lo[j].is_finite() && (u[j] - lo[j]).abs() <= tol_act {
                    slots.push(Slot::Face {
                        j,
                        upper: false,
                        signed: true,
                    });
                    nonneg.push(true);
                }
            }
        }

        let q = slots.len();
        let mut a = DMatrix::zeros(p.m, q);
        let mut sx = DMatrix::zeros(p.n, q);
        for (c, slot) in slots.iter().enumerate() {
            match *slot {
                Slot::Ineq(i) => {
                    for r in 0..p.m {
                        a[(r, c)] = ge.ju[(i, r)];
                    }
                    for r in 0..p.n {
                        sx[(r, c)] = ge.jx[(i, r)];
                    }
                }
                Slot::Eq(i) => {
                    for r in 0..p.m {
                        a[(r, c)] = he.ju[(i, r)];
                    }
                    for r in 0..p.n {
                        sx[(r, c)] = he.jx[(i, r)];
                    }
                }
                Slot::CompG(i) => {
                    for r in 0..p.m {
                        a[(r, c)] = -gg.ju[(i, r)];
                    }
                    for r in 0..p.n {
                        sx[(r, c)] = -gg.jx[(i, r)];
                    }
                }
                Slot::CompH(i) => {
                    for r in 0..p.m {
                        a[(r, c)] = -hh.ju[(i, r)];
                    }
                    for r in 0..p.n {
                        sx[(r, c)] = -hh.jx[(i, r)];
                    }
                }
                Slot::Face { j, upper, .. } => {
                    a[(j, c)] = if upper { 1.0 } else { -1.0 };
                }
            }
        }

        let pinv = linalg::pinv(&a);
        let z = linalg::nullspace(&a, 1e-10);
        NodeBasis {
            slots,
            a,
            sx,
            nonneg,
            b_const: -&fr.gu * lambda0,
            ju_phi_t: phi.ju.transpose(),
            jx_phi_t: phi.jx.transpose(),
            fx_scaled: &fr.gx * lambda0,
            pinv,
            z,
            degenerate: sets.i_00.clone(),
        }
    }

    /// Embed the nullspace basis into a node-independent coordinate system:
    /// the full multiplier space (inequality, equality, G, H blocks) followed
    /// by one signed box-normal coordinate per control component. Keeping the
    /// face coordinates in the roughness objective stops the smoother from
    /// trading constant offsets between a constraint multiplier and a
    /// parallel face column.
    fn embedded_nullspace(&self, p: &OcpecProblem) -> DMatrix<f64> {
        let qf = p.l1 + p.l2 + 2 * p.l + p.m;
        let zn = self.z.ncols();
        let mut out = DMatrix::zeros(qf, zn);
        for (row, slot) in self.slots.iter().enumerate() {
            let (target, sign) = match *slot {
                Slot::Ineq(i) => (i, 1.0),
                Slot::Eq(i) => (p.l1 + i, 1.0),
                Slot::CompG(i) => (p.l1 + p.l2 + i, 1.0),
                Slot::CompH(i) => (p.l1 + p.l2 + p.l + i, 1.0),
                Slot::Face { j, upper, .. } => {
                    (p.l1 + p.l2 + 2 * p.l + j, if upper { 1.0 } else { -1.0 })
                }
            };
            for c in 0..zn {
                out[(target, c)] = sign * self.z[(row, c)];
            }
        }
        out
    }

    /// Unpack an effective-coordinate solution into a full multiplier set;
    /// face coordinates are dropped.
    fn unpack(&self, p: &OcpecProblem, m: &DVector<f64>) -> MultiplierSet {
        let mut out = MultiplierSet::zeros(p.l1, p.l2, p.l);
        for (c, slot) in self.slots.iter().enumerate() {
            match *slot {
                Slot::Ineq(i) => out.ineq[i] = m[c],
                Slot::Eq(i) => out.eq[i] = m[c],
                Slot::CompG(i) => out.comp_g[i] = m[c],
                Slot::CompH(i) => out.comp_h[i] = m[c],
                Slot::Face { .. } => {}
            }
        }
        out
    }

    fn slot_position(&self, want: Slot) -> Option<usize> {
        self.slots.iter().position(|s| *s == want)
    }
}

/// Reject trajectories that are not feasible within the documented gate.
fn validate_trajectory(p: &OcpecProblem, traj: &DiscreteTrajectory, tol_act: f64) -> Result<()> {
    let n_int = traj.intervals();
    if traj.ts.len() != n_int + 1 || traj.xs.len() != n_int + 1 || n_int == 0 {
        return Err(Error::InvalidArgument(format!(
            "trajectory needs K nodes, K states and K−1 controls, got ts={}, xs={}, us={}",
            traj.ts.len(),
            traj.xs.len(),
            traj.us.len()
        )));
    }
    let h = traj.step();
    let feas = 1e-6_f64;
    let mut worst = 0.0_f64;
    for k in 0..n_int {
        let (t, x, u) = (traj.ts[k], &traj.xs[k], &traj.us[k]);
        let phi = p.dynamics(t, x, u);
        let defect = &traj.xs[k + 1] - x - &phi.val * h;
        worst = worst.max(defect.amax());
        let ge = p.g(t, x, u);
        for i in 0..p.l1 {
            worst = worst.max(ge.val[i]);
        }
        let he = p.h(t, x, u);
        if p.l2 > 0 {
            worst = worst.max(he.val.amax());
        }
    }
    for (set, x) in [(&p.x0_set, &traj.xs[0]), (&p.x1_set, &traj.xs[n_int])] {
        let (lo, hi) = set.bounds();
        for j in 0..p.n {
            worst = worst.max(lo[j] - x[j]).max(x[j] - hi[j]);
        }
    }
    if worst > feas {
        return Err(Error::InvalidArgument(format!(
            "trajectory is infeasible by {worst:.3e}, beyond the {feas:.0e} recovery gate"
        )));
    }
    // Complementarity membership is enforced by the classification itself.
    node_index_sets(p, traj, tol_act)?;
    Ok(())
}

/// Terminal unknowns of the arc: one per endpoint component whose normal
/// cone is nontrivial, with the sign the active face imposes.
fn terminal_slots(
    p: &OcpecProblem,
    x1: &DVector<f64>,
    tol_act: f64,
) -> Vec<(usize, Option<QpConstraintKind>)> {
    match &p.x1_set {
        EndpointComponent::Free { .. } => Vec::new(),
        EndpointComponent::Fixed(_) => (0..p.n).map(|j| (j, None)).collect(),
        EndpointComponent::Box { lo, hi } => {
            let mut out = Vec::new();
            for j in 0..p.n {
                if lo[j] == hi[j] {
                    out.push((j, None));
                } else if hi[j].is_finite() && (x1[j] - hi[j]).abs() <= tol_act {
                    out.push((j, Some(QpConstraintKind::Ge)));
                } else if lo[j].is_finite() && (x1[j] - lo[j]).abs() <= tol_act {
                    out.push((j, Some(QpConstraintKind::Le)));
                }
            }
            out
        }
    }
}

/// Distance of an endpoint normal component from the normal cone the
/// endpoint set prescribes at `x`.
fn normal_cone_gap(set: &EndpointComponent, x: &DVector<f64>, xi: &DVector<f64>, tol: f64) -> f64 {
    let mut worst = 0.0_f64;
    match set {
        EndpointComponent::Fixed(_) => {}
        EndpointComponent::Free { dim } => {
            for j in 0..*dim {
                worst = worst.max(xi[j].abs());
            }
        }
        EndpointComponent::Box { lo, hi } => {
            for j in 0..lo.len() {
                if lo[j] == hi[j] {
                    continue;
                }
                if hi[j].is_finite() && (x[j] - hi[j]).abs() <= tol {
                    worst = worst.max(-xi[j]);
                } else if lo[j].is_finite() && (x[j] - lo[j]).abs() <= tol {
                    worst = worst.max(xi[j]);
                } else {
                    worst = worst.max(xi[j].abs());
                }
            }
        }
    }
    worst.max(0.0)
}

/// Sign-constrained least squares `min ‖A·m − b‖² + ε‖m − anchor‖²`, with
/// the pure (un-ridged) residual returned alongside the solution.
fn solve_signed(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    anchor: &DVector<f64>,
    nonneg: &[bool],
    eps: f64,
) -> (DVector<f64>, f64) {
    let q = a.ncols();
    if q == 0 {
        return (DVector::zeros(0), b.norm());
    }
    let rows = a.nrows();
    let w = eps.sqrt();
    let mut aug = DMatrix::zeros(rows + q, q);
    aug.view_mut((0, 0), (rows, q)).copy_from(a);
    for i in 0..q {
        aug[(rows + i, i)] = w;
    }
    let mut baug = DVector::zeros(rows + q);
    baug.rows_mut(0, rows).copy_from(b);
    baug.rows_mut(rows, q).copy_from(&(anchor * w));
    let m = linalg::nnls(&aug, &baug, nonneg);
    let resid = (a * &m - b).norm();
    (m, resid)
}

/// Reconstruct the adjoint arc and the direct multiplier family λ.
///
/// The costate is propagated backward from the terminal transversality
/// condition; at every node the constraint multipliers are solved from the
/// control row of the adjoint inclusion at that node's own costate, and the
/// state row then defines the next backward step. Directions the control row
/// leaves free (its nullspace) and the endpoint normal components are chosen
/// jointly by a small quadratic program that minimizes the node-to-node
/// roughness of the free directions, subject to the initial transversality
/// sign conditions. Reported multipliers additionally respect the sign of
/// active inequality multipliers; the per-node residual measures how well the
/// signed solve closes the control row.
pub fn recover_adjoint(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    lambda0: f64,
) -> Result<(AdjointArc, MultiplierTrajectory)> {
    recover_adjoint_with(p, traj, lambda0, DEFAULT_TOL_ACT)
}

/// [`recover_adjoint`] with an explicit activity tolerance.
pub fn recover_adjoint_with(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    lambda0: f64,
    tol_act: f64,
) -> Result<(AdjointArc, MultiplierTrajectory)> {
    validate_trajectory(p, traj, tol_act)?;
    let n = p.n;
    let n_int = traj.intervals();
    let h = traj.step();
    let sets = node_index_sets(p, traj, tol_act)?;
    let bases: Vec<NodeBasis> = (0..n_int)
        .map(|k| NodeBasis::build(p, traj, &sets[k], lambda0, k, tol_act))
        .collect();

    // Unknown layout: terminal normal components first, then one block of
    // null-direction coefficients per node.
    let omega = terminal_slots(p, &traj.xs[n_int], tol_act);
    let mut theta_off = vec![0usize; n_int];
    let mut total = omega.len();
    for k in 0..n_int {
        theta_off[k] = total;
        total += bases[k].z.ncols();
    }

    let fe = p.endpoint_cost(&traj.xs[0], &traj.xs[n_int]);

    // Affine backward propagation: p_k = base_k + sens_k · ξ.
    let mut base = vec![DVector::zeros(n); n_int + 1];
    let mut sens = vec![DMatrix::zeros(n, total); n_int + 1];
    base[n_int] = -&fe.gx1 * lambda0;
    for (slot, (j, _)) in omega.iter().enumerate() {
        sens[n_int][(*j, slot)] = -1.0;
    }
    for k in (0..n_int).rev() {
        let nb = &bases[k];
        let sxp = &nb.sx * &nb.pinv;
        // Implicit step: the node multipliers satisfy the control row at the
        // node's own costate, so p_k appears on both sides.
        let gk = DMatrix::identity(n, n) + (&sxp * &nb.ju_phi_t) * h;
        let trans = DMatrix::identity(n, n) + &nb.jx_phi_t * h;
        let rhs_base = &trans * &base[k + 1] - (&nb.fx_scaled + &sxp * &nb.b_const) * h;
        let mut rhs_sens = &trans * &sens[k + 1];
        let zn = nb.z.ncols();
        if zn > 0 {
            let add = &nb.sx * &nb.z;
            for r in 0..n {
                for c in 0..zn {
                    rhs_sens[(r, theta_off[k] + c)] -= h * add[(r, c)];
                }
            }
        }
        let lu = gk.clone().lu();
        base[k] = lu
            .solve(&rhs_base)
            .unwrap_or_else(|| linalg::lstsq_min_norm(&gk, &rhs_base));
        sens[k] = lu.solve(&rhs_sens).unwrap_or_else(|| {
            let mut out = DMatrix::zeros(n, total);
            for c in 0..total {
                let col: DVector<f64> = rhs_sens.column(c).into();
                out.set_column(c, &linalg::lstsq_min_norm(&gk, &col));
            }
            out
        });
    }

    // Quadratic program over the free directions: minimize the roughness of
    // the null components (embedded in multiplier space) plus a small ridge,
    // subject to the transversality sign conditions; `ξ = 0` stays optimal
    // whenever nothing binds.
    let xi = if total == 0 {
        DVector::zeros(0)
    } else {
        let mut qmat = DMatrix::from_diagonal_element(total, total, SMOOTH_EPS);
        let embedded: Vec<DMatrix<f64>> = bases.iter().map(|nb| nb.embedded_nullspace(p)).collect();
        for k in 0..n_int.saturating_sub(1) {
            let (ea, eb) = (&embedded[k], &embedded[k + 1]);
            let (za, zb) = (ea.ncols(), eb.ncols());
            let (oa, ob) = (theta_off[k], theta_off[k + 1]);
            let gaa = ea.tr_mul(ea);
            let gbb = eb.tr_mul(eb);
            let gab = ea.tr_mul(eb);
            for r in 0..za {
                for c in 0..za {
                    qmat[(oa + r, oa + c)] += gaa[(r, c)];
                }
                for c in 0..zb {
                    qmat[(oa + r, ob + c)] -= gab[(r, c)];
                    qmat[(ob + c, oa + r)] -= gab[(r, c)];
                }
            }
            for r in 0..zb {
                for c in 0..zb {
                    qmat[(ob + r, ob + c)] += gbb[(r, c)];
                }
            }
        }
        let mut cons: Vec<QpConstraint> = Vec::new();
        for (slot, (_, kind)) in omega.iter().enumerate() {
            if let Some(kind) = kind {
                let mut row = DVector::zeros(total);
                row[slot] = 1.0;
                cons.push(QpConstraint {
                    row,
                    rhs: 0.0,
                    kind: *kind,
                });
            }
        }
        let x0 = &traj.xs[0];
        let (lo0, hi0) = p.x0_set.bounds();
        for j in 0..n {
            let kind = match &p.x0_set {
                EndpointComponent::Fixed(_) => None,
                EndpointComponent::Free { .. } => Some(QpConstraintKind::Eq),
                EndpointComponent::Box { .. } => {
                    if lo0[j] == hi0[j] {
                        None
                    } else if hi0[j].is_finite() && (x0[j] - hi0[j]).abs() <= tol_act {
                        Some(QpConstraintKind::Ge)
                    } else if lo0[j].is_finite() && (x0[j] - lo0[j]).abs() <= tol_act {
                        Some(QpConstraintKind::Le)
                    } else {
                        Some(QpConstraintKind::Eq)
                    }
                }
            };
            if let Some(kind) = kind {
                cons.push(QpConstraint {
                    row: sens[0].row(j).transpose(),
                    rhs: lambda0 * fe.gx0[j] - base[0][j],
                    kind,
                });
            }
        }
        linalg::solve_qp(&qmat, &DVector::zeros(total), &cons)
    };

    let ps: Vec<DVector<f64>> = (0..=n_int).map(|k| &base[k] + &sens[k] * &xi).collect();

    // Reported multipliers: signed re-solve of each node's control row,
    // anchored to the arc-construction solution so rank-deficient directions
    // stay smooth.
    let mut out_sets = Vec::with_capacity(n_int);
    let mut residuals = Vec::with_capacity(n_int);
    for k in 0..n_int {
        let nb = &bases[k];
        let b = &nb.ju_phi_t * &ps[k] + &nb.b_const;
        let mut anchor = &nb.pinv * &b;
        let zn = nb.z.ncols();
        if zn > 0 {
            let theta: DVector<f64> =
                DVector::from_iterator(zn, (0..zn).map(|c| xi[theta_off[k] + c]));
            anchor += &nb.z * theta;
        }
        let (m, resid) = solve_signed(&nb.a, &b, &anchor, &nb.nonneg, ANCHOR_EPS);
        out_sets.push(nb.unpack(p, &m));
        residuals.push(resid);
    }

    let xi0 = &ps[0] - &fe.gx0 * lambda0;
    let mut xi1 = DVector::zeros(n);
    for (slot, (j, _)) in omega.iter().enumerate() {
        xi1[*j] = xi[slot];
    }
    let gap0 = normal_cone_gap(&p.x0_set, &traj.xs[0], &xi0, tol_act);
    let gap1 = normal_cone_gap(&p.x1_set, &traj.xs[n_int], &xi1, tol_act);
    let arc = AdjointArc {
        p: ps,
        lambda0,
        xi0,
        xi1,
        transversality_residual: gap0.max(gap1),
    };
    Ok((
        arc,
        MultiplierTrajectory {
            sets: out_sets,
            residuals,
        },
    ))
}

/// Solve the pointwise-family multipliers η at one node by enumerating the
/// sign branches of the degenerate complementarity indices: each degenerate
/// index either zeroes its G-multiplier, zeroes its H-multiplier, or keeps
/// both with nonnegative signs. The branch with the smallest control-row
/// residual wins; ties prefer the branch keeping the most signed pairs.
pub fn hamiltonian_multipliers(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    arc: &AdjointArc,
    node: usize,
) -> Result<EtaNode> {
    hamiltonian_multipliers_with(p, traj, arc, node, DEFAULT_TOL_ACT)
}

/// [`hamiltonian_multipliers`] with an explicit activity tolerance.
pub fn hamiltonian_multipliers_with(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    arc: &AdjointArc,
    node: usize,
    tol_act: f64,
) -> Result<EtaNode> {
    let n_int = traj.intervals();
    if node >= n_int || arc.p.len() != n_int + 1 {
        return Err(Error::InvalidArgument(format!(
            "node {node} out of range for {n_int} intervals"
        )));
    }
    let sets = {
        let (t, x, u) = (traj.ts[node], &traj.xs[node], &traj.us[node]);
        compgeom::classify_indices(
            p.g(t, x, u).val.as_slice(),
            p.comp_g(t, x, u).val.as_slice(),
            p.comp_h(t, x, u).val.as_slice(),
            tol_act,
        )?
    };
    let nb = NodeBasis::build(p, traj, &sets, arc.lambda0, node, tol_act);
    let b = &nb.ju_phi_t * &arc.p[node] + &nb.b_const;
    let d = nb.degenerate.len();
    if d > 8 {
        return Err(Error::InvalidArgument(format!(
            "{d} degenerate indices at node {node}: branch enumeration is capped at 8"
        )));
    }
    let pos: Vec<(usize, usize)> = nb
        .degenerate
        .iter()
        .map(|&i| {
            (
                nb.slot_position(Slot::CompG(i)).expect("G slot present"),
                nb.slot_position(Slot::CompH(i)).expect("H slot present"),
            )
        })
        .collect();

    let branches = 3usize.pow(d as u32);
    let zero_anchor = DVector::zeros(nb.slots.len());
    let mut best: Option<(f64, usize, DVector<f64>)> = None;
    for id in 0..branches {
        let mut drop = vec![false; nb.slots.len()];
        let mut flags = nb.nonneg.clone();
        let mut kept_pairs = 0usize;
        let mut digits = id;
        for &(cg, ch) in &pos {
            match digits % 3 {
                0 => {
                    flags[cg] = true;
                    flags[ch] = true;
                    kept_pairs += 1;
                }
                1 => drop[cg] = true,
                _ => drop[ch] = true,
            }
            digits /= 3;
        }
        let keep: Vec<usize> = (0..nb.slots.len()).filter(|&c| !drop[c]).collect();
        let a_sub = nb.a.select_columns(keep.iter());
        let flags_sub: Vec<bool> = keep.iter().map(|&c| flags[c]).collect();
        let anchor_sub: DVector<f64> =
            DVector::from_iterator(keep.len(), keep.iter().map(|&c| zero_anchor[c]));
        let (m_sub, resid) = solve_signed(&a_sub, &b, &anchor_sub, &flags_sub, RIDGE_EPS);
        let better = match &best {
            None => true,
            Some((br, bk, _)) => {
                let tie = 1e-10 * (1.0 + br.min(resid));
                resid < br - tie || ((resid - br).abs() <= tie && kept_pairs > *bk)
            }
        };
        if better {
            let mut full = DVector::zeros(nb.slots.len());
            for (slot, &c) in keep.iter().enumerate() {
                full[c] = m_sub[slot];
            }
            best = Some((resid, kept_pairs, full));
        }
    }
    let (residual, _, m) = best.expect("at least one branch");
    Ok(EtaNode {
        set: nb.unpack(p, &m),
        residual,
        feasible: residual <= DEFAULT_TOL_RECOVER,
    })
}

/// [`hamiltonian_multipliers`] at every interval node.
pub fn hamiltonian_trajectory(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    arc: &AdjointArc,
    tol_act: f64,
) -> Result<Vec<EtaNode>> {
    (0..traj.intervals())
        .map(|k| hamiltonian_multipliers_with(p, traj, arc, k, tol_act))
        .collect()
}

fn grade(classes: &[SignClass]) -> StationarityLabel {
    if classes.iter().all(|c| c.s) {
        StationarityLabel::S
    } else if classes.iter().all(|c| c.m) {
        StationarityLabel::M
    } else if classes.iter().all(|c| c.c) {
        StationarityLabel::C
    } else {
        StationarityLabel::W
    }
}

fn amax_or0(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

fn set_gap(a: &MultiplierSet, b: &MultiplierSet) -> f64 {
    let block = |x: &DVector<f64>, y: &DVector<f64>| amax_or0(&(x - y));
    block(&a.ineq, &b.ineq)
        .max(block(&a.eq, &b.eq))
        .max(block(&a.comp_g, &b.comp_g))
        .max(block(&a.comp_h, &b.comp_h))
}

/// Grade both multiplier families node by node and measure their divergence.
///
/// A node whose recovery residual exceeds `tol_recover` is reported as
/// `failed` rather than graded. The aggregate verdict per family is the
/// weakest label over all nodes.
pub fn classify(
    lambda: &MultiplierTrajectory,
    eta: &[EtaNode],
    sets: &[IndexSets],
    ts: &[f64],
    tol_divergence: f64,
    tol_recover: f64,
) -> Result<StationarityReport> {
    let n_nodes = lambda.sets.len();
    if eta.len() != n_nodes || sets.len() != n_nodes || ts.len() < n_nodes || n_nodes == 0 {
        return Err(Error::InvalidArgument(format!(
            "classification needs matching node counts, got λ={}, η={}, sets={}, ts={}",
            n_nodes,
            eta.len(),
            sets.len(),
            ts.len()
        )));
    }
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut divergent_nodes = Vec::new();
    let mut agg_l = StationarityLabel::S;
    let mut agg_e = StationarityLabel::S;
    for k in 0..n_nodes {
        let tol = sets[k].tol_act;
        let grade_set = |set: &MultiplierSet, residual: f64| {
            if residual > tol_recover {
                StationarityLabel::Failed
            } else {
                let classes: Vec<SignClass> = sets[k]
                    .i_00
                    .iter()
                    .map(|&i| compgeom::sign_class(set.comp_g[i], set.comp_h[i], tol))
                    .collect();
                grade(&classes)
            }
        };
        let label_lambda = grade_set(&lambda.sets[k], lambda.residuals[k]);
        let label_eta = grade_set(&eta[k].set, eta[k].residual);
        let divergence = set_gap(&lambda.sets[k], &eta[k].set);
        let divergent = divergence > tol_divergence;
        if divergent {
            divergent_nodes.push(k);
        }
        agg_l = agg_l.min(label_lambda);
        agg_e = agg_e.min(label_eta);
        nodes.push(NodeClassification {
            node: k,
            t: ts[k],
            label_lambda,
            label_eta,
            residual_lambda: lambda.residuals[k],
            residual_eta: eta[k].residual,
            divergence,
            divergent,
        });
    }
    let fraction = divergent_nodes.len() as f64 / n_nodes as f64;
    Ok(StationarityReport {
        nodes,
        aggregate_lambda: agg_l,
        aggregate_eta: agg_e,
        divergent_nodes,
        divergence_fraction: fraction,
        tol_divergence,
        tol_recover,
    })
}

/// Per-pair repair target chosen by projecting onto the complementarity cone.
#[derive(Clone, Copy, Debug, PartialEq)]
enum PairBranch {
    /// Keep `G ≥ 0`, drive `H` to zero.
    KeepG,
    /// Keep `H ≥ 0`, drive `G` to zero.
    KeepH,
    /// Drive both to zero.
    BothZero,
}

fn choose_branches(gv: &[f64], hv: &[f64]) -> Vec<PairBranch> {
    let (pa, pb, _) = compgeom::project_c(gv, hv);
    (0..gv.len())
        .map(|i| {
            if pa[i] > 0.0 {
                PairBranch::KeepG
            } else if pb[i] > 0.0 {
                PairBranch::KeepH
            } else {
                PairBranch::BothZero
            }
        })
        .collect()
}

/// Rows (value, x-gradient, u-gradient) that must vanish for `(x, u)` to sit
/// exactly on the chosen complementarity branches while respecting `h = 0`,
/// `g ≤ 0`, and the kept-side nonnegativity.
fn branch_rows(
    p: &OcpecProblem,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    branches: &[PairBranch],
) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let mut rows = Vec::new();
    let he = p.h(t, x, u);
    for i in 0..p.l2 {
        rows.push((
            he.val[i],
            he.jx.row(i).transpose(),
            he.ju.row(i).transpose(),
        ));
    }
    let ge = p.g(t, x, u);
    for i in 0..p.l1 {
        if ge.val[i] > 0.0 {
            rows.push((
                ge.val[i],
                ge.jx.row(i).transpose(),
                ge.ju.row(i).transpose(),
            ));
        }
    }
    let gg = p.comp_g(t, x, u);
    let hh = p.comp_h(t, x, u);
    for (i, br) in branches.iter().enumerate() {
        let g_row = || (gg.jx.row(i).transpose(), gg.ju.row(i).transpose());
        let h_row = || (hh.jx.row(i).transpose(), hh.ju.row(i).transpose());
        match br {
            PairBranch::KeepG => {
                let (jx, ju) = h_row();
                rows.push((hh.val[i], jx, ju));
                if gg.val[i] < 0.0 {
                    let (jx, ju) = g_row();
                    rows.push((gg.val[i], jx, ju));
                }
            }
            PairBranch::KeepH => {
                let (jx, ju) = g_row();
                rows.push((gg.val[i], jx, ju));
                if hh.val[i] < 0.0 {
                    let (jx, ju) = h_row();
                    rows.push((hh.val[i], jx, ju));
                }
            }
            PairBranch::BothZero => {
                let (jx, ju) = g_row();
                rows.push((gg.val[i], jx, ju));
                let (jx, ju) = h_row();
                rows.push((hh.val[i], jx, ju));
            }
        }
    }
    rows
}

/// Gauss–Newton drive of `var` toward the zero set of `assemble`'s rows,
/// under a projection onto simple bounds. Stops on a tiny residual, an
/// unproductive line search, or the iteration cap.
fn gn_drive<F, P>(assemble: F, project: P, start: DVector<f64>, max_iters: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    P: Fn(&mut DVector<f64>),
{
    let mut v = start;
    project(&mut v);
    for _ in 0..max_iters {
        let (r, jac) = assemble(&v);
        if r.len() == 0 || r.amax() <= 1e-20 {
            break;
        }
        let neg = -&r;
        let step = linalg::lstsq_min_norm(&jac, &neg);
        let base = r.norm_squared();
        let mut alpha = 1.0_f64;
        let mut improved = false;
        for _ in 0..30 {
            let mut cand = &v + &step * alpha;
            project(&mut cand);
            let (rc, _) = assemble(&cand);
            if rc.norm_squared() < base * (1.0 - 1e-4 * alpha) {
                v = cand;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    v
}

/// Feasibility of a candidate `(x, u)` for the sampled comparison: exact
/// complementarity (to sampling precision), `g ≤ 0`, `h = 0`.
fn sample_feasible(p: &OcpecProblem, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> bool {
    let gg = p.comp_g(t, x, u);
    let hh = p.comp_h(t, x, u);
    if compgeom::dist_c(gg.val.as_slice(), hh.val.as_slice()) > SAMPLE_FEAS_TOL {
        return false;
    }
    let ge = p.g(t, x, u);
    for i in 0..p.l1 {
        if ge.val[i] > SAMPLE_FEAS_TOL {
            return false;
        }
    }
    if p.l2 > 0 && p.h(t, x, u).val.amax() > SAMPLE_FEAS_TOL {
        return false;
    }
    true
}

/// Sampled audit of the pointwise-maximum condition along the arc.
pub fn weierstrass_check(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    arc: &AdjointArc,
    samples: usize,
    seed: u64,
) -> WeierstrassReport {
    weierstrass_check_with(p, traj, arc, samples, seed, None)
}

/// [`weierstrass_check`] with an optional override of the comparison radius.
///
/// At each node the trajectory state is first snapped onto the
/// complementarity cone (solver output sits a roundoff distance away, which
/// the square-root geometry of degenerate branches would otherwise amplify
/// into spurious improvements), then `samples` controls are drawn in the
/// comparison ball, repaired onto the branch manifold nearest to each draw,
/// and accepted only when exactly feasible and strictly inside the ball. A
/// node with no accepted sample is reported as unsampled rather than passed.
pub fn weierstrass_check_with(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    arc: &AdjointArc,
    samples: usize,
    seed: u64,
    radius_override: Option<f64>,
) -> WeierstrassReport {
    let radius = radius_override.unwrap_or(p.radius);
    let n_int = traj.intervals();
    let (lo, hi) = p.control_set.bounds(p.m);
    let project_u = |v: &mut DVector<f64>| {
        for j in 0..p.m {
            v[j] = v[j].clamp(lo[j], hi[j]);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut unsampled = Vec::new();
    let mut accepted = vec![0usize; n_int];
    for k in 0..n_int {
        let t = traj.ts[k];
        let u_star = traj.us[k].clone();
        let mut x = traj.xs[k].clone();

        // Snap the state onto the cone if the node pair is off it.
        let gg0 = p.comp_g(t, &x, &u_star);
        let hh0 = p.comp_h(t, &x, &u_star);
        if compgeom::dist_c(gg0.val.as_slice(), hh0.val.as_slice()) > 1e-12 {
            let branches = choose_branches(gg0.val.as_slice(), hh0.val.as_slice());
            x = gn_drive(
                |xv| {
                    let rows = branch_rows(p, t, xv, &u_star, &branches);
                    split_rows(rows, true)
                },
                |_| {},
                x,
                40,
            );
        }
        if !sample_feasible(p, t, &x, &u_star) {
            unsampled.push(k);
            continue;
        }

        let ham = |u: &DVector<f64>| {
            arc.p[k].dot(&p.dynamics(t, &x, u).val) - arc.lambda0 * p.running_cost(t, &x, u).val
        };
        let baseline = ham(&u_star);
        let r_samp = if radius.is_finite() {
            radius
        } else {
            4.0 * (1.0 + u_star.norm() + x.norm())
        };
        let mut worst: Option<(f64, DVector<f64>)> = None;
        for _ in 0..samples {
            let u0 = ball_point(&mut rng, &u_star, r_samp, p.m);
            let gg = p.comp_g(t, &x, &u0);
            let hh = p.comp_h(t, &x, &u0);
            let branches = choose_branches(gg.val.as_slice(), hh.val.as_slice());
            let u = gn_drive(
                |uv| {
                    let rows = branch_rows(p, t, &x, uv, &branches);
                    split_rows(rows, false)
                },
                project_u,
                u0,
                60,
            );
            if (&u - &u_star).norm() >= radius || !sample_feasible(p, t, &x, &u) {
                continue;
            }
            accepted[k] += 1;
            let improvement = ham(&u) - baseline;
            if improvement > DEFAULT_TOL_WEIERSTRASS
                && worst.as_ref().map_or(true, |(w, _)| improvement > *w)
            {
                worst = Some((improvement, u));
            }
        }
        if accepted[k] == 0 {
            unsampled.push(k);
        }
        if let Some((improvement, u)) = worst {
            violations.push(WeierstrassViolation {
                node: k,
                t,
                control: u.iter().copied().collect(),
                improvement,
            });
        }
    }
    WeierstrassReport {
        violations,
        unsampled,
        accepted,
        samples,
        radius: radius.is_finite().then_some(radius),
        tol: DEFAULT_TOL_WEIERSTRASS,
    }
}

/// Split assembled rows into a residual vector and the Jacobian in either the
/// state or the control variable.
fn split_rows(
    rows: Vec<(f64, DVector<f64>, DVector<f64>)>,
    in_x: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let nr = rows.len();
    let nc = rows
        .first()
        .map(|(_, jx, ju)| if in_x { jx.len() } else { ju.len() })
        .unwrap_or(0);
    let mut r = DVector::zeros(nr);
    let mut jac = DMatrix::zeros(nr, nc);
    for (i, (val, jx, ju)) in rows.into_iter().enumerate() {
        r[i] = val;
        let grad = if in_x { jx } else { ju };
        for c in 0..nc {
            jac[(i, c)] = grad[c];
        }
    }
    (r, jac)
}

/// Uniform draw from the ball of radius `r` around `center` (Box–Muller
/// direction, radius by inverse transform).
fn ball_point(rng: &mut ChaCha8Rng, center: &DVector<f64>, r: f64, m: usize) -> DVector<f64> {
    loop {
        let mut dir = DVector::zeros(m);
        for j in 0..m {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            dir[j] = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        let norm = dir.norm();
        if norm > 1e-9 {
            let radius = r * rng.random::<f64>().powf(1.0 / m as f64);
            return center + dir * (radius / norm);
        }
    }
}

/// Transform a direct-family multiplier set into Fritz John multipliers of
/// the inequality reformulation `G ≥ 0, H ≥ 0, GᵀH ≤ 0` and verify that
/// system at the node.
///
/// The transform shifts both complementarity multipliers by `e` times the
/// opposite function value, with `e` the smallest nonnegative scalar making
/// them componentwise nonnegative; the control-row residual is invariant
/// under the shift. Intended for nodes graded S with matching families — on
/// other nodes the sign checks simply fail.
pub fn classical_fj_crosscheck(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    arc: &AdjointArc,
    lam: &MultiplierSet,
    node: usize,
    tol_act: f64,
) -> Result<FjCrosscheck> {
    let n_int = traj.intervals();
    if node >= n_int || arc.p.len() != n_int + 1 {
        return Err(Error::InvalidArgument(format!(
            "node {node} out of range for {n_int} intervals"
        )));
    }
    let (t, x, u) = (traj.ts[node], &traj.xs[node], &traj.us[node]);
    let gg = p.comp_g(t, x, u);
    let hh = p.comp_h(t, x, u);
    let sets = compgeom::classify_indices(
        p.g(t, x, u).val.as_slice(),
        gg.val.as_slice(),
        hh.val.as_slice(),
        tol_act,
    )?;
    let sign_tol = 1e-8;

    let mut e = 0.0_f64;
    for &i in &sets.i_0plus {
        e = e.max(-lam.comp_g[i] / hh.val[i]);
    }
    for &i in &sets.i_plus0 {
        e = e.max(-lam.comp_h[i] / gg.val[i]);
    }
    let c = &lam.comp_g + &hh.val * e;
    let d = &lam.comp_h + &gg.val * e;

    let mut signs_ok = e >= 0.0;
    for i in 0..p.l {
        signs_ok = signs_ok && c[i] >= -sign_tol && d[i] >= -sign_tol;
    }
    for i in 0..p.l1 {
        signs_ok = signs_ok && lam.ineq[i] >= -sign_tol;
    }

    // Complementary slackness of the reformulation; activity tolerance
    // propagates linearly into the products.
    let slack_tol = sign_tol + tol_act * (e + amax_or0(&c).max(amax_or0(&d)));
    let mut slack_ok = true;
    for i in 0..p.l {
        slack_ok = slack_ok
            && (c[i] * gg.val[i]).abs() <= slack_tol
            && (d[i] * hh.val[i]).abs() <= slack_tol;
    }
    slack_ok = slack_ok && (e * gg.val.dot(&hh.val)).abs() <= slack_tol;

    let phi = p.dynamics(t, x, u);
    let fr = p.running_cost(t, x, u);
    let ge = p.g(t, x, u);
    let he = p.h(t, x, u);
    let mut r = -phi.ju.transpose() * &arc.p[node] + &fr.gu * arc.lambda0;
    r += ge.ju.transpose() * &lam.ineq;
    r += he.ju.transpose() * &lam.eq;
    r -= gg.ju.transpose() * &c;
    r -= hh.ju.transpose() * &d;
    r += (gg.ju.transpose() * &hh.val + hh.ju.transpose() * &gg.val) * e;
    // Components the control-box normal cone absorbs do not count.
    let (lo, hi) = p.control_set.bounds(p.m);
    let mut resid_sq = 0.0_f64;
    for j in 0..p.m {
        let contrib = if lo[j] == hi[j] {
            0.0
        } else if hi[j].is_finite() && (u[j] - hi[j]).abs() <= tol_act {
            r[j].max(0.0)
        } else if lo[j].is_finite() && (u[j] - lo[j]).abs() <= tol_act {
            (-r[j]).max(0.0)
        } else {
            r[j].abs()
        };
        resid_sq += contrib * contrib;
    }
    let residual = resid_sq.sqrt();
    Ok(FjCrosscheck {
        ok: signs_ok && slack_ok && residual <= sign_tol,
        residual,
        product_multiplier: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{uniform_grid, LinearLcsData};

    fn zero_traj(n: usize) -> DiscreteTrajectory {
        DiscreteTrajectory {
            ts: uniform_grid(0.0, 1.0, n),
            xs: vec![DVector::zeros(1); n + 1],
            us: vec![DVector::zeros(1); n],
        }
    }

    fn linear_traj(n: usize) -> DiscreteTrajectory {
        let ts = uniform_grid(0.0, 1.0, n);
        let xs = ts
            .iter()
            .map(|&t| DVector::from_element(1, 1.0 - t))
            .collect();
        DiscreteTrajectory {
            ts,
            xs,
            us: vec![DVector::zeros(1); n],
        }
    }

    fn linear_target_half() -> OcpecProblem {
        let data = LinearLcsData {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::identity(1, 1),
            c: DVector::from_element(1, -1.0),
            cc: DMatrix::identity(1, 1),
            d: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            target: DVector::from_element(1, -0.5),
        };
        OcpecProblem::from_linear(
            "linear-target-half".into(),
            0.0,
            1.0,
            data,
            EndpointComponent::Fixed(DVector::from_element(1, 1.0)),
            f64::INFINITY,
        )
        .unwrap()
    }

    #[test]
    fn label_lattice_orders_by_strength() {
        use StationarityLabel::*;
        assert!(Failed < W && W < C && C < M && M < S);
        assert_eq!(W.min(S), W);
    }

    #[test]
    fn counterexample_closed_form_families() {
        let p = OcpecProblem::counterexample();
        let n = 100;
        let traj = zero_traj(n);
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        assert!(arc.nontrivial());
        assert!(arc.transversality_residual <= 1e-9);
        assert!(arc.xi0.amax() <= 1e-9);
        assert!(arc.xi1.amax() <= 1e-12);
        for k in 0..=n {
            assert!(
                (arc.p[k][0] + traj.ts[k]).abs() <= 1e-9,
                "p[{k}] = {} vs {}",
                arc.p[k][0],
                -traj.ts[k]
            );
        }
        for k in 0..n {
            assert!(
                lam.residuals[k] <= 1e-10,
                "residual[{k}]={}",
                lam.residuals[k]
            );
            assert!((lam.sets[k].comp_g[0] + traj.ts[k]).abs() <= 1e-9);
            assert!((lam.sets[k].comp_h[0] - 1.0).abs() <= 1e-8);
        }

        let sets = node_index_sets(&p, &traj, DEFAULT_TOL_ACT).unwrap();
        let eta = hamiltonian_trajectory(&p, &traj, &arc, DEFAULT_TOL_ACT).unwrap();
        for k in 0..n {
            assert!(eta[k].feasible, "eta residual[{k}]={}", eta[k].residual);
            assert!(
                (eta[k].set.comp_g[0] + traj.ts[k]).abs() <= 1e-7,
                "etaG[{k}]={}",
                eta[k].set.comp_g[0]
            );
            assert!(
                eta[k].set.comp_h[0].abs() <= 1e-9,
                "etaH[{k}]={}",
                eta[k].set.comp_h[0]
            );
        }

        let report = classify(
            &lam,
            &eta,
            &sets,
            &traj.ts,
            DEFAULT_TOL_DIVERGENCE,
            DEFAULT_TOL_RECOVER,
        )
        .unwrap();
        assert_eq!(report.aggregate_lambda, StationarityLabel::W);
        assert_eq!(report.aggregate_eta, StationarityLabel::M);
        assert_eq!(report.nodes[0].label_lambda, StationarityLabel::S);
        assert_eq!(report.nodes[0].label_eta, StationarityLabel::S);
        assert_eq!(report.nodes[n / 2].label_lambda, StationarityLabel::W);
        assert_eq!(report.nodes[n / 2].label_eta, StationarityLabel::M);
        assert_eq!(report.divergence_fraction, 1.0);
        assert_eq!(report.divergent_nodes.len(), n);
    }

    #[test]
    fn adjoint_scales_with_cost_multiplier() {
        let p = OcpecProblem::counterexample();
        let traj = zero_traj(30);
        let (a1, l1) = recover_adjoint(&p, &traj, 1.0).unwrap();
        let (a2, l2) = recover_adjoint(&p, &traj, 2.5).unwrap();
        for k in 0..=30 {
            assert!((a2.p[k][0] - 2.5 * a1.p[k][0]).abs() <= 1e-9);
        }
        for k in 0..30 {
            assert!((l2.sets[k].comp_g[0] - 2.5 * l1.sets[k].comp_g[0]).abs() <= 1e-9);
            assert!((l2.sets[k].comp_h[0] - 2.5 * l1.sets[k].comp_h[0]).abs() <= 1e-9);
        }
    }

    #[test]
    fn linear_default_reduces_to_classical_adjoint() {
        let p = OcpecProblem::linear_lcs_default();
        let n = 50;
        let traj = linear_traj(n);
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        for k in 0..=n {
            assert!(arc.p[k].amax() <= 1e-10);
        }
        let sets = node_index_sets(&p, &traj, DEFAULT_TOL_ACT).unwrap();
        for k in 0..n {
            assert_eq!(sets[k].i_0plus, vec![0], "node {k}");
            assert!(lam.residuals[k] <= 1e-10);
            assert!(lam.sets[k].comp_g[0].abs() <= 1e-10);
            assert_eq!(lam.sets[k].comp_h[0], 0.0);
        }
        let eta = hamiltonian_trajectory(&p, &traj, &arc, DEFAULT_TOL_ACT).unwrap();
        let report = classify(&lam, &eta, &sets, &traj.ts, 1e-6, 1e-6).unwrap();
        assert_eq!(report.aggregate_lambda, StationarityLabel::S);
        assert_eq!(report.aggregate_eta, StationarityLabel::S);
        assert!(report.divergent_nodes.is_empty());
        assert_eq!(report.divergence_fraction, 0.0);
    }

    #[test]
    fn linear_costate_and_multiplier_identities() {
        let p = linear_target_half();
        let n = 40;
        let traj = linear_traj(n);
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        let h = traj.step();
        for k in 0..=n {
            assert!((arc.p[k][0] + 0.5).abs() <= 1e-10, "p[{k}]={}", arc.p[k][0]);
        }
        for k in 0..n {
            assert!((lam.sets[k].comp_g[0] - 0.5).abs() <= 1e-9);
            // discrete adjoint identity: ṗ = −Aᵀp − Cᵀ·etaH with A = 0, C = 1
            let pdot = (arc.p[k + 1][0] - arc.p[k][0]) / h;
            assert!((-lam.sets[k].comp_h[0] - pdot).abs() <= 1e-8);
            // control row: Bᵀp + muG + Dᵀ·etaH = 0 with B = D = 1
            let ctrl = arc.p[k][0] + lam.sets[k].comp_g[0] + lam.sets[k].comp_h[0];
            assert!(ctrl.abs() <= 1e-8);
        }
        let fj =
            classical_fj_crosscheck(&p, &traj, &arc, &lam.sets[10], 10, DEFAULT_TOL_ACT).unwrap();
        assert!(fj.ok, "residual {}", fj.residual);
        assert!(fj.residual <= 1e-10);
        assert_eq!(fj.product_multiplier, 0.0);
    }

    #[test]
    fn fj_crosscheck_rejects_sign_violating_family() {
        let p = OcpecProblem::counterexample();
        let traj = zero_traj(20);
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        // Interior node: muG = −t < 0 cannot be shifted nonnegative (e = 0 on
        // an all-degenerate node), so the transform reports failure even
        // though the row itself closes.
        let fj =
            classical_fj_crosscheck(&p, &traj, &arc, &lam.sets[10], 10, DEFAULT_TOL_ACT).unwrap();
        assert!(!fj.ok);
        assert!(fj.residual <= 1e-8);
        assert_eq!(fj.product_multiplier, 0.0);
        // Initial node: the family is (0, 1), which is already Fritz John.
        let fj0 =
            classical_fj_crosscheck(&p, &traj, &arc, &lam.sets[0], 0, DEFAULT_TOL_ACT).unwrap();
        assert!(fj0.ok, "residual {}", fj0.residual);
    }

    #[test]
    fn eta_enumeration_matches_brute_force() {
        let data = LinearLcsData {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::identity(2, 2),
            c: DVector::zeros(2),
            cc: DMatrix::identity(2, 2),
            d: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]),
            q: DVector::zeros(2),
            target: DVector::from_vec(vec![0.3, -0.2]),
        };
        let p = OcpecProblem::from_linear(
            "two-pair-degenerate".into(),
            0.0,
            1.0,
            data,
            EndpointComponent::Fixed(DVector::zeros(2)),
            f64::INFINITY,
        )
        .unwrap();
        let n = 8;
        let traj = DiscreteTrajectory {
            ts: uniform_grid(0.0, 1.0, n),
            xs: vec![DVector::zeros(2); n + 1],
            us: vec![DVector::zeros(2); n],
        };
        let (arc, _) = recover_adjoint(&p, &traj, 1.0).unwrap();
        for &k in &[0usize, 4, 7] {
            let eta = hamiltonian_multipliers(&p, &traj, &arc, k).unwrap();
            // Independent enumeration straight from the constraint Jacobians:
            // columns [−∇uG_0, −∇uG_1, −∇uH_0, −∇uH_1], branch digits in the
            // same base-3 little-endian order.
            let (t, x, u) = (traj.ts[k], &traj.xs[k], &traj.us[k]);
            let gg = p.comp_g(t, x, u);
            let hh = p.comp_h(t, x, u);
            let b = p.dynamics(t, x, u).ju.transpose() * &arc.p[k];
            let mut cols = DMatrix::zeros(2, 4);
            cols.view_mut((0, 0), (2, 2))
                .copy_from(&(-gg.ju.transpose()));
            cols.view_mut((0, 2), (2, 2))
                .copy_from(&(-hh.ju.transpose()));
            let mut best: Option<(f64, usize, DVector<f64>)> = None;
            for id in 0..9usize {
                let digits = [id % 3, id / 3];
                let mut keep = Vec::new();
                let mut flags = Vec::new();
                let mut kept_pairs = 0;
                for pair in 0..2 {
                    if digits[pair] == 0 {
                        kept_pairs += 1;
                    }
                }
                for pair in 0..2 {
                    if digits[pair] != 1 {
                        keep.push(pair);
                        flags.push(digits[pair] == 0);
                    }
                }
                for pair in 0..2 {
                    if digits[pair] != 2 {
                        keep.push(2 + pair);
                        flags.push(digits[pair] == 0);
                    }
                }
                let sub = cols.select_columns(keep.iter());
                let (m_sub, resid) =
                    solve_signed(&sub, &b, &DVector::zeros(keep.len()), &flags, RIDGE_EPS);
                let better = match &best {
                    None => true,
                    Some((br, bk, _)) => {
                        let tie = 1e-10 * (1.0 + br.min(resid));
                        resid < br - tie || ((resid - br).abs() <= tie && kept_pairs > *bk)
                    }
                };
                if better {
                    let mut full = DVector::zeros(4);
                    for (slot, &cidx) in keep.iter().enumerate() {
                        full[cidx] = m_sub[slot];
                    }
                    best = Some((resid, kept_pairs, full));
                }
            }
            let (brute_resid, _, brute) = best.unwrap();
            assert!(
                (eta.residual - brute_resid).abs() <= 1e-12,
                "node {k}: {} vs {}",
                eta.residual,
                brute_resid
            );
            for i in 0..2 {
                assert!(
                    (eta.set.comp_g[i] - brute[i]).abs() <= 1e-9,
                    "node {k} muG[{i}]"
                );
                assert!(
                    (eta.set.comp_h[i] - brute[2 + i]).abs() <= 1e-9,
                    "node {k} nuH[{i}]"
                );
            }
        }
    }

    #[test]
    fn divergence_fraction_saturates_on_counterexample() {
        let p = OcpecProblem::counterexample();
        let mut prev = 0.0;
        for &n in &[25usize, 50, 100, 200] {
            let traj = zero_traj(n);
            let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
            let sets = node_index_sets(&p, &traj, DEFAULT_TOL_ACT).unwrap();
            let eta = hamiltonian_trajectory(&p, &traj, &arc, DEFAULT_TOL_ACT).unwrap();
            let rep = classify(&lam, &eta, &sets, &traj.ts, 1e-6, 1e-6).unwrap();
            assert!(rep.divergence_fraction > 0.0);
            assert!(rep.divergence_fraction + 1e-12 >= prev);
            assert_eq!(rep.divergence_fraction, 1.0, "N = {n}");
            prev = rep.divergence_fraction;
        }
    }

    #[test]
    fn unclosed_control_row_is_flagged_not_thrown() {
        // ẋ = u with u pinned at 0.5 by H ≡ 0 (D = C = q = 0): no multiplier
        // column can absorb the costate, so every node is flagged as failed
        // and the pointwise family reports infeasibility — no exception.
        let data = LinearLcsData {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::identity(1, 1),
            c: DVector::zeros(1),
            cc: DMatrix::zeros(1, 1),
            d: DMatrix::zeros(1, 1),
            q: DVector::zeros(1),
            target: DVector::zeros(1),
        };
        let p = OcpecProblem::from_linear(
            "pinned-positive-control".into(),
            0.0,
            1.0,
            data,
            EndpointComponent::Fixed(DVector::from_element(1, 1.0)),
            f64::INFINITY,
        )
        .unwrap();
        let n = 10;
        let ts = uniform_grid(0.0, 1.0, n);
        let xs = ts
            .iter()
            .map(|&t| DVector::from_element(1, 1.0 + 0.5 * t))
            .collect();
        let traj = DiscreteTrajectory {
            ts,
            xs,
            us: vec![DVector::from_element(1, 0.5); n],
        };
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        let sets = node_index_sets(&p, &traj, DEFAULT_TOL_ACT).unwrap();
        let eta = hamiltonian_trajectory(&p, &traj, &arc, DEFAULT_TOL_ACT).unwrap();
        for k in 0..n {
            assert!(lam.residuals[k] > 1e-3);
            assert!(!eta[k].feasible);
        }
        let rep = classify(&lam, &eta, &sets, &traj.ts, 1e-6, 1e-6).unwrap();
        assert_eq!(rep.aggregate_lambda, StationarityLabel::Failed);
        assert_eq!(rep.aggregate_eta, StationarityLabel::Failed);
        assert_eq!(rep.nodes[5].label_lambda, StationarityLabel::Failed);
    }

    #[test]
    fn pointwise_maximum_clean_on_counterexample() {
        let p = OcpecProblem::counterexample();
        let traj = zero_traj(20);
        let (arc, _) = recover_adjoint(&p, &traj, 1.0).unwrap();
        let rep = weierstrass_check(&p, &traj, &arc, 16, 3);
        assert!(
            rep.violations.is_empty(),
            "violations: {:?}",
            rep.violations
        );
        assert!(rep.unsampled.is_empty(), "unsampled: {:?}", rep.unsampled);
        assert!(rep.accepted.iter().all(|&a| a > 0));
        assert_eq!(rep.radius, None);
    }

    #[test]
    fn pointwise_maximum_flags_hamiltonian_gain() {
        // Hand-built non-optimal pair: x ≡ 0.25 with u ≡ 0 and costate −1.
        // The feasible branch x = u² admits u = −0.5, improving p·u by 0.5.
        let p = OcpecProblem::counterexample();
        let n = 10;
        let traj = DiscreteTrajectory {
            ts: uniform_grid(0.0, 1.0, n),
            xs: vec![DVector::from_element(1, 0.25); n + 1],
            us: vec![DVector::zeros(1); n],
        };
        let arc = AdjointArc {
            p: vec![DVector::from_element(1, -1.0); n + 1],
            lambda0: 1.0,
            xi0: DVector::zeros(1),
            xi1: DVector::zeros(1),
            transversality_residual: 0.0,
        };
        let rep = weierstrass_check(&p, &traj, &arc, 24, 11);
        assert!(!rep.violations.is_empty());
        let worst = rep
            .violations
            .iter()
            .map(|v| v.improvement)
            .fold(0.0, f64::max);
        assert!((worst - 0.5).abs() <= 1e-6, "worst improvement {worst}");
        let v = rep
            .violations
            .iter()
            .find(|v| (v.improvement - 0.5).abs() <= 1e-6)
            .unwrap();
        assert!(
            (v.control[0] + 0.5).abs() <= 1e-6,
            "control {}",
            v.control[0]
        );
    }

    #[test]
    fn box_face_normal_component_is_separated() {
        // Same geometry as the unconstrained counterexample, but with the
        // optimal control pinned to the upper box face: the face normal must
        // absorb nothing while staying sign-feasible, leaving the reported
        // constraint multipliers unchanged.
        let mut p = OcpecProblem::counterexample();
        p.control_set = ControlSet::Box {
            lo: DVector::from_element(1, -2.0),
            hi: DVector::zeros(1),
        };
        let n = 40;
        let traj = zero_traj(n);
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        for k in 0..=n {
            assert!(
                (arc.p[k][0] + traj.ts[k]).abs() <= 1e-8,
                "p[{k}]={}",
                arc.p[k][0]
            );
        }
        for k in 0..n {
            assert!(
                lam.residuals[k] <= 1e-9,
                "residual[{k}]={}",
                lam.residuals[k]
            );
            assert!(
                (lam.sets[k].comp_g[0] + traj.ts[k]).abs() <= 1e-7,
                "muG[{k}]={}",
                lam.sets[k].comp_g[0]
            );
            assert!((lam.sets[k].comp_h[0] - 1.0).abs() <= 1e-7);
        }
    }

    #[test]
    fn endpoint_normal_cone_gaps() {
        let tol = 1e-6;
        let boxed = EndpointComponent::Box {
            lo: DVector::zeros(1),
            hi: DVector::from_element(1, 2.0),
        };
        let x_low = DVector::zeros(1);
        let x_mid = DVector::from_element(1, 1.0);
        // Lower face admits only nonpositive normals.
        assert_eq!(
            normal_cone_gap(&boxed, &x_low, &DVector::from_element(1, -3.0), tol),
            0.0
        );
        assert_eq!(
            normal_cone_gap(&boxed, &x_low, &DVector::from_element(1, 0.7), tol),
            0.7
        );
        // Interior admits only zero.
        assert_eq!(
            normal_cone_gap(&boxed, &x_mid, &DVector::from_element(1, -0.4), tol),
            0.4
        );
        let free = EndpointComponent::Free { dim: 1 };
        assert_eq!(
            normal_cone_gap(&free, &x_mid, &DVector::from_element(1, 0.3), tol),
            0.3
        );
        let fixed = EndpointComponent::Fixed(DVector::zeros(1));
        assert_eq!(
            normal_cone_gap(&fixed, &x_mid, &DVector::from_element(1, 9.0), tol),
            0.0
        );
    }

    #[test]
    fn recovery_rejects_infeasible_trajectories() {
        let p = OcpecProblem::counterexample();
        let n = 10;
        let ts = uniform_grid(0.0, 1.0, n);
        // States ignore the dynamics.
        let bad_defect = DiscreteTrajectory {
            ts: ts.clone(),
            xs: vec![DVector::zeros(1); n + 1],
            us: vec![DVector::from_element(1, 0.3); n],
        };
        assert!(matches!(
            recover_adjoint(&p, &bad_defect, 1.0),
            Err(Error::InvalidArgument(_))
        ));
        // Consistent dynamics but G = −u < 0 leaves the cone.
        let xs = ts
            .iter()
            .map(|&t| DVector::from_element(1, 0.5 * t))
            .collect();
        let off_cone = DiscreteTrajectory {
            ts,
            xs,
            us: vec![DVector::from_element(1, 0.5); n],
        };
        assert!(matches!(
            recover_adjoint(&p, &off_cone, 1.0),
            Err(Error::NotInCone { .. })
        ));
    }

    #[test]
    fn reports_serialize_to_json() {
        let p = OcpecProblem::counterexample();
        let traj = zero_traj(10);
        let (arc, lam) = recover_adjoint(&p, &traj, 1.0).unwrap();
        let sets = node_index_sets(&p, &traj, DEFAULT_TOL_ACT).unwrap();
        let eta = hamiltonian_trajectory(&p, &traj, &arc, DEFAULT_TOL_ACT).unwrap();
        let rep = classify(&lam, &eta, &sets, &traj.ts, 1e-6, 1e-6).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"aggregate_lambda\":\"W\""));
        assert!(json.contains("\"aggregate_eta\":\"M\""));
        assert!(json.contains("\"divergence_fraction\":1.0"));
        let wrep = weierstrass_check(&p, &traj, &arc, 4, 1);
        let wjson = serde_json::to_string(&wrep).unwrap();
        assert!(wjson.contains("\"radius\":null"));
    }
}
