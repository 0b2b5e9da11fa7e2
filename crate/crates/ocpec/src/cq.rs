//! Constraint-qualification audits at trajectory nodes.
//!
//! Four per-node diagnostics on the control-constraint system
//! `g ≤ 0, h = 0, 0 ≤ G ⊥ H ≥ 0, u ∈ U`:
//!
//! * **Gradient independence** ([`mpec_licq`]): the active u-gradients,
//!   counting both branches at degenerate complementarity indices, form a
//!   linearly independent family.
//! * **No abnormal multiplier** ([`no_abnormal_multiplier`]): no nonzero
//!   sign-respecting multiplier annihilates the control row with a zero cost
//!   multiplier. Holding is sufficient for quasi-normality; a witness leaves
//!   the question open, so the verdict vocabulary never claims failure.
//! * **Linear structure** ([`linear_condition`]): affine constraint data,
//!   under which the polyhedral error bound needs no further testing.
//! * **Bounded-slope constant** ([`kappa_estimate`]): the smallest κ with
//!   `‖multipliers‖ ≤ κ·‖control row‖` on each sign-branch face, combined
//!   with the state-Lipschitz constants of the constraint maps into the
//!   slope constant `k_S = κ·k_x`.

use crate::compgeom::{self, IndexSets};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{ControlSet, DiscreteTrajectory, OcpecProblem};
use crate::stationarity::DEFAULT_TOL_ACT;
use minilp::{ComparisonOp, OptimizationDirection, Problem as LpProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Singular-value gate for the gradient-independence test.
pub const DEFAULT_TOL_SV: f64 = 1e-8;
/// Control-row residual a near-kernel multiplier may leave (the same gate a
/// sampling oracle uses to accept a near-kernel direction).
const ROW_SLACK: f64 = 1e-9;
/// LP objective above which a multiplier counts as a nonzero witness.
const WITNESS_TOL: f64 = 1e-6;
/// Branch enumerations are capped at this many degenerate indices per node.
const MAX_DEGENERATE: usize = 8;
/// Tube radius for sampled state-Lipschitz estimation.
const TUBE_EPSILON: f64 = 1e-1;
/// Sample count for sampled state-Lipschitz estimation.
const TUBE_SAMPLES: usize = 1000;

/// Outcome of the gradient-independence test.
#[derive(Clone, Debug, Serialize)]
pub struct LicqVerdict {
    pub holds: bool,
    /// Least singular value of the stacked family; zero when the family
    /// already fails by counting, infinite when the family is empty.
    pub min_singular_value: f64,
    /// Number of stacked gradients.
    pub rows: usize,
    /// Control dimension the gradients live in.
    pub controls: usize,
}

/// A nonzero abnormal multiplier found by the branch LPs, in full block
/// coordinates (zeros at forced indices).
#[derive(Clone, Debug, Serialize)]
pub struct AbnormalWitness {
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
    pub comp_g: Vec<f64>,
    pub comp_h: Vec<f64>,
    /// Sign-branch index (base-3 digits over the degenerate indices) the
    /// witness was found in.
    pub branch: usize,
    /// Norm of the state-row combination of the witness. Nonzero means the
    /// witness also defeats the stronger condition whose conclusion is a
    /// vanishing state row, not merely a zero multiplier.
    pub state_row_norm: f64,
}

/// Quasi-normality verdict. A witness only means the sufficient condition
/// failed; quasi-normality itself involves a sequence condition that is not
/// decided computationally, so no failure claim is ever made.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum QuasiNormality {
    HoldsViaNoMultiplier,
    Inconclusive { witness: AbnormalWitness },
}

impl QuasiNormality {
    pub fn holds(&self) -> bool {
        matches!(self, QuasiNormality::HoldsViaNoMultiplier)
    }
}

/// Bounded-slope multiplier constant at a node.
#[derive(Clone, Debug, Serialize)]
pub struct KappaEstimate {
    /// Smallest valid κ, maximized over sign-branch faces; `None` encodes
    /// +∞ (some face map has a kernel direction).
    pub kappa: Option<f64>,
    /// Set when degenerate indices are present: each open cone branch is
    /// represented by the exact values on its two bounding faces rather
    /// than a full conic maximization.
    pub face_exact: bool,
    /// Number of face patterns examined.
    pub patterns: usize,
}

/// How the state-Lipschitz constant `k_x` was obtained.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SlopeMethod {
    /// Operator norms of the affine constraint data.
    ExactLinear,
    /// Maximum Jacobian norm over sampled states in a tube around the node.
    TubeSampled {
        epsilon: f64,
        samples: usize,
        seed: u64,
    },
}

/// Slope constant `k_S = κ·k_x` with its ingredients.
#[derive(Clone, Debug, Serialize)]
pub struct BoundedSlope {
    /// `None` encodes +∞ (inherited from an unbounded κ).
    pub k_s: Option<f64>,
    /// Combined state-Lipschitz constant of the constraint maps.
    pub k_x: f64,
    pub method: SlopeMethod,
}

/// All constraint-qualification diagnostics at one node.
#[derive(Clone, Debug, Serialize)]
pub struct CqVerdict {
    pub node: usize,
    pub t: f64,
    pub licq: LicqVerdict,
    pub quasi_normality: QuasiNormality,
    pub linear_condition: bool,
    pub kappa: KappaEstimate,
    pub bounded_slope: BoundedSlope,
}

/// Full-row-rank decision for a stacked gradient family: more rows than
/// columns fails by counting, otherwise the least singular value must clear
/// `tol_sv`. Returns the decision and the singular value it rests on.
pub fn full_row_rank(rows: &DMatrix<f64>, tol_sv: f64) -> (bool, f64) {
    if rows.nrows() == 0 {
        return (true, f64::INFINITY);
    }
    if rows.nrows() > rows.ncols() {
        return (false, 0.0);
    }
    let sv = linalg::min_singular_value(rows);
    (sv > tol_sv, sv)
}

fn node_sets(p: &OcpecProblem, traj: &DiscreteTrajectory, node: usize) -> Result<IndexSets> {
    if node >= traj.intervals() {
        return Err(Error::InvalidArgument(format!(
            "node {node} out of range for {} intervals",
            traj.intervals()
        )));
    }
    let (t, x, u) = (traj.ts[node], &traj.xs[node], &traj.us[node]);
    compgeom::classify_indices(
        p.g(t, x, u).val.as_slice(),
        p.comp_g(t, x, u).val.as_slice(),
        p.comp_h(t, x, u).val.as_slice(),
        DEFAULT_TOL_ACT,
    )
}

/// Whether each control component sits strictly inside its box, on a face,
/// or on a pinched (equal-bound) component.
#[derive(Clone, Copy, PartialEq)]
enum FaceStatus {
    Interior,
    Upper,
    Lower,
    Pinned,
}

fn face_status(p: &OcpecProblem, u: &DVector<f64>) -> Vec<FaceStatus> {
    match &p.control_set {
        ControlSet::Free => vec![FaceStatus::Interior; p.m],
        ControlSet::Box { lo, hi } => (0..p.m)
            .map(|j| {
                if lo[j] == hi[j] {
                    FaceStatus::Pinned
                } else if hi[j].is_finite() && (u[j] - hi[j]).abs() <= DEFAULT_TOL_ACT {
                    FaceStatus::Upper
                } else if lo[j].is_finite() && (u[j] - lo[j]).abs() <= DEFAULT_TOL_ACT {
                    FaceStatus::Lower
                } else {
                    FaceStatus::Interior
                }
            })
            .collect(),
    }
}

/// Gradient-independence test: stacks the u-gradients of the active
/// inequality rows, all equality rows, and the active complementarity
/// branches (both at degenerate indices) and checks full row rank.
pub fn mpec_licq(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    node: usize,
    tol_sv: f64,
) -> Result<LicqVerdict> {
    let sets = node_sets(p, traj, node)?;
    let (t, x, u) = (traj.ts[node], &traj.xs[node], &traj.us[node]);
    let ge = p.g(t, x, u);
    let he = p.h(t, x, u);
    let gg = p.comp_g(t, x, u);
    let hh = p.comp_h(t, x, u);
    let mut g_rows: Vec<usize> = sets.i_zero.clone();
    g_rows.sort_unstable();
    let mut g_idx: Vec<usize> = sets.i_0plus.iter().chain(&sets.i_00).copied().collect();
    g_idx.sort_unstable();
    let mut h_idx: Vec<usize> = sets.i_plus0.iter().chain(&sets.i_00).copied().collect();
    h_idx.sort_unstable();
    let n_rows = g_rows.len() + p.l2 + g_idx.len() + h_idx.len();
    let mut fam = DMatrix::zeros(n_rows, p.m);
    let mut r = 0;
    for &i in &g_rows {
        fam.row_mut(r).copy_from(&ge.ju.row(i));
        r += 1;
    }
    for i in 0..p.l2 {
        fam.row_mut(r).copy_from(&he.ju.row(i));
        r += 1;
    }
    for &i in &g_idx {
        fam.row_mut(r).copy_from(&gg.ju.row(i));
        r += 1;
    }
    for &i in &h_idx {
        fam.row_mut(r).copy_from(&hh.ju.row(i));
        r += 1;
    }
    let (holds, sv) = full_row_rank(&fam, tol_sv);
    Ok(LicqVerdict {
        holds,
        min_singular_value: sv,
        rows: n_rows,
        controls: p.m,
    })
}

/// One multiplier coordinate of the abnormal system: its block, its
/// u-gradient column, and its x-gradient column.
struct Coord {
    block: Block,
    ucol: DVector<f64>,
    xcol: DVector<f64>,
    /// Degenerate-pair position when the coordinate belongs to one, else
    /// `usize::MAX`.
    pair: usize,
    is_g: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    Ineq(usize),
    Eq(usize),
    CompG(usize),
    CompH(usize),
}

fn abnormal_coords(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    node: usize,
    sets: &IndexSets,
) -> Vec<Coord> {
    let (t, x, u) = (traj.ts[node], &traj.xs[node], &traj.us[node]);
    let ge = p.g(t, x, u);
    let he = p.h(t, x, u);
    let gg = p.comp_g(t, x, u);
    let hh = p.comp_h(t, x, u);
    let pair_of = |i: usize| sets.i_00.iter().position(|&d| d == i).unwrap_or(usize::MAX);
    let mut coords = Vec::new();
    let mut g_rows = sets.i_zero.clone();
    g_rows.sort_unstable();
    for &i in &g_rows {
        coords.push(Coord {
            block: Block::Ineq(i),
            ucol: ge.ju.row(i).transpose(),
            xcol: ge.jx.row(i).transpose(),
            pair: usize::MAX,
            is_g: false,
        });
    }
    for i in 0..p.l2 {
        coords.push(Coord {
            block: Block::Eq(i),
            ucol: he.ju.row(i).transpose(),
            xcol: he.jx.row(i).transpose(),
            pair: usize::MAX,
            is_g: false,
        });
    }
    let mut g_idx: Vec<usize> = sets.i_0plus.iter().chain(&sets.i_00).copied().collect();
    g_idx.sort_unstable();
    for &i in &g_idx {
        coords.push(Coord {
            block: Block::CompG(i),
            ucol: -gg.ju.row(i).transpose(),
            xcol: -gg.jx.row(i).transpose(),
            pair: pair_of(i),
            is_g: true,
        });
    }
    let mut h_idx: Vec<usize> = sets.i_plus0.iter().chain(&sets.i_00).copied().collect();
    h_idx.sort_unstable();
    for &i in &h_idx {
        coords.push(Coord {
            block: Block::CompH(i),
            ucol: -hh.ju.row(i).transpose(),
            xcol: -hh.jx.row(i).transpose(),
            pair: pair_of(i),
            is_g: false,
        });
    }
    coords
}

/// Search for a nonzero abnormal multiplier: a sign-respecting
/// `(λ, υ, μ, ν)` with `∇ᵤgᵀλ + ∇ᵤhᵀυ − ∇ᵤGᵀμ − ∇ᵤHᵀν` in the box normal
/// cone at `u`. The degenerate complementarity indices are enumerated over
/// the three sign branches (G-multiplier zero, H-multiplier zero, or both
/// nonnegative); each branch is probed by bounded LPs maximizing one
/// coordinate at a time, positive direction first.
pub fn no_abnormal_multiplier(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    node: usize,
) -> Result<QuasiNormality> {
    let sets = node_sets(p, traj, node)?;
    let d = sets.i_00.len();
    if d > MAX_DEGENERATE {
        return Err(Error::InvalidArgument(format!(
            "{d} degenerate indices at node {node}: branch enumeration is capped at {MAX_DEGENERATE}"
        )));
    }
    let coords = abnormal_coords(p, traj, node, &sets);
    let faces = face_status(p, &traj.us[node]);
    let branches = 3usize.pow(d as u32);
    for branch in 0..branches {
        let mut digit = vec![0usize; d];
        let mut rem = branch;
        for slot in digit.iter_mut() {
            *slot = rem % 3;
            rem /= 3;
        }
        // Branch-local variable set: digit 1 forces the G-multiplier to
        // zero, digit 2 the H-multiplier; digit 0 keeps both, nonnegative.
        let active: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.pair == usize::MAX
                    || (c.is_g && digit[c.pair] != 1)
                    || (!c.is_g && digit[c.pair] != 2)
            })
            .map(|(idx, _)| idx)
            .collect();
        if active.is_empty() {
            continue;
        }
        let bounds: Vec<(f64, f64)> = active
            .iter()
            .map(|&idx| {
                let c = &coords[idx];
                let nonneg = matches!(c.block, Block::Ineq(_))
                    || (c.pair != usize::MAX && digit[c.pair] == 0);
                if nonneg {
                    (0.0, 1.0)
                } else {
                    (-1.0, 1.0)
                }
            })
            .collect();
        for (pos, &idx) in active.iter().enumerate() {
            let signs: &[f64] = if bounds[pos].0 == 0.0 {
                &[1.0]
            } else {
                &[1.0, -1.0]
            };
            for &sign in signs {
                let mut lp = LpProblem::new(OptimizationDirection::Maximize);
                let vars: Vec<_> = active
                    .iter()
                    .enumerate()
                    .map(|(q, &a)| {
                        let obj = if a == idx { sign } else { 0.0 };
                        lp.add_var(obj, bounds[q])
                    })
                    .collect();
                for j in 0..p.m {
                    let expr: Vec<_> = active
                        .iter()
                        .enumerate()
                        .map(|(q, &a)| (vars[q], coords[a].ucol[j]))
                        .collect();
                    // Rows only need to vanish up to the near-kernel slack,
                    // so directions a solver leaves numerically degenerate
                    // are still found. An active face normal absorbs one
                    // signed direction entirely.
                    match faces[j] {
                        FaceStatus::Interior => {
                            lp.add_constraint(&expr[..], ComparisonOp::Le, ROW_SLACK);
                            lp.add_constraint(&expr[..], ComparisonOp::Ge, -ROW_SLACK);
                        }
                        FaceStatus::Upper => {
                            lp.add_constraint(&expr[..], ComparisonOp::Le, ROW_SLACK)
                        }
                        FaceStatus::Lower => {
                            lp.add_constraint(&expr[..], ComparisonOp::Ge, -ROW_SLACK)
                        }
                        FaceStatus::Pinned => {}
                    }
                }
                let sol = match lp.solve() {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                if sol.objective() <= WITNESS_TOL {
                    continue;
                }
                let mut ineq = vec![0.0; p.l1];
                let mut eq = vec![0.0; p.l2];
                let mut comp_g = vec![0.0; p.l];
                let mut comp_h = vec![0.0; p.l];
                let n = p.n;
                let mut xrow = DVector::zeros(n);
                for (q, &a) in active.iter().enumerate() {
                    let v = sol[vars[q]];
                    match coords[a].block {
                        Block::Ineq(i) => ineq[i] = v,
                        Block::Eq(i) => eq[i] = v,
                        Block::CompG(i) => comp_g[i] = v,
                        Block::CompH(i) => comp_h[i] = v,
                    }
                    xrow += &coords[a].xcol * v;
                }
                return Ok(QuasiNormality::Inconclusive {
                    witness: AbnormalWitness {
                        ineq,
                        eq,
                        comp_g,
                        comp_h,
                        branch,
                        state_row_norm: xrow.norm(),
                    },
                });
            }
        }
    }
    Ok(QuasiNormality::HoldsViaNoMultiplier)
}

/// Whether the constraint data is affine (directly or as the time-augmented
/// lift of an affine instance), in which case the polyhedral error bound
/// holds without further testing.
pub fn linear_condition(p: &OcpecProblem) -> bool {
    p.is_linear()
}

/// Bounded-slope multiplier constant: over every assignment of each
/// degenerate index to one of its two faces (G-multiplier zero or
/// H-multiplier zero), the reciprocal of the least singular value of the
/// u-gradient map on the remaining coordinates, with rows absorbed by
/// active box-face normals removed. `None` (+∞) when some face map has a
/// kernel; zero when a face leaves no multiplier coordinates at all.
pub fn kappa_estimate(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    node: usize,
) -> Result<KappaEstimate> {
    let sets = node_sets(p, traj, node)?;
    let d = sets.i_00.len();
    if d > MAX_DEGENERATE {
        return Err(Error::InvalidArgument(format!(
            "{d} degenerate indices at node {node}: face enumeration is capped at {MAX_DEGENERATE}"
        )));
    }
    let coords = abnormal_coords(p, traj, node, &sets);
    let faces = face_status(p, &traj.us[node]);
    let kept_rows: Vec<usize> = (0..p.m)
        .filter(|&j| faces[j] == FaceStatus::Interior)
        .collect();
    let patterns = 1usize << d;
    let mut kappa = 0.0_f64;
    let mut unbounded = false;
    for pat in 0..patterns {
        // Bit 0: the G-multiplier stays free and the H-multiplier is zero;
        // bit 1: the reverse.
        let active: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.pair == usize::MAX
                    || (c.is_g && (pat >> c.pair) & 1 == 0)
                    || (!c.is_g && (pat >> c.pair) & 1 == 1)
            })
            .map(|(idx, _)| idx)
            .collect();
        if active.is_empty() {
            continue;
        }
        if kept_rows.len() < active.len() {
            unbounded = true;
            continue;
        }
        let mut map = DMatrix::zeros(kept_rows.len(), active.len());
        for (cq, &a) in active.iter().enumerate() {
            for (rq, &j) in kept_rows.iter().enumerate() {
                map[(rq, cq)] = coords[a].ucol[j];
            }
        }
        let sv = linalg::min_singular_value(&map);
        // A face map singular below the near-kernel slack is the κ-side
        // image of an abnormal direction: report the bound as absent.
        if sv <= ROW_SLACK {
            unbounded = true;
        } else {
            kappa = kappa.max(1.0 / sv);
        }
    }
    Ok(KappaEstimate {
        kappa: (!unbounded).then_some(kappa),
        face_exact: d > 0,
        patterns,
    })
}

/// Combined state-Lipschitz constant of the constraint maps at a node:
/// exact operator norms for affine data, otherwise the maximum Jacobian
/// norm over a sampled tube of states around the node.
fn state_lipschitz(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    node: usize,
    seed: u64,
) -> (f64, SlopeMethod) {
    if let Ok(data) = p.linear_data() {
        // The complementarity function G is the control itself and g, h are
        // absent for this kind, so the state sensitivity is C alone.
        return (linalg::op_norm(&data.cc), SlopeMethod::ExactLinear);
    }
    let (t, x0, u) = (traj.ts[node], &traj.xs[node], &traj.us[node]);
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (node as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut kx = 0.0_f64;
    for _ in 0..TUBE_SAMPLES {
        let mut x = x0.clone();
        for j in 0..p.n {
            x[j] += TUBE_EPSILON * (2.0 * rng.random::<f64>() - 1.0);
        }
        let mut total = 0.0;
        let ge = p.g(t, &x, u);
        if p.l1 > 0 {
            total += linalg::op_norm(&ge.jx);
        }
        let he = p.h(t, &x, u);
        if p.l2 > 0 {
            total += linalg::op_norm(&he.jx);
        }
        total += linalg::op_norm(&p.comp_g(t, &x, u).jx);
        total += linalg::op_norm(&p.comp_h(t, &x, u).jx);
        kx = kx.max(total);
    }
    (
        kx,
        SlopeMethod::TubeSampled {
            epsilon: TUBE_EPSILON,
            samples: TUBE_SAMPLES,
            seed,
        },
    )
}

/// All constraint-qualification diagnostics at one node.
pub fn audit_node(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    node: usize,
    tol_sv: f64,
    seed: u64,
) -> Result<CqVerdict> {
    let licq = mpec_licq(p, traj, node, tol_sv)?;
    let quasi_normality = no_abnormal_multiplier(p, traj, node)?;
    let kappa = kappa_estimate(p, traj, node)?;
    let (k_x, method) = state_lipschitz(p, traj, node, seed);
    let bounded_slope = BoundedSlope {
        k_s: kappa.kappa.map(|k| k * k_x),
        k_x,
        method,
    };
    Ok(CqVerdict {
        node,
        t: traj.ts[node],
        licq,
        quasi_normality,
        linear_condition: linear_condition(p),
        kappa,
        bounded_slope,
    })
}

/// [`audit_node`] at every interval node.
pub fn audit_trajectory(
    p: &OcpecProblem,
    traj: &DiscreteTrajectory,
    tol_sv: f64,
    seed: u64,
) -> Result<Vec<CqVerdict>> {
    (0..traj.intervals())
        .map(|k| audit_node(p, traj, k, tol_sv, seed))
        .collect()
}
