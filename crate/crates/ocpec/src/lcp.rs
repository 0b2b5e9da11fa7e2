//! Finite linear complementarity problems: Lemke complementary pivoting and
//! explicit-Euler forward simulation of linear complementarity systems.
//!
//! An LCP instance asks for `z ≥ 0` with `w = Mz + q ≥ 0` and `zᵀw = 0`;
//! the simulator solves one such instance per time step to advance
//! `ẋ = Ax + Bu + c` with `0 ≤ u ⊥ Cx + Du + q ≥ 0`.

use crate::compgeom;
use crate::error::{Error, Result};
use crate::problem::{DiscreteTrajectory, EndpointComponent, OcpecProblem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One finite LCP: find `z ≥ 0`, `w = Mz + q ≥ 0`, `zᵀw = 0`.
#[derive(Clone, Debug)]
pub struct LcpInstance {
    pub m: DMatrix<f64>,
    pub q: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LcpStatus {
    /// Complementary solution found.
    Solved,
    /// The auxiliary ray left the feasible region; no solution certified
    /// (conclusive only for copositive-plus matrices).
    RayTermination,
    /// Pivot budget exhausted.
    CycleLimit,
}

impl std::fmt::Display for LcpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LcpStatus::Solved => "solved",
            LcpStatus::RayTermination => "ray_termination",
            LcpStatus::CycleLimit => "cycle_limit",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct LcpSolution {
    pub z: DVector<f64>,
    pub w: DVector<f64>,
    pub status: LcpStatus,
}

impl LcpSolution {
    /// Worst complementarity/nonnegativity defect of the pair (z, w).
    pub fn residual(&self) -> f64 {
        let zs: Vec<f64> = self.z.iter().cloned().collect();
        let ws: Vec<f64> = self.w.iter().cloned().collect();
        compgeom::dist_c(&zs, &ws)
    }
}

/// Lemke's complementary pivoting method with an all-ones covering vector.
///
/// Anti-cycling: after `3·l` cumulative degenerate pivots, ties in the ratio
/// test fall back to the least-basic-index (Bland) rule. Ties always prefer
/// letting the artificial variable leave, which terminates the run.
pub fn lemke(inst: &LcpInstance, max_pivots: usize) -> LcpSolution {
    let l = inst.q.len();
    assert_eq!(inst.m.nrows(), l);
    assert_eq!(inst.m.ncols(), l);
    assert!(max_pivots >= 1, "max_pivots must be at least 1");
    if l == 0 {
        return LcpSolution {
            z: DVector::zeros(0),
            w: DVector::zeros(0),
            status: LcpStatus::Solved,
        };
    }
    let scale = inst.m.amax().max(inst.q.amax()).max(1.0);
    let piv_tol = 1e-11 * scale;

    if inst.q.min() >= 0.0 {
        return LcpSolution {
            z: DVector::zeros(l),
            w: inst.q.clone(),
            status: LcpStatus::Solved,
        };
    }

    // Tableau columns: [w_0..w_{l-1} | z_0..z_{l-1} | z0 | rhs], encoding
    // w − M z − 1·z0 = q row-wise. Column ids: w_i = i, z_i = l+i, z0 = 2l.
    let zvar0 = 2 * l;
    let mut tab = DMatrix::zeros(l, 2 * l + 2);
    for i in 0..l {
        tab[(i, i)] = 1.0;
        for j in 0..l {
            tab[(i, l + j)] = -inst.m[(i, j)];
        }
        tab[(i, zvar0)] = -1.0;
        tab[(i, zvar0 + 1)] = inst.q[i];
    }
    let mut basis: Vec<usize> = (0..l).collect();

    // Initial pivot: bring z0 in on the most negative rhs row.
    let mut row = 0;
    for i in 1..l {
        if tab[(i, zvar0 + 1)] < tab[(row, zvar0 + 1)] {
            row = i;
        }
    }
    pivot(&mut tab, row, zvar0);
    let mut entering = complement(basis[row], l);
    basis[row] = zvar0;

    let mut degenerate_pivots = 0usize;
    for _ in 0..max_pivots {
        // Ratio test over rows with a positive pivot column entry.
        let rhs_col = zvar0 + 1;
        let mut candidates: Vec<usize> = Vec::new();
        let mut best_ratio = f64::INFINITY;
        for i in 0..l {
            let a = tab[(i, entering)];
            if a > piv_tol {
                let ratio = tab[(i, rhs_col)] / a;
                if ratio < best_ratio - 1e-12 * (1.0 + ratio.abs()) {
                    best_ratio = ratio;
                    candidates.clear();
                    candidates.push(i);
                } else if ratio <= best_ratio + 1e-12 * (1.0 + ratio.abs()) {
                    candidates.push(i);
                }
            }
        }
        if candidates.is_empty() {
            return extract(&tab, &basis, l, LcpStatus::RayTermination);
        }
        // Prefer driving the artificial variable out; otherwise break ties by
        // least basic id once degeneracy has been observed repeatedly.
        let r = if let Some(&rz) = candidates.iter().find(|&&i| basis[i] == zvar0) {
            rz
        } else if degenerate_pivots > 3 * l {
            *candidates
                .iter()
                .min_by_key(|&&i| basis[i])
                .expect("nonempty candidate set")
        } else {
            candidates[0]
        };
        if tab[(r, rhs_col)] <= piv_tol {
            degenerate_pivots += 1;
        }
        let leaving = basis[r];
        pivot(&mut tab, r, entering);
        basis[r] = entering;
        if leaving == zvar0 {
            return extract(&tab, &basis, l, LcpStatus::Solved);
        }
        entering = complement(leaving, l);
    }
    extract(&tab, &basis, l, LcpStatus::CycleLimit)
}

fn complement(var: usize, l: usize) -> usize {
    if var < l {
        var + l
    } else {
        var - l
    }
}

fn pivot(tab: &mut DMatrix<f64>, row: usize, col: usize) {
    let p = tab[(row, col)];
    let ncols = tab.ncols();
    for j in 0..ncols {
        tab[(row, j)] /= p;
    }
    for i in 0..tab.nrows() {
        if i == row {
            continue;
        }
        let f = tab[(i, col)];
        if f != 0.0 {
            for j in 0..ncols {
                tab[(i, j)] -= f * tab[(row, j)];
            }
        }
    }
}

fn extract(tab: &DMatrix<f64>, basis: &[usize], l: usize, status: LcpStatus) -> LcpSolution {
    let mut z = DVector::zeros(l);
    let mut w = DVector::zeros(l);
    for (i, &var) in basis.iter().enumerate() {
        let val = tab[(i, 2 * l + 1)];
        if var < l {
            w[var] = val;
        } else if var < 2 * l {
            z[var - l] = val;
        }
    }
    LcpSolution { z, w, status }
}

/// Projected Gauss–Seidel sweep solver; a slow, simple reference for
/// symmetric positive definite matrices.
pub fn projected_gauss_seidel(
    inst: &LcpInstance,
    tol: f64,
    max_sweeps: usize,
) -> Option<DVector<f64>> {
    let l = inst.q.len();
    let mut z = DVector::zeros(l);
    for _ in 0..max_sweeps {
        for i in 0..l {
            let mii = inst.m[(i, i)];
            if mii.abs() < 1e-300 {
                return None;
            }
            let row_dot = inst.m.row(i).transpose().dot(&z);
            z[i] = (z[i] - (row_dot + inst.q[i]) / mii).max(0.0);
        }
        let w = &inst.m * &z + &inst.q;
        let resid = (0..l).map(|i| z[i].min(w[i]).abs()).fold(0.0_f64, f64::max);
        if resid <= tol {
            return Some(z);
        }
    }
    None
}

/// Explicit-Euler forward simulation of a linear-kind instance on a uniform
/// grid with `nodes` grid points: at each step the control solves the LCP
/// `0 ≤ u ⊥ D u + (C x_k + q) ≥ 0`.
pub fn simulate_lcs(p: &OcpecProblem, nodes: usize) -> Result<DiscreteTrajectory> {
    let data = p.linear_data()?;
    if nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 grid nodes, got {nodes}"
        )));
    }
    let x0 = match &p.x0_set {
        EndpointComponent::Fixed(v) => v.clone(),
        EndpointComponent::Box { .. } => p.x0_set.representative(),
        EndpointComponent::Free { .. } => return Err(Error::FreeInitialState),
    };
    let intervals = nodes - 1;
    let ts = crate::problem::uniform_grid(p.t0, p.t1, intervals);
    let h = (p.t1 - p.t0) / intervals as f64;
    let l = data.q.len();
    let mut xs = Vec::with_capacity(nodes);
    let mut us = Vec::with_capacity(intervals);
    xs.push(x0);
    for k in 0..intervals {
        let xk = xs[k].clone();
        let inst = LcpInstance {
            m: data.d.clone(),
            q: &data.cc * &xk + &data.q,
        };
        let sol = lemke(&inst, 50 * l.max(1));
        if sol.status != LcpStatus::Solved {
            return Err(Error::LcpAtNode {
                node: k,
                status: sol.status.to_string(),
            });
        }
        let scale = inst.m.amax().max(inst.q.amax()).max(1.0);
        if sol.residual() > 1e-10 * scale {
            return Err(Error::LcpAtNode {
                node: k,
                status: format!("residual {:.3e} above tolerance", sol.residual()),
            });
        }
        let u = sol.z;
        let xn = &xk + (&data.a * &xk + &data.b * &u + &data.c) * h;
        us.push(u);
        xs.push(xn);
    }
    Ok(DiscreteTrajectory { ts, xs, us })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solve1(m: f64, q: f64) -> LcpSolution {
        lemke(
            &LcpInstance {
                m: DMatrix::from_element(1, 1, m),
                q: DVector::from_element(1, q),
            },
            50,
        )
    }

    #[test]
    fn scalar_negative_q() {
        let s = solve1(1.0, -1.0);
        assert_eq!(s.status, LcpStatus::Solved);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.w[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_nonnegative_q_is_trivial() {
        let s = solve1(1.0, 1.0);
        assert_eq!(s.status, LcpStatus::Solved);
        assert_eq!(s.z[0], 0.0);
        assert_eq!(s.w[0], 1.0);
    }

    #[test]
    fn two_by_two_interior_solution() {
        let inst = LcpInstance {
            m: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
            q: DVector::from_row_slice(&[-1.0, -1.0]),
        };
        let s = lemke(&inst, 100);
        assert_eq!(s.status, LcpStatus::Solved);
        assert_abs_diff_eq!(s.z[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.z[1], 1.0 / 3.0, epsilon = 1e-12);
        assert!(s.w.amax() < 1e-12);
    }

    #[test]
    fn solution_invariants_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let n = rng.random_range(1..=8);
            let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let m = &r * r.transpose() + DMatrix::identity(n, n) * (n as f64 * 0.5);
            let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let inst = LcpInstance { m, q };
            let s = lemke(&inst, 400);
            assert_eq!(s.status, LcpStatus::Solved, "trial {trial}");
            // Invariants: z ≥ −tol, w = Mz + q within tol, zᵀw ≈ 0.
            let scale = inst.m.amax().max(inst.q.amax()).max(1.0);
            let tol = 1e-10 * scale;
            assert!(s.z.min() >= -tol, "trial {trial}: z min {}", s.z.min());
            assert!(s.w.min() >= -tol, "trial {trial}: w min {}", s.w.min());
            let w2 = &inst.m * &s.z + &inst.q;
            assert!((&w2 - &s.w).amax() <= tol * 10.0, "trial {trial}");
            assert!(s.z.dot(&s.w).abs() <= tol * 10.0, "trial {trial}");
            // Agreement with the projected Gauss–Seidel reference.
            let z_ref = projected_gauss_seidel(&inst, 1e-12, 200_000)
                .expect("PGS converges on SPD instances");
            assert!(
                (&z_ref - &s.z).amax() < 1e-8,
                "trial {trial}: |z − z_ref|∞ = {}",
                (&z_ref - &s.z).amax()
            );
        }
    }

    #[test]
    fn ray_termination_when_no_solution_exists() {
        // M = [[0, -1], [0, 0]] with q = (-1, 1): row 1 forbids w_0 ≥ 0
        // unless z_1 large... actually w0 = -z1 - 1 < 0 for all z ≥ 0, so the
        // LCP has no solution and Lemke must terminate on a ray.
        let inst = LcpInstance {
            m: DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]),
            q: DVector::from_row_slice(&[-1.0, 1.0]),
        };
        let s = lemke(&inst, 100);
        assert_eq!(s.status, LcpStatus::RayTermination);
    }

    #[test]
    fn simulate_default_linear_instance() {
        let p = OcpecProblem::builtin("linear_lcs").unwrap();
        let traj = simulate_lcs(&p, 11).unwrap();
        assert_eq!(traj.ts.len(), 11);
        assert_eq!(traj.us.len(), 10);
        // x0 = 1 > 0 ⇒ u = 0 and x decreases by h = 0.1 each step.
        for k in 0..10 {
            assert_abs_diff_eq!(traj.xs[k][0], 1.0 - 0.1 * k as f64, epsilon = 1e-12);
            assert!(traj.us[k][0].abs() < 1e-12);
        }
        assert_abs_diff_eq!(traj.xs[10][0], 0.0, epsilon = 1e-12);
    }

    /// Closed-form per-regime recursion u_k = max(0, −x_k) as oracle.
    fn oracle_step(x: f64, h: f64) -> (f64, f64) {
        let u = (-x).max(0.0);
        (x + h * (u - 1.0), u)
    }

    #[test]
    fn simulate_from_negative_start_matches_recursion() {
        let mut p = OcpecProblem::builtin("linear_lcs").unwrap();
        p.x0_set = EndpointComponent::Fixed(DVector::from_element(1, -1.0));
        let traj = simulate_lcs(&p, 11).unwrap();
        let mut x = -1.0;
        for k in 0..10 {
            let (xn, u) = oracle_step(x, 0.1);
            assert_abs_diff_eq!(traj.us[k][0], u, epsilon = 1e-12);
            assert_abs_diff_eq!(traj.xs[k + 1][0], xn, epsilon = 1e-12);
            x = xn;
        }
        // First step from x = −1: u_0 = 1 and ẋ = 0 on the boundary.
        assert_abs_diff_eq!(traj.us[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traj.xs[1][0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn simulate_large_q_is_unforced_flow() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(
            &path,
            r#"{"kind":"linear_lcs","A":[[0.0]],"B":[[1.0]],"c":[-1.0],
                "C":[[1.0]],"D":[[1.0]],"q":[100.0],"T":[0.0],"x0":[1.0]}"#,
        )
        .unwrap();
        let p = OcpecProblem::load(&path).unwrap();
        let traj = simulate_lcs(&p, 21).unwrap();
        for u in &traj.us {
            assert_eq!(u[0], 0.0);
        }
        // Unforced affine flow ẋ = −1.
        assert_abs_diff_eq!(traj.xs[20][0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn simulate_complementarity_residual_at_every_node() {
        for (name, x0) in [("linear_lcs", 1.0), ("linear_lcs", -0.5)] {
            let mut p = OcpecProblem::builtin(name).unwrap();
            p.x0_set = EndpointComponent::Fixed(DVector::from_element(1, x0));
            let traj = simulate_lcs(&p, 50).unwrap();
            let data = p.linear_data().unwrap();
            for k in 0..traj.us.len() {
                let w = &data.cc * &traj.xs[k] + &data.d * &traj.us[k] + &data.q;
                let zs: Vec<f64> = traj.us[k].iter().cloned().collect();
                let ws: Vec<f64> = w.iter().cloned().collect();
                assert!(compgeom::dist_c(&zs, &ws) <= 1e-10, "node {k}");
            }
        }
    }

    #[test]
    fn grid_refinement_halves_terminal_error() {
        // Start below the complementarity manifold: x(t) = −1 + 0.5·e^{−t}
        // stays strictly negative, so the flow is smooth and Euler is O(h).
        let mut p = OcpecProblem::builtin("linear_lcs").unwrap();
        p.x0_set = EndpointComponent::Fixed(DVector::from_element(1, -0.5));
        let exact = -1.0 + 0.5 * (-1.0_f64).exp();
        let mut errs = Vec::new();
        for nodes in [11, 21, 41, 81] {
            let traj = simulate_lcs(&p, nodes).unwrap();
            errs.push((traj.xs[nodes - 1][0] - exact).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (1.6..=2.4).contains(&ratio),
                "refinement ratio {ratio} out of first-order range"
            );
        }
    }

    #[test]
    fn simulate_error_names_failing_node() {
        // D = −1 makes the per-step LCP unsolvable once Cx + q < 0.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(
            &path,
            r#"{"kind":"linear_lcs","A":[[0.0]],"B":[[1.0]],"c":[-1.0],
                "C":[[1.0]],"D":[[-1.0]],"q":[0.0],"T":[0.0],"x0":[-1.0]}"#,
        )
        .unwrap();
        let p = OcpecProblem::load(&path).unwrap();
        let err = simulate_lcs(&p, 11).unwrap_err();
        assert!(matches!(err, Error::LcpAtNode { node: 0, .. }), "{err}");
    }

    #[test]
    fn autonomized_simulation_matches_original() {
        let p = OcpecProblem::builtin("linear_lcs").unwrap();
        let pa = p.autonomize();
        let t1 = simulate_lcs(&p, 26).unwrap();
        let t2 = simulate_lcs(&pa, 26).unwrap();
        for k in 0..26 {
            assert_abs_diff_eq!(t2.xs[k][0], t1.xs[k][0], epsilon = 1e-12);
            // Clock state tracks grid time exactly.
            assert_abs_diff_eq!(t2.xs[k][1], t2.ts[k], epsilon = 1e-12);
        }
    }
}
