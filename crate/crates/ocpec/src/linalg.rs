//! Small dense linear-algebra helpers shared by the recovery and audit code:
//! minimum-norm least squares, sign-constrained least squares, nullspace
//! bases, and a tiny active-set solver for equality/inequality quadratic
//! programs. Everything here targets desk-scale systems (tens of unknowns).

use nalgebra::{DMatrix, DVector};

/// Relative cutoff under which a singular value is treated as zero.
pub(crate) const SV_CUTOFF: f64 = 1e-12;

/// Minimum-norm least-squares solution of `A x ≈ b` via SVD.
pub(crate) fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let ncols = a.ncols();
    if ncols == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(ncols);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = SV_CUTOFF * smax.max(1.0);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(ncols))
}

/// Approximate minimum-norm least-squares solve for use as a descent step:
/// ridge-damped normal equations on the smaller Gram side, Cholesky
/// factored. Roughly an order of magnitude cheaper than the SVD route; the
/// ridge perturbs the step by ~1e-15 relative, which a line search absorbs.
/// Falls back to [`lstsq_min_norm`] when the factorization fails.
pub(crate) fn ridge_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DVector::zeros(c);
    }
    if r <= c {
        let mut gram = a * a.transpose();
        let ridge = 1e-15 * (gram.trace() / r as f64).max(f64::MIN_POSITIVE);
        for i in 0..r {
            gram[(i, i)] += ridge;
        }
        if let Some(ch) = gram.cholesky() {
            return a.transpose() * ch.solve(b);
        }
    } else {
        let mut gram = a.tr_mul(a);
        let ridge = 1e-15 * (gram.trace() / c as f64).max(f64::MIN_POSITIVE);
        for i in 0..c {
            gram[(i, i)] += ridge;
        }
        if let Some(ch) = gram.cholesky() {
            return ch.solve(&(a.transpose() * b));
        }
    }
    lstsq_min_norm(a, b)
}

/// Moore–Penrose pseudoinverse with the same singular-value cutoff as
/// [`lstsq_min_norm`].
pub(crate) fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = SV_CUTOFF * smax.max(1.0);
    svd.pseudo_inverse(eps)
        .unwrap_or_else(|_| DMatrix::zeros(c, r))
}

/// Orthonormal basis of the nullspace of `a`, as matrix columns.
///
/// Computed from the symmetric eigendecomposition of `aᵀa` so that it works
/// for wide matrices too. `tol` is relative to the largest singular value.
/// Column signs are canonicalized (largest-magnitude entry positive) to keep
/// the basis deterministic across calls.
pub(crate) fn nullspace(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let k = a.ncols();
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    let gram = a.tr_mul(a);
    let eig = gram.symmetric_eigen();
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sv_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let cut = tol * sv_max.max(1.0);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut order: Vec<usize> = (0..k).collect();
    // Deterministic order: ascending singular value, then index.
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap().then(i.cmp(&j)));
    for &i in &order {
        if sv[i] <= cut {
            let mut v: DVector<f64> = eig.eigenvectors.column(i).into();
            canonical_sign(&mut v);
            cols.push(v);
        }
    }
    let mut out = DMatrix::zeros(k, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

fn canonical_sign(v: &mut DVector<f64>) {
    let mut idx = 0;
    let mut best = 0.0_f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        *v = -&*v;
    }
}

/// Smallest singular value of `a` (`+∞` for a matrix with no rows).
pub(crate) fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    let svd = a.clone().svd(false, false);
    // Thin SVD returns min(nrows, ncols) values; when rows exceed columns the
    // row family cannot have full row rank, which the caller detects by count.
    svd.singular_values.min()
}

/// Spectral norm of `a`.
pub(crate) fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Least squares `min ‖A x − b‖₂` with `x_i ≥ 0` for the flagged components,
/// the rest unconstrained. Lawson–Hanson active-set iteration with a
/// minimum-norm subproblem solve; deterministic tie-breaking.
///
/// Returns the solution; the attained residual can be recomputed by the
/// caller. Guarded by an iteration cap, after which the current (feasible)
/// iterate is returned.
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, nonneg: &[bool]) -> DVector<f64> {
    let k = a.ncols();
    assert_eq!(nonneg.len(), k);
    if k == 0 {
        return DVector::zeros(0);
    }
    let scale = b.amax().max(op_norm(a)).max(1.0);
    let tol = 1e-12 * scale;
    // passive[i]: variable allowed to move; sign-constrained vars start at 0.
    let mut passive: Vec<bool> = nonneg.iter().map(|&s| !s).collect();
    let mut x = DVector::zeros(k);
    if passive.iter().any(|&p| p) {
        x = solve_on_support(a, b, &passive);
    }
    let max_outer = 6 * k + 12;
    for _ in 0..max_outer {
        let resid = b - a * &x;
        let grad = a.tr_mul(&resid);
        // Most-improving constrained variable currently clamped at zero.
        let mut enter: Option<usize> = None;
        let mut best = tol;
        for i in 0..k {
            if nonneg[i] && !passive[i] && grad[i] > best {
                best = grad[i];
                enter = Some(i);
            }
        }
        let Some(j) = enter else {
            return x;
        };
        passive[j] = true;
        // Inner loop: restore feasibility of the passive-set solve.
        for _ in 0..max_outer {
            let z = solve_on_support(a, b, &passive);
            let mut alpha = 1.0_f64;
            let mut blocking: Vec<usize> = Vec::new();
            for i in 0..k {
                if passive[i] && nonneg[i] && z[i] <= tol {
                    let denom = x[i] - z[i];
                    if denom > 0.0 {
                        let step = x[i] / denom;
                        if step < alpha {
                            alpha = step;
                            blocking.clear();
                            blocking.push(i);
                        } else if (step - alpha).abs() <= 1e-15 {
                            blocking.push(i);
                        }
                    } else {
                        alpha = 0.0;
                        blocking.clear();
                        blocking.push(i);
                    }
                }
            }
            if blocking.is_empty() {
                x = z;
                break;
            }
            x = &x + (&z - &x) * alpha;
            for i in blocking {
                passive[i] = false;
                x[i] = 0.0;
            }
            for i in 0..k {
                if nonneg[i] && passive[i] && x[i] < 0.0 {
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

/// Minimum-norm LS solve restricted to the passive columns; clamped columns
/// contribute zero.
fn solve_on_support(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let k = a.ncols();
    let support: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
    let mut x = DVector::zeros(k);
    if support.is_empty() {
        return x;
    }
    let sub = a.select_columns(support.iter());
    let xs = lstsq_min_norm(&sub, b);
    for (slot, &i) in support.iter().enumerate() {
        x[i] = xs[slot];
    }
    x
}

/// A linear constraint `row · θ  (cmp)  rhs` for [`solve_qp`].
#[derive(Clone, Debug)]
pub(crate) struct QpConstraint {
    pub row: DVector<f64>,
    pub rhs: f64,
    pub kind: QpConstraintKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum QpConstraintKind {
    Eq,
    /// `row · θ ≥ rhs`
    Ge,
    /// `row · θ ≤ rhs`
    Le,
}

/// Minimize `½ θᵀQθ + gᵀθ` subject to linear equality and inequality rows.
///
/// Small dense active-set iteration: equalities stay active; inequalities are
/// activated when violated and dropped on a wrong-signed multiplier. `Q` must
/// be positive semidefinite; callers add a small diagonal regularizer so the
/// KKT systems stay solvable. If the constraints are inconsistent the result
/// is the best-effort least-squares point.
pub(crate) fn solve_qp(
    q: &DMatrix<f64>,
    g: &DVector<f64>,
    constraints: &[QpConstraint],
) -> DVector<f64> {
    let dim = q.nrows();
    let m = constraints.len();
    let mut active: Vec<bool> = constraints
        .iter()
        .map(|c| c.kind == QpConstraintKind::Eq)
        .collect();
    let feas_tol = 1e-10;
    let mut theta = DVector::zeros(dim);
    for _ in 0..(2 * m + 20).max(8) {
        let act: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
        let na = act.len();
        let mut kkt = DMatrix::zeros(dim + na, dim + na);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(q);
        for (j, &ci) in act.iter().enumerate() {
            for r in 0..dim {
                kkt[(r, dim + j)] = constraints[ci].row[r];
                kkt[(dim + j, r)] = constraints[ci].row[r];
            }
        }
        let mut rhs = DVector::zeros(dim + na);
        for r in 0..dim {
            rhs[r] = -g[r];
        }
        for (j, &ci) in act.iter().enumerate() {
            rhs[dim + j] = constraints[ci].rhs;
        }
        let sol = kkt
            .clone()
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| lstsq_min_norm(&kkt, &rhs));
        theta = sol.rows(0, dim).into();
        let duals: Vec<f64> = (0..na).map(|j| sol[dim + j]).collect();

        // Drop an active inequality with a wrong-signed multiplier.
        // Convention: with L = ½θQθ + gθ − Σ y_i (row_i·θ − rhs_i), a binding
        // `≥` row needs y ≥ 0 and a binding `≤` row needs y ≤ 0.
        let mut drop: Option<usize> = None;
        let mut worst = -1e-9;
        for (j, &ci) in act.iter().enumerate() {
            let signed = match constraints[ci].kind {
                QpConstraintKind::Eq => continue,
                QpConstraintKind::Ge => duals[j],
                QpConstraintKind::Le => -duals[j],
            };
            if signed < worst {
                worst = signed;
                drop = Some(ci);
            }
        }
        // Add the most-violated inactive inequality.
        let mut add: Option<usize> = None;
        let mut most = feas_tol;
        for (i, c) in constraints.iter().enumerate() {
            if active[i] {
                continue;
            }
            let v = c.row.dot(&theta) - c.rhs;
            let viol = match c.kind {
                QpConstraintKind::Eq => v.abs(),
                QpConstraintKind::Ge => (-v).max(0.0),
                QpConstraintKind::Le => v.max(0.0),
            };
            if viol > most {
                most = viol;
                add = Some(i);
            }
        }
        match (add, drop) {
            (Some(i), _) => active[i] = true,
            (None, Some(i)) => active[i] = false,
            (None, None) => break,
        }
    }
    theta
}
