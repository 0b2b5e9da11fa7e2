//! Problem instances: dynamics, costs, constraint oracles with exact
//! Jacobians, control/endpoint sets, builtin instances, the autonomization
//! transform, and JSON loading.
//!
//! An instance describes
//!
//! ```text
//! min  ∫ F(t,x,u) dt + f(x(t0), x(t1))
//! s.t. ẋ = φ(t,x,u),   g(t,x,u) ≤ 0,   h(t,x,u) = 0,
//!      0 ≤ G(t,x,u) ⊥ H(t,x,u) ≥ 0,
//!      u(t) ∈ U(t),    (x(t0), x(t1)) ∈ E.
//! ```
//!
//! Oracles are enum-dispatched over a builtin registry plus a matrix-driven
//! linear kind; there is deliberately no runtime expression parser, so every
//! derivative in the system is auditable closed-form code.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::Path;

/// Value of a vector-valued oracle together with its Jacobians with respect
/// to the state (`jx`, rows×n) and the control (`ju`, rows×m).
#[derive(Clone, Debug)]
pub struct Eval {
    pub val: DVector<f64>,
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
}

/// Value of a scalar oracle together with its gradients in x and u.
#[derive(Clone, Debug)]
pub struct ScalarEval {
    pub val: f64,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
}

/// Endpoint-cost value with gradients in the initial and terminal states.
#[derive(Clone, Debug)]
pub struct EndpointEval {
    pub val: f64,
    pub gx0: DVector<f64>,
    pub gx1: DVector<f64>,
}

/// Admissible control set `U(t)` (time-invariant by construction).
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSet {
    /// All of ℝᵐ.
    Free,
    /// Fixed box `[lo, hi]` componentwise; entries may be infinite.
    Box { lo: DVector<f64>, hi: DVector<f64> },
}

impl ControlSet {
    /// Componentwise bounds; the free set maps to infinite bounds.
    pub fn bounds(&self, m: usize) -> (DVector<f64>, DVector<f64>) {
        match self {
            ControlSet::Free => (
                DVector::from_element(m, f64::NEG_INFINITY),
                DVector::from_element(m, f64::INFINITY),
            ),
            ControlSet::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }
}

/// One endpoint of the trajectory: pinned, unconstrained, or boxed.
#[derive(Clone, Debug, PartialEq)]
pub enum EndpointComponent {
    Fixed(DVector<f64>),
    Free { dim: usize },
    Box { lo: DVector<f64>, hi: DVector<f64> },
}

impl EndpointComponent {
    pub fn dim(&self) -> usize {
        match self {
            EndpointComponent::Fixed(v) => v.len(),
            EndpointComponent::Free { dim } => *dim,
            EndpointComponent::Box { lo, .. } => lo.len(),
        }
    }

    /// Uniform box view: fixed components become a pinched box, free ones an
    /// infinite box.
    pub fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        match self {
            EndpointComponent::Fixed(v) => (v.clone(), v.clone()),
            EndpointComponent::Free { dim } => (
                DVector::from_element(*dim, f64::NEG_INFINITY),
                DVector::from_element(*dim, f64::INFINITY),
            ),
            EndpointComponent::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    /// A deterministic representative point inside the set (used to seed
    /// simulations and solver initializations).
    pub fn representative(&self) -> DVector<f64> {
        let (lo, hi) = self.bounds();
        DVector::from_iterator(
            lo.len(),
            lo.iter().zip(hi.iter()).map(|(&a, &b)| {
                if a.is_finite() && b.is_finite() {
                    0.5 * (a + b)
                } else if a.is_finite() {
                    a
                } else if b.is_finite() {
                    b
                } else {
                    0.0
                }
            }),
        )
    }
}

/// Matrix data of a linear complementarity system
/// `ẋ = Ax + Bu + c`, `0 ≤ u ⊥ Cx + Du + q ≥ 0`
/// with terminal cost `½‖x(t1) − target‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLcsData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub cc: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q: DVector<f64>,
    pub target: DVector<f64>,
}

#[derive(Clone, Debug)]
enum ProblemKind {
    /// min x(t1), ẋ = u, 0 ≤ −u ⊥ x − u² ≥ 0, x(t0) ≤ 0.
    Counterexample,
    /// Linear complementarity system with quadratic terminal cost.
    LinearLcs(LinearLcsData),
    /// Time-augmented wrapper: state (x, σ) with σ̇ = 1, σ(t0) = t0.
    Autonomized(Box<OcpecProblem>),
}

/// A complete instance of the control problem. Immutable after construction;
/// all oracles are pure functions of their arguments.
#[derive(Clone, Debug)]
pub struct OcpecProblem {
    pub name: String,
    pub t0: f64,
    pub t1: f64,
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Number of complementarity pairs.
    pub l: usize,
    /// Number of inequality rows `g ≤ 0`.
    pub l1: usize,
    /// Number of equality rows `h = 0`.
    pub l2: usize,
    pub control_set: ControlSet,
    pub x0_set: EndpointComponent,
    pub x1_set: EndpointComponent,
    /// Comparison radius for the pointwise minimum-principle check;
    /// a positive constant or `+∞`.
    pub radius: f64,
    kind: ProblemKind,
}

/// One multiplier family at a single node: multipliers for the inequality
/// rows, equality rows, and the two complementarity function families.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierSet {
    /// λᵍ — for `g ≤ 0` (length l1).
    pub ineq: DVector<f64>,
    /// λʰ — for `h = 0` (length l2).
    pub eq: DVector<f64>,
    /// Multiplier on G (length l).
    pub comp_g: DVector<f64>,
    /// Multiplier on H (length l).
    pub comp_h: DVector<f64>,
}

impl MultiplierSet {
    pub fn zeros(l1: usize, l2: usize, l: usize) -> Self {
        MultiplierSet {
            ineq: DVector::zeros(l1),
            eq: DVector::zeros(l2),
            comp_g: DVector::zeros(l),
            comp_h: DVector::zeros(l),
        }
    }
}

/// Value and (x,u)-gradient of the constraint aggregate
/// `Ψ = gᵀλ + hᵀυ − Gᵀμ − Hᵀν`.
#[derive(Clone, Debug)]
pub struct PsiEval {
    pub val: f64,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
}

/// Uniform time grid with node states and per-interval controls.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTrajectory {
    /// Node times, length N+1.
    pub ts: Vec<f64>,
    /// States at nodes, length N+1.
    pub xs: Vec<DVector<f64>>,
    /// Controls on intervals [t_k, t_{k+1}), length N.
    pub us: Vec<DVector<f64>>,
}

impl DiscreteTrajectory {
    /// Number of intervals N.
    pub fn intervals(&self) -> usize {
        self.us.len()
    }

    /// Uniform step length.
    pub fn step(&self) -> f64 {
        if self.ts.len() < 2 {
            0.0
        } else {
            (self.ts[self.ts.len() - 1] - self.ts[0]) / (self.ts.len() - 1) as f64
        }
    }
}

/// Uniform grid of `n_intervals + 1` node times on `[t0, t1]`; endpoints are
/// reproduced exactly.
pub fn uniform_grid(t0: f64, t1: f64, n_intervals: usize) -> Vec<f64> {
    let n = n_intervals.max(1);
    let h = (t1 - t0) / n as f64;
    let mut ts: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * h).collect();
    ts[n] = t1;
    ts
}

/// Central-difference derivative of a vector map with respect to time;
/// used to route explicit t-dependence through the augmented clock state.
fn time_derivative<Ff>(f: Ff, t: f64) -> DVector<f64>
where
    Ff: Fn(f64) -> DVector<f64>,
{
    let s = 1e-7 * (1.0 + t.abs());
    (f(t + s) - f(t - s)) / (2.0 * s)
}

impl OcpecProblem {
    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    /// Builtin registry. Known names: `counterexample`, `linear_lcs`
    /// (the latter with its default scalar data).
    pub fn builtin(name: &str) -> Result<OcpecProblem> {
        match name {
            "counterexample" => Ok(Self::counterexample()),
            "linear_lcs" => Ok(Self::linear_lcs_default()),
            other => Err(Error::UnknownBuiltin(other.to_string())),
        }
    }

    /// min x(t1) subject to ẋ = u, 0 ≤ −u ⊥ x − u² ≥ 0, x(0) ≤ 0 on [0, 1].
    ///
    /// The unique feasible arc is (x, u) ≡ 0; the two multiplier recovery
    /// routes disagree along it, which is exactly what the pipeline is built
    /// to detect.
    pub fn counterexample() -> OcpecProblem {
        OcpecProblem {
            name: "counterexample".to_string(),
            t0: 0.0,
            t1: 1.0,
            n: 1,
            m: 1,
            l: 1,
            l1: 0,
            l2: 0,
            control_set: ControlSet::Free,
            x0_set: EndpointComponent::Box {
                lo: DVector::from_element(1, f64::NEG_INFINITY),
                hi: DVector::from_element(1, 0.0),
            },
            x1_set: EndpointComponent::Free { dim: 1 },
            radius: f64::INFINITY,
            kind: ProblemKind::Counterexample,
        }
    }

    /// Scalar linear complementarity system with A=0, B=1, c=−1, C=1, D=1,
    /// q=0, target 0, x(0) = 1 fixed, horizon [0, 1].
    pub fn linear_lcs_default() -> OcpecProblem {
        let data = LinearLcsData {
            a: DMatrix::from_element(1, 1, 0.0),
            b: DMatrix::from_element(1, 1, 1.0),
            c: DVector::from_element(1, -1.0),
            cc: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::from_element(1, 1, 1.0),
            q: DVector::from_element(1, 0.0),
            target: DVector::from_element(1, 0.0),
        };
        Self::from_linear(
            "linear_lcs".to_string(),
            0.0,
            1.0,
            data,
            EndpointComponent::Fixed(DVector::from_element(1, 1.0)),
            f64::INFINITY,
        )
        .expect("default linear data is consistent")
    }

    /// Build a linear-kind instance from matrix data, validating all shapes.
    pub fn from_linear(
        name: String,
        t0: f64,
        t1: f64,
        data: LinearLcsData,
        x0_set: EndpointComponent,
        radius: f64,
    ) -> Result<OcpecProblem> {
        let n = data.c.len();
        let l = data.q.len();
        // The complementarity function G is the control itself, so the
        // control dimension equals the pair count.
        let m = l;
        let check = |field: &'static str, rows: usize, cols: usize, er: usize, ec: usize| {
            if rows != er || cols != ec {
                Err(Error::DimensionMismatch {
                    field,
                    expected: er * ec.max(1),
                    got: rows * cols.max(1),
                })
            } else {
                Ok(())
            }
        };
        check("A", data.a.nrows(), data.a.ncols(), n, n)?;
        check("B", data.b.nrows(), data.b.ncols(), n, m)?;
        check("C", data.cc.nrows(), data.cc.ncols(), l, n)?;
        check("D", data.d.nrows(), data.d.ncols(), l, m)?;
        if data.target.len() != n {
            return Err(Error::DimensionMismatch {
                field: "T",
                expected: n,
                got: data.target.len(),
            });
        }
        if x0_set.dim() != n {
            return Err(Error::DimensionMismatch {
                field: "x0",
                expected: n,
                got: x0_set.dim(),
            });
        }
        let p = OcpecProblem {
            name,
            t0,
            t1,
            n,
            m,
            l,
            l1: 0,
            l2: 0,
            control_set: ControlSet::Free,
            x0_set,
            x1_set: EndpointComponent::Free { dim: n },
            radius,
            kind: ProblemKind::LinearLcs(data),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t1) {
            return Err(Error::InvalidField {
                field: "t0/t1",
                message: format!("need t0 < t1, got [{}, {}]", self.t0, self.t1),
            });
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidField {
                field: "radius",
                message: format!("need a positive radius, got {}", self.radius),
            });
        }
        if self.x0_set.dim() != self.n || self.x1_set.dim() != self.n {
            return Err(Error::DimensionMismatch {
                field: "endpoint",
                expected: self.n,
                got: self.x0_set.dim().max(self.x1_set.dim()),
            });
        }
        if let ControlSet::Box { lo, hi } = &self.control_set {
            if lo.len() != self.m || hi.len() != self.m {
                return Err(Error::DimensionMismatch {
                    field: "control_set",
                    expected: self.m,
                    got: lo.len().max(hi.len()),
                });
            }
        }
        Ok(())
    }

    /// Matrix data when the instance is of the linear kind (directly or as
    /// the time-augmented lift of a linear instance).
    pub fn linear_data(&self) -> Result<LinearLcsData> {
        match &self.kind {
            ProblemKind::LinearLcs(d) => Ok(d.clone()),
            ProblemKind::Autonomized(inner) => {
                let d = inner.linear_data()?;
                let n = inner.n;
                // Lift: clock row σ̇ = 1 appended; constraint rows gain a
                // zero σ-column because the data is time-invariant.
                let mut a = DMatrix::zeros(n + 1, n + 1);
                a.view_mut((0, 0), (n, n)).copy_from(&d.a);
                let mut b = DMatrix::zeros(n + 1, d.b.ncols());
                b.view_mut((0, 0), (n, d.b.ncols())).copy_from(&d.b);
                let mut c = DVector::zeros(n + 1);
                c.rows_mut(0, n).copy_from(&d.c);
                c[n] = 1.0;
                let mut cc = DMatrix::zeros(d.cc.nrows(), n + 1);
                cc.view_mut((0, 0), (d.cc.nrows(), n)).copy_from(&d.cc);
                let mut target = DVector::zeros(n + 1);
                target.rows_mut(0, n).copy_from(&d.target);
                target[n] = self.t1;
                Ok(LinearLcsData {
                    a,
                    b,
                    c,
                    cc,
                    d: d.d,
                    q: d.q,
                    target,
                })
            }
            _ => Err(Error::NotLinear),
        }
    }

    /// Whether [`OcpecProblem::linear_data`] succeeds.
    pub fn is_linear(&self) -> bool {
        self.linear_data().is_ok()
    }

    // ------------------------------------------------------------------
    // Oracles
    // ------------------------------------------------------------------

    /// Dynamics φ with Jacobians.
    pub fn dynamics(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Eval {
        // Builtin kinds are autonomous; the augmented kind reads its clock
        // state instead of `t`. The parameter stays for API uniformity.
        let _ = t;
        match &self.kind {
            ProblemKind::Counterexample => Eval {
                val: u.clone(),
                jx: DMatrix::zeros(1, 1),
                ju: DMatrix::identity(1, 1),
            },
            ProblemKind::LinearLcs(d) => Eval {
                val: &d.a * x + &d.b * u + &d.c,
                jx: d.a.clone(),
                ju: d.b.clone(),
            },
            ProblemKind::Autonomized(inner) => {
                let (xi, sigma) = split_aug(x, inner.n);
                let e = inner.dynamics(sigma, &xi, u);
                let tcol = time_derivative(|s| inner.dynamics(s, &xi, u).val, sigma);
                let mut val = DVector::zeros(inner.n + 1);
                val.rows_mut(0, inner.n).copy_from(&e.val);
                val[inner.n] = 1.0;
                let mut jx = DMatrix::zeros(inner.n + 1, inner.n + 1);
                jx.view_mut((0, 0), (inner.n, inner.n)).copy_from(&e.jx);
                jx.view_mut((0, inner.n), (inner.n, 1)).copy_from(&tcol);
                let mut ju = DMatrix::zeros(inner.n + 1, inner.m);
                ju.view_mut((0, 0), (inner.n, inner.m)).copy_from(&e.ju);
                Eval { val, jx, ju }
            }
        }
    }

    /// Running cost F with gradients.
    pub fn running_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> ScalarEval {
        let _ = t;
        match &self.kind {
            ProblemKind::Counterexample | ProblemKind::LinearLcs(_) => ScalarEval {
                val: 0.0,
                gx: DVector::zeros(self.n),
                gu: DVector::zeros(self.m),
            },
            ProblemKind::Autonomized(inner) => {
                let (xi, sigma) = split_aug(x, inner.n);
                let e = inner.running_cost(sigma, &xi, u);
                let tder = time_derivative(
                    |s| DVector::from_element(1, inner.running_cost(s, &xi, u).val),
                    sigma,
                )[0];
                let mut gx = DVector::zeros(inner.n + 1);
                gx.rows_mut(0, inner.n).copy_from(&e.gx);
                gx[inner.n] = tder;
                ScalarEval {
                    val: e.val,
                    gx,
                    gu: e.gu,
                }
            }
        }
    }

    /// Endpoint cost f with gradients.
    pub fn endpoint_cost(&self, x0: &DVector<f64>, x1: &DVector<f64>) -> EndpointEval {
        match &self.kind {
            ProblemKind::Counterexample => EndpointEval {
                val: x1[0],
                gx0: DVector::zeros(1),
                gx1: DVector::from_element(1, 1.0),
            },
            ProblemKind::LinearLcs(d) => {
                let diff = x1 - &d.target;
                EndpointEval {
                    val: 0.5 * diff.norm_squared(),
                    gx0: DVector::zeros(self.n),
                    gx1: diff,
                }
            }
            ProblemKind::Autonomized(inner) => {
                let (x0i, _) = split_aug(x0, inner.n);
                let (x1i, _) = split_aug(x1, inner.n);
                let e = inner.endpoint_cost(&x0i, &x1i);
                let mut gx0 = DVector::zeros(inner.n + 1);
                gx0.rows_mut(0, inner.n).copy_from(&e.gx0);
                let mut gx1 = DVector::zeros(inner.n + 1);
                gx1.rows_mut(0, inner.n).copy_from(&e.gx1);
                EndpointEval {
                    val: e.val,
                    gx0,
                    gx1,
                }
            }
        }
    }

    /// Inequality rows g ≤ 0.
    pub fn g(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Eval {
        let _ = t;
        match &self.kind {
            ProblemKind::Counterexample | ProblemKind::LinearLcs(_) => {
                Eval::empty_rows(self.n, self.m)
            }
            ProblemKind::Autonomized(inner) => {
                let (xi, sigma) = split_aug(x, inner.n);
                let e = inner.g(sigma, &xi, u);
                let tcol = time_derivative(|s| inner.g(s, &xi, u).val, sigma);
                lift_rows(e, tcol, inner.n)
            }
        }
    }

    /// Equality rows h = 0.
    pub fn h(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Eval {
        let _ = t;
        match &self.kind {
            ProblemKind::Counterexample | ProblemKind::LinearLcs(_) => {
                Eval::empty_rows(self.n, self.m)
            }
            ProblemKind::Autonomized(inner) => {
                let (xi, sigma) = split_aug(x, inner.n);
                let e = inner.h(sigma, &xi, u);
                let tcol = time_derivative(|s| inner.h(s, &xi, u).val, sigma);
                lift_rows(e, tcol, inner.n)
            }
        }
    }

    /// First complementarity family G (the pair is `0 ≤ G ⊥ H ≥ 0`).
    pub fn comp_g(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Eval {
        let _ = t;
        match &self.kind {
            ProblemKind::Counterexample => Eval {
                val: -u.clone(),
                jx: DMatrix::zeros(1, 1),
                ju: DMatrix::from_element(1, 1, -1.0),
            },
            ProblemKind::LinearLcs(_) => Eval {
                val: u.clone(),
                jx: DMatrix::zeros(self.l, self.n),
                ju: DMatrix::identity(self.l, self.m),
            },
            ProblemKind::Autonomized(inner) => {
                let (xi, sigma) = split_aug(x, inner.n);
                let e = inner.comp_g(sigma, &xi, u);
                let tcol = time_derivative(|s| inner.comp_g(s, &xi, u).val, sigma);
                lift_rows(e, tcol, inner.n)
            }
        }
    }

    /// Second complementarity family H.
    pub fn comp_h(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Eval {
        let _ = t;
        match &self.kind {
            ProblemKind::Counterexample => {
                let mut ju = DMatrix::zeros(1, 1);
                ju[(0, 0)] = -2.0 * u[0];
                Eval {
                    val: DVector::from_element(1, x[0] - u[0] * u[0]),
                    jx: DMatrix::identity(1, 1),
                    ju,
                }
            }
            ProblemKind::LinearLcs(d) => Eval {
                val: &d.cc * x + &d.d * u + &d.q,
                jx: d.cc.clone(),
                ju: d.d.clone(),
            },
            ProblemKind::Autonomized(inner) => {
                let (xi, sigma) = split_aug(x, inner.n);
                let e = inner.comp_h(sigma, &xi, u);
                let tcol = time_derivative(|s| inner.comp_h(s, &xi, u).val, sigma);
                lift_rows(e, tcol, inner.n)
            }
        }
    }

    // ------------------------------------------------------------------
    // Derived quantities and transforms
    // ------------------------------------------------------------------

    /// Constraint aggregate `Ψ = gᵀλ + hᵀυ − Gᵀμ − Hᵀν` with its
    /// (x,u)-gradient assembled from the constituent Jacobians.
    pub fn psi(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, mult: &MultiplierSet) -> PsiEval {
        let ge = self.g(t, x, u);
        let he = self.h(t, x, u);
        let gge = self.comp_g(t, x, u);
        let hhe = self.comp_h(t, x, u);
        let val = ge.val.dot(&mult.ineq) + he.val.dot(&mult.eq)
            - gge.val.dot(&mult.comp_g)
            - hhe.val.dot(&mult.comp_h);
        let gx = ge.jx.tr_mul(&mult.ineq) + he.jx.tr_mul(&mult.eq)
            - gge.jx.tr_mul(&mult.comp_g)
            - hhe.jx.tr_mul(&mult.comp_h);
        let gu = ge.ju.tr_mul(&mult.ineq) + he.ju.tr_mul(&mult.eq)
            - gge.ju.tr_mul(&mult.comp_g)
            - hhe.ju.tr_mul(&mult.comp_h);
        PsiEval { val, gx, gu }
    }

    /// Time-augmentation: appends a clock state σ with σ̇ = 1, σ(t0) = t0,
    /// routes all explicit time dependence through σ, and frees σ(t1).
    /// Solutions correspond 1–1 with solutions of the original instance.
    pub fn autonomize(&self) -> OcpecProblem {
        let (lo0, hi0) = self.x0_set.bounds();
        let (lo1, hi1) = self.x1_set.bounds();
        let push = |v: &DVector<f64>, extra: f64| {
            let mut out = DVector::zeros(v.len() + 1);
            out.rows_mut(0, v.len()).copy_from(v);
            out[v.len()] = extra;
            out
        };
        OcpecProblem {
            name: format!("{}+clock", self.name),
            t0: self.t0,
            t1: self.t1,
            n: self.n + 1,
            m: self.m,
            l: self.l,
            l1: self.l1,
            l2: self.l2,
            control_set: self.control_set.clone(),
            x0_set: EndpointComponent::Box {
                lo: push(&lo0, self.t0),
                hi: push(&hi0, self.t0),
            },
            x1_set: EndpointComponent::Box {
                lo: push(&lo1, f64::NEG_INFINITY),
                hi: push(&hi1, f64::INFINITY),
            },
            radius: self.radius,
            kind: ProblemKind::Autonomized(Box::new(self.clone())),
        }
    }

    /// Load an instance from a JSON problem file. See the crate README for
    /// the schema; errors carry the offending field name.
    pub fn load(path: &Path) -> Result<OcpecProblem> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ProblemFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let file: ProblemFile = serde_json::from_str(&text).map_err(|e| Error::ProblemFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        file.into_problem()
    }
}

impl Eval {
    fn empty_rows(n: usize, m: usize) -> Eval {
        Eval {
            val: DVector::zeros(0),
            jx: DMatrix::zeros(0, n),
            ju: DMatrix::zeros(0, m),
        }
    }
}

fn split_aug(x: &DVector<f64>, n_inner: usize) -> (DVector<f64>, f64) {
    (x.rows(0, n_inner).into(), x[n_inner])
}

/// Append the time-derivative column to the state Jacobian of an inner
/// oracle evaluation (rows unchanged).
fn lift_rows(e: Eval, tcol: DVector<f64>, n_inner: usize) -> Eval {
    let rows = e.val.len();
    let mut jx = DMatrix::zeros(rows, n_inner + 1);
    jx.view_mut((0, 0), (rows, n_inner)).copy_from(&e.jx);
    jx.view_mut((0, n_inner), (rows, 1)).copy_from(&tcol);
    Eval {
        val: e.val,
        jx,
        ju: e.ju,
    }
}

// ----------------------------------------------------------------------
// Derivative-consistency audit
// ----------------------------------------------------------------------

/// Compare every analytic Jacobian/gradient against central finite
/// differences (step `1e-6·(1+|v|)` in the perturbed coordinate) at
/// `n_points` seeded random points. Returns the worst absolute-over-scale
/// discrepancy; values ≤ 1e-6 certify consistency.
pub fn audit_derivatives(p: &OcpecProblem, n_points: usize, seed: u64) -> f64 {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let rel = |fd: f64, an: f64| (fd - an).abs() / (1.0 + an.abs());
    for _ in 0..n_points {
        let t = rng.random_range(p.t0..=p.t1);
        let x = DVector::from_fn(p.n, |_, _| rng.random_range(-2.0..2.0));
        let u = DVector::from_fn(p.m, |_, _| rng.random_range(-2.0..2.0));

        // Vector-valued oracle families with (jx, ju).
        type VecOracle<'a> = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> Eval + 'a>;
        let fams: Vec<(&str, VecOracle)> = vec![
            ("dynamics", Box::new(|t, x, u| p.dynamics(t, x, u))),
            ("g", Box::new(|t, x, u| p.g(t, x, u))),
            ("h", Box::new(|t, x, u| p.h(t, x, u))),
            ("G", Box::new(|t, x, u| p.comp_g(t, x, u))),
            ("H", Box::new(|t, x, u| p.comp_h(t, x, u))),
        ];
        for (_, f) in &fams {
            let e = f(t, &x, &u);
            for j in 0..p.n {
                let s = 1e-6 * (1.0 + x[j].abs());
                let mut xp = x.clone();
                xp[j] += s;
                let mut xm = x.clone();
                xm[j] -= s;
                let fd = (f(t, &xp, &u).val - f(t, &xm, &u).val) / (2.0 * s);
                for r in 0..e.val.len() {
                    worst = worst.max(rel(fd[r], e.jx[(r, j)]));
                }
            }
            for j in 0..p.m {
                let s = 1e-6 * (1.0 + u[j].abs());
                let mut up = u.clone();
                up[j] += s;
                let mut um = u.clone();
                um[j] -= s;
                let fd = (f(t, &x, &up).val - f(t, &x, &um).val) / (2.0 * s);
                for r in 0..e.val.len() {
                    worst = worst.max(rel(fd[r], e.ju[(r, j)]));
                }
            }
        }

        // Running cost gradients.
        let rc = p.running_cost(t, &x, &u);
        for j in 0..p.n {
            let s = 1e-6 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            xp[j] += s;
            let mut xm = x.clone();
            xm[j] -= s;
            let fd = (p.running_cost(t, &xp, &u).val - p.running_cost(t, &xm, &u).val) / (2.0 * s);
            worst = worst.max(rel(fd, rc.gx[j]));
        }
        for j in 0..p.m {
            let s = 1e-6 * (1.0 + u[j].abs());
            let mut up = u.clone();
            up[j] += s;
            let mut um = u.clone();
            um[j] -= s;
            let fd = (p.running_cost(t, &x, &up).val - p.running_cost(t, &x, &um).val) / (2.0 * s);
            worst = worst.max(rel(fd, rc.gu[j]));
        }

        // Endpoint cost gradients.
        let x0 = DVector::from_fn(p.n, |_, _| rng.random_range(-2.0..2.0));
        let x1 = DVector::from_fn(p.n, |_, _| rng.random_range(-2.0..2.0));
        let ec = p.endpoint_cost(&x0, &x1);
        for j in 0..p.n {
            let s = 1e-6 * (1.0 + x0[j].abs());
            let mut a = x0.clone();
            a[j] += s;
            let mut b = x0.clone();
            b[j] -= s;
            let fd = (p.endpoint_cost(&a, &x1).val - p.endpoint_cost(&b, &x1).val) / (2.0 * s);
            worst = worst.max(rel(fd, ec.gx0[j]));

            let s = 1e-6 * (1.0 + x1[j].abs());
            let mut a = x1.clone();
            a[j] += s;
            let mut b = x1.clone();
            b[j] -= s;
            let fd = (p.endpoint_cost(&x0, &a).val - p.endpoint_cost(&x0, &b).val) / (2.0 * s);
            worst = worst.max(rel(fd, ec.gx1[j]));
        }
    }
    worst
}

// ----------------------------------------------------------------------
// Problem-file schema
// ----------------------------------------------------------------------

#[derive(Deserialize)]
struct ProblemFile {
    kind: String,
    #[serde(default)]
    t0: Option<f64>,
    #[serde(default)]
    t1: Option<f64>,
    #[serde(default, rename = "A")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "B")]
    b: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    c: Option<Vec<f64>>,
    #[serde(default, rename = "C")]
    cc: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "D")]
    d: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    q: Option<Vec<f64>>,
    #[serde(default, rename = "T")]
    target: Option<Vec<f64>>,
    #[serde(default)]
    x0: Option<Vec<f64>>,
    #[serde(default, rename = "E0")]
    e0: Option<BoxSpec>,
    #[serde(default)]
    radius: Option<RadiusField>,
}

#[derive(Deserialize)]
struct BoxSpec {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RadiusField {
    Num(f64),
    Word(String),
}

impl RadiusField {
    fn value(&self) -> Result<f64> {
        match self {
            RadiusField::Num(r) => Ok(*r),
            RadiusField::Word(w) if w == "inf" => Ok(f64::INFINITY),
            RadiusField::Word(w) => Err(Error::InvalidField {
                field: "radius",
                message: format!("expected a number or \"inf\", got {w:?}"),
            }),
        }
    }
}

fn to_matrix(field: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|row| row.len()).unwrap_or(0);
    for row in rows {
        if row.len() != c {
            return Err(Error::InvalidField {
                field,
                message: "ragged row lengths".to_string(),
            });
        }
    }
    let mut m = DMatrix::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

impl ProblemFile {
    fn require<T>(field: &'static str, v: Option<T>) -> Result<T> {
        v.ok_or(Error::InvalidField {
            field,
            message: "missing required field".to_string(),
        })
    }

    fn into_problem(self) -> Result<OcpecProblem> {
        if let Some(name) = self.kind.strip_prefix("builtin:") {
            let mut p = OcpecProblem::builtin(name)?;
            if let Some(t0) = self.t0 {
                p.t0 = t0;
            }
            if let Some(t1) = self.t1 {
                p.t1 = t1;
            }
            p.validate()?;
            return Ok(p);
        }
        if self.kind != "linear_lcs" {
            return Err(Error::InvalidField {
                field: "kind",
                message: format!(
                    "unknown kind {:?}; expected \"builtin:<name>\" or \"linear_lcs\"",
                    self.kind
                ),
            });
        }
        let c = Self::require("c", self.c)?;
        let q = Self::require("q", self.q)?;
        let n = c.len();
        let l = q.len();
        let data = LinearLcsData {
            a: to_matrix("A", &Self::require("A", self.a)?)?,
            b: to_matrix("B", &Self::require("B", self.b)?)?,
            c: DVector::from_vec(c),
            cc: to_matrix("C", &Self::require("C", self.cc)?)?,
            d: to_matrix("D", &Self::require("D", self.d)?)?,
            q: DVector::from_vec(q),
            target: DVector::from_vec(self.target.unwrap_or_else(|| vec![0.0; n])),
        };
        let x0_set = match (self.x0, self.e0) {
            (Some(v), None) => EndpointComponent::Fixed(DVector::from_vec(v)),
            (None, Some(bx)) => {
                if bx.lo.len() != n || bx.hi.len() != n {
                    return Err(Error::DimensionMismatch {
                        field: "E0",
                        expected: n,
                        got: bx.lo.len().max(bx.hi.len()),
                    });
                }
                EndpointComponent::Box {
                    lo: DVector::from_vec(bx.lo),
                    hi: DVector::from_vec(bx.hi),
                }
            }
            (Some(_), Some(_)) => {
                return Err(Error::InvalidField {
                    field: "x0",
                    message: "give either x0 or E0, not both".to_string(),
                })
            }
            (None, None) => {
                return Err(Error::InvalidField {
                    field: "x0",
                    message: "one of x0 or E0 is required".to_string(),
                })
            }
        };
        let radius = match self.radius {
            Some(r) => r.value()?,
            None => f64::INFINITY,
        };
        let _ = l;
        OcpecProblem::from_linear(
            "linear_lcs".to_string(),
            self.t0.unwrap_or(0.0),
            self.t1.unwrap_or(1.0),
            data,
            x0_set,
            radius,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn counterexample_dimensions_and_jacobians() {
        let p = OcpecProblem::builtin("counterexample").unwrap();
        assert_eq!((p.n, p.m, p.l, p.l1, p.l2), (1, 1, 1, 0, 0));
        let x = DVector::from_element(1, 0.3);
        let u = DVector::from_element(1, -0.2);
        let gg = p.comp_g(0.5, &x, &u);
        assert_eq!(gg.ju[(0, 0)], -1.0);
        assert_eq!(gg.val[0], 0.2);
        let hh = p.comp_h(0.5, &x, &u);
        assert_eq!(hh.jx[(0, 0)], 1.0);
        assert_abs_diff_eq!(hh.ju[(0, 0)], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(hh.val[0], 0.3 - 0.04, epsilon = 1e-15);
    }

    #[test]
    fn linear_default_matches_closed_form() {
        let p = OcpecProblem::builtin("linear_lcs").unwrap();
        let x = DVector::from_element(1, 0.7);
        let u = DVector::from_element(1, 0.4);
        let dy = p.dynamics(0.0, &x, &u);
        assert_abs_diff_eq!(dy.val[0], 0.4 - 1.0, epsilon = 1e-15);
        assert_eq!(p.comp_g(0.0, &x, &u).val[0], 0.4);
        assert_abs_diff_eq!(p.comp_h(0.0, &x, &u).val[0], 1.1, epsilon = 1e-15);
    }

    #[test]
    fn unknown_builtin_is_an_error() {
        assert!(matches!(
            OcpecProblem::builtin("nope"),
            Err(Error::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn derivative_audit_on_builtins() {
        for name in ["counterexample", "linear_lcs"] {
            let p = OcpecProblem::builtin(name).unwrap();
            let worst = audit_derivatives(&p, 100, 42);
            assert!(worst <= 1e-6, "{name}: worst discrepancy {worst}");
        }
    }

    #[test]
    fn derivative_audit_on_autonomized_builtins() {
        for name in ["counterexample", "linear_lcs"] {
            let p = OcpecProblem::builtin(name).unwrap().autonomize();
            let worst = audit_derivatives(&p, 50, 43);
            assert!(worst <= 1e-6, "{name}+clock: worst discrepancy {worst}");
        }
    }

    #[test]
    fn autonomize_counterexample_shapes() {
        let p = OcpecProblem::builtin("counterexample")
            .unwrap()
            .autonomize();
        assert_eq!(p.n, 2);
        let x = DVector::from_row_slice(&[0.1, 0.5]);
        let u = DVector::from_element(1, -0.3);
        let dy = p.dynamics(0.5, &x, &u);
        assert_eq!(dy.val.len(), 2);
        assert_eq!(dy.val[0], -0.3);
        assert_eq!(dy.val[1], 1.0);
        // Time-independent data: the clock column of the state Jacobian is 0.
        assert_eq!(dy.jx[(0, 1)], 0.0);
        assert_eq!(dy.jx[(1, 1)], 0.0);
        // Constraint values are unchanged by the lift.
        let inner = OcpecProblem::builtin("counterexample").unwrap();
        let xi = DVector::from_element(1, 0.1);
        assert_eq!(
            p.comp_h(0.5, &x, &u).val[0],
            inner.comp_h(0.5, &xi, &u).val[0]
        );
    }

    #[test]
    fn psi_gradient_matches_finite_difference() {
        let p = OcpecProblem::builtin("counterexample").unwrap();
        let mult = MultiplierSet {
            ineq: DVector::zeros(0),
            eq: DVector::zeros(0),
            comp_g: DVector::from_element(1, 0.7),
            comp_h: DVector::from_element(1, -1.3),
        };
        let x = DVector::from_element(1, 0.4);
        let u = DVector::from_element(1, -0.6);
        let e = p.psi(0.2, &x, &u, &mult);
        // Ψ = −0.7·(−u) + 1.3·(x − u²)
        assert_abs_diff_eq!(e.val, -0.7 * 0.6 + 1.3 * (0.4 - 0.36), epsilon = 1e-14);
        let s = 1e-7;
        let fd_x = (p
            .psi(0.2, &DVector::from_element(1, 0.4 + s), &u, &mult)
            .val
            - p.psi(0.2, &DVector::from_element(1, 0.4 - s), &u, &mult)
                .val)
            / (2.0 * s);
        assert_abs_diff_eq!(fd_x, e.gx[0], epsilon = 1e-6);
        let fd_u = (p
            .psi(0.2, &x, &DVector::from_element(1, -0.6 + s), &mult)
            .val
            - p.psi(0.2, &x, &DVector::from_element(1, -0.6 - s), &mult)
                .val)
            / (2.0 * s);
        assert_abs_diff_eq!(fd_u, e.gu[0], epsilon = 1e-6);
    }

    #[test]
    fn grid_hits_endpoints_exactly() {
        let ts = uniform_grid(0.0, 1.0, 7);
        assert_eq!(ts.len(), 8);
        assert_eq!(ts[0], 0.0);
        assert_eq!(ts[7], 1.0);
    }

    #[test]
    fn load_linear_file_equals_builtin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(
            &path,
            r#"{"kind":"linear_lcs","t0":0.0,"t1":1.0,
                "A":[[0.0]],"B":[[1.0]],"c":[-1.0],
                "C":[[1.0]],"D":[[1.0]],"q":[0.0],
                "T":[0.0],"x0":[1.0],"radius":"inf"}"#,
        )
        .unwrap();
        let p = OcpecProblem::load(&path).unwrap();
        let b = OcpecProblem::builtin("linear_lcs").unwrap();
        assert_eq!(p.linear_data().unwrap(), b.linear_data().unwrap());
        assert_eq!(p.x0_set, b.x0_set);
        assert_eq!(p.radius, f64::INFINITY);
    }

    #[test]
    fn load_rejects_bad_b_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"kind":"linear_lcs","A":[[0.0]],"B":[[1.0,2.0]],"c":[-1.0],
                "C":[[1.0]],"D":[[1.0]],"q":[0.0],"T":[0.0],"x0":[1.0]}"#,
        )
        .unwrap();
        let err = OcpecProblem::load(&path).unwrap_err();
        match err {
            Error::DimensionMismatch { field, .. } => assert_eq!(field, "B"),
            other => panic!("expected dimension mismatch on B, got {other}"),
        }
    }

    #[test]
    fn load_builtin_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ce.json");
        std::fs::write(&path, r#"{"kind":"builtin:counterexample"}"#).unwrap();
        let p = OcpecProblem::load(&path).unwrap();
        assert_eq!(p.name, "counterexample");
        assert_eq!((p.t0, p.t1), (0.0, 1.0));
    }

    #[test]
    fn oracles_are_deterministic() {
        let p = OcpecProblem::builtin("counterexample")
            .unwrap()
            .autonomize();
        let x = DVector::from_row_slice(&[0.3, 0.6]);
        let u = DVector::from_element(1, -0.4);
        let a = p.dynamics(0.6, &x, &u);
        let b = p.dynamics(0.6, &x, &u);
        assert_eq!(a.val, b.val);
        assert_eq!(a.jx, b.jx);
        assert_eq!(a.ju, b.ju);
    }
}
