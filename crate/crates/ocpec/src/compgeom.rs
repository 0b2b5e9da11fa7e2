//! Pointwise geometry of the complementarity cone
//! `C = {(a,b) : a ≥ 0, b ≥ 0, a·b = 0}` and its l-fold product:
//! index-set classification, Euclidean projection and distance,
//! limiting-normal-cone membership, and the W/C/M/S multiplier sign lattice.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Activity/branch classification of a point against the constraint system
/// `g ≤ 0`, `0 ≤ G ⊥ H ≥ 0`. All index lists are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSets {
    /// Indices with `gᵢ < −tol` (strictly inactive inequality rows).
    pub i_minus: Vec<usize>,
    /// Indices with `gᵢ ≥ −tol` (active inequality rows).
    pub i_zero: Vec<usize>,
    /// Complementarity indices with `Gᵢ > tol` and `|Hᵢ| ≤ tol`.
    pub i_plus0: Vec<usize>,
    /// Degenerate complementarity indices: `|Gᵢ| ≤ tol` and `|Hᵢ| ≤ tol`.
    pub i_00: Vec<usize>,
    /// Complementarity indices with `|Gᵢ| ≤ tol` and `Hᵢ > tol`.
    pub i_0plus: Vec<usize>,
    /// Activity tolerance used for this classification.
    pub tol_act: f64,
}

impl IndexSets {
    /// Number of complementarity pairs classified.
    pub fn n_pairs(&self) -> usize {
        self.i_plus0.len() + self.i_00.len() + self.i_0plus.len()
    }
}

/// Which stationarity sign conditions a single multiplier pair `(μᵢ, νᵢ)`
/// satisfies at a degenerate complementarity index. The flags are nested:
/// `s ⇒ m ⇒ c ⇒ w` always holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignClass {
    pub w: bool,
    pub c: bool,
    pub m: bool,
    pub s: bool,
}

fn ensure_finite(name: &'static str, vals: &[f64]) -> Result<()> {
    for &v in vals {
        if !v.is_finite() {
            return Err(Error::InvalidField {
                field: name,
                message: format!("non-finite entry {v}"),
            });
        }
    }
    Ok(())
}

/// Classify every constraint row of `g ≤ 0` and every complementarity pair
/// `(Gᵢ, Hᵢ)` relative to the activity tolerance `tol`.
///
/// A pair is rejected as infeasible when either value drops below `−tol` or
/// both exceed `tol` (the product cannot vanish): the point is then not in
/// the complementarity cone within tolerance. Ties at exactly `tol` resolve
/// toward the degenerate set, which weakens downstream stationarity claims
/// rather than strengthening them.
pub fn classify_indices(
    g_val: &[f64],
    g_comp: &[f64],
    h_comp: &[f64],
    tol: f64,
) -> Result<IndexSets> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "activity tolerance must be a positive real, got {tol}"
        )));
    }
    ensure_finite("g", g_val)?;
    ensure_finite("G", g_comp)?;
    ensure_finite("H", h_comp)?;
    if g_comp.len() != h_comp.len() {
        return Err(Error::DimensionMismatch {
            field: "H",
            expected: g_comp.len(),
            got: h_comp.len(),
        });
    }
    let mut sets = IndexSets {
        i_minus: Vec::new(),
        i_zero: Vec::new(),
        i_plus0: Vec::new(),
        i_00: Vec::new(),
        i_0plus: Vec::new(),
        tol_act: tol,
    };
    for (i, &gi) in g_val.iter().enumerate() {
        if gi >= -tol {
            sets.i_zero.push(i);
        } else {
            sets.i_minus.push(i);
        }
    }
    for i in 0..g_comp.len() {
        let (gi, hi) = (g_comp[i], h_comp[i]);
        if gi < -tol || hi < -tol || (gi > tol && hi > tol) {
            return Err(Error::NotInCone {
                index: i,
                g: gi,
                h: hi,
                tol,
            });
        }
        if gi.abs() <= tol && hi.abs() <= tol {
            sets.i_00.push(i);
        } else if gi > tol {
            sets.i_plus0.push(i);
        } else {
            sets.i_0plus.push(i);
        }
    }
    Ok(sets)
}

/// Membership test for the limiting normal cone of the complementarity cone
/// at `(a, b)`, applied to the candidate normal `(alpha, beta)`.
///
/// Componentwise rule: where `aᵢ > tol` the normal must have `αᵢ = 0`
/// (βᵢ free); where `bᵢ > tol` it must have `βᵢ = 0` (αᵢ free); at a
/// degenerate pair the normal must satisfy `αᵢ < 0 ∧ βᵢ < 0` or
/// `αᵢ·βᵢ = 0`, each within tolerance. Errors if `(a, b)` is not in the
/// cone within `tol`.
pub fn in_limiting_normal_cone(
    a: &[f64],
    b: &[f64],
    alpha: &[f64],
    beta: &[f64],
    tol: f64,
) -> Result<bool> {
    let sets = classify_indices(&[], a, b, tol)?;
    if alpha.len() != a.len() {
        return Err(Error::DimensionMismatch {
            field: "alpha",
            expected: a.len(),
            got: alpha.len(),
        });
    }
    if beta.len() != b.len() {
        return Err(Error::DimensionMismatch {
            field: "beta",
            expected: b.len(),
            got: beta.len(),
        });
    }
    ensure_finite("alpha", alpha)?;
    ensure_finite("beta", beta)?;
    for &i in &sets.i_plus0 {
        if alpha[i].abs() > tol {
            return Ok(false);
        }
    }
    for &i in &sets.i_0plus {
        if beta[i].abs() > tol {
            return Ok(false);
        }
    }
    for &i in &sets.i_00 {
        let both_negative = alpha[i] < -tol && beta[i] < -tol;
        let product_zero = (alpha[i] * beta[i]).abs() <= tol * tol;
        if !(both_negative || product_zero) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Euclidean projection of `(a, b)` onto the l-fold complementarity cone,
/// together with the Euclidean distance.
///
/// The cone is a product, so each component projects independently onto the
/// nearest of the two nonnegative axes (with the origin as the degenerate
/// case). Ties prefer the first-argument axis, making the result
/// deterministic.
pub fn project_c(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    assert_eq!(a.len(), b.len(), "component count mismatch");
    let mut pa = Vec::with_capacity(a.len());
    let mut pb = Vec::with_capacity(b.len());
    let mut sq = 0.0_f64;
    for i in 0..a.len() {
        let cand_a = (a[i].max(0.0), 0.0);
        let cand_b = (0.0, b[i].max(0.0));
        let d2 = |c: (f64, f64)| (a[i] - c.0).powi(2) + (b[i] - c.1).powi(2);
        let (pick, dist2) = if d2(cand_a) <= d2(cand_b) {
            (cand_a, d2(cand_a))
        } else {
            (cand_b, d2(cand_b))
        };
        pa.push(pick.0);
        pb.push(pick.1);
        sq += dist2;
    }
    (pa, pb, sq.sqrt())
}

/// Distance of `(a, b)` to the l-fold complementarity cone.
pub fn dist_c(a: &[f64], b: &[f64]) -> f64 {
    project_c(a, b).2
}

/// Grade one multiplier pair at a degenerate complementarity index against
/// the W/C/M/S sign conditions.
///
/// * `w`: always satisfied (no sign restriction).
/// * `c`: product nonnegative, or one factor vanishes within `tol`.
/// * `m`: both factors strictly positive, or one factor vanishes within
///   `tol`.
/// * `s`: both factors nonnegative within `tol`.
///
/// The "factor vanishes" escape clauses keep the lattice `s ⇒ m ⇒ c ⇒ w`
/// exact for every input; the product comparisons use `tol²` so the grading
/// is invariant under the scale of near-tolerance factors.
pub fn sign_class(mu: f64, nu: f64, tol: f64) -> SignClass {
    let mu_zero = mu.abs() <= tol;
    let nu_zero = nu.abs() <= tol;
    let factor_zero = mu_zero || nu_zero;
    let s = mu >= -tol && nu >= -tol;
    let m = (mu > tol && nu > tol) || factor_zero;
    let c = mu * nu >= -tol * tol || factor_zero;
    SignClass { w: true, c, m, s }
}
