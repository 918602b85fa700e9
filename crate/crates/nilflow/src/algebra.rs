//! The three-dimensional nilpotent fiber algebra: structure constants,
//! adjoint action, center, and the purely algebraic norms built from a fiber
//! metric.
//!
//! The frame `{e1, e2, e3}` is global over the circle with constant structure
//! constants and `e3` spanning the center; bundle monodromy is trivial. All
//! tensor norms use full index contraction with no combinatorial factors.

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};
use serde::{Deserialize, Serialize};

/// Frame index of the central direction.
pub const CENTER_INDEX: usize = 2;

/// Levi-Civita symbol, `EPS[i][j][k]` = sign of the permutation (i,j,k).
pub const EPS: [[[f64; 3]; 3]; 3] = {
    let mut e = [[[0.0; 3]; 3]; 3];
    e[0][1][2] = 1.0;
    e[1][2][0] = 1.0;
    e[2][0][1] = 1.0;
    e[0][2][1] = -1.0;
    e[2][1][0] = -1.0;
    e[1][0][2] = -1.0;
    e
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LieKind {
    Heisenberg,
    Abelian,
}

impl std::fmt::Display for LieKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LieKind::Heisenberg => write!(f, "heisenberg"),
            LieKind::Abelian => write!(f, "abelian"),
        }
    }
}

impl std::str::FromStr for LieKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "heisenberg" => Ok(LieKind::Heisenberg),
            "abelian" => Ok(LieKind::Abelian),
            other => Err(format!("unknown group '{other}' (expected heisenberg or abelian)")),
        }
    }
}

/// Structure constants `C^k_{ij}` of the fiber algebra, `[e_i, e_j] = C^k_{ij} e_k`.
///
/// For the Heisenberg algebra `[e1, e2] = c e3` with `c > 0`; the abelian case
/// has `C = 0`.
#[derive(Clone, Debug)]
pub struct LieStructure {
    pub kind: LieKind,
    /// Bracket scale: `[e1, e2] = c e3`. Ignored (zero bracket) for abelian.
    pub c: f64,
    /// `constants[k][i][j] = C^k_{ij}`.
    pub constants: [[[f64; 3]; 3]; 3],
}

impl LieStructure {
    pub fn heisenberg(c: f64) -> Self {
        let mut constants = [[[0.0; 3]; 3]; 3];
        constants[2][0][1] = c;
        constants[2][1][0] = -c;
        LieStructure { kind: LieKind::Heisenberg, c, constants }
    }

    pub fn abelian() -> Self {
        LieStructure { kind: LieKind::Abelian, c: 0.0, constants: [[[0.0; 3]; 3]; 3] }
    }

    pub fn new(kind: LieKind, c: f64) -> Self {
        match kind {
            LieKind::Heisenberg => Self::heisenberg(c),
            LieKind::Abelian => Self::abelian(),
        }
    }

    /// Build from raw constants; used to probe the validator with broken data.
    pub fn with_constants(kind: LieKind, c: f64, constants: [[[f64; 3]; 3]; 3]) -> Self {
        LieStructure { kind, c, constants }
    }

    /// The matrix `(C^k)_{ij} = C^k_{ij}` for fixed upper index `k`.
    pub fn bracket_matrix(&self, k: usize) -> Mat3 {
        Mat3::from_fn(|i, j| self.constants[k][i][j])
    }
}

/// Invariants a valid two-step nilpotent structure must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvariantViolation {
    Antisymmetry,
    Jacobi,
    Nilpotency,
    Traceless,
}

/// Report-style validator: returns the list of violated invariants, empty iff
/// the constants describe a two-step nilpotent algebra with central `e3`.
pub fn validate_structure(lie: &LieStructure) -> Vec<InvariantViolation> {
    let c = &lie.constants;
    let mut out = Vec::new();
    let tol = 1e-14;

    let mut antisym = true;
    for k in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                if (c[k][i][j] + c[k][j][i]).abs() > tol {
                    antisym = false;
                }
            }
        }
    }
    if !antisym {
        out.push(InvariantViolation::Antisymmetry);
    }

    let mut jacobi = true;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let mut s = 0.0;
                    for m in 0..3 {
                        s += c[m][i][j] * c[l][m][k]
                            + c[m][j][k] * c[l][m][i]
                            + c[m][k][i] * c[l][m][j];
                    }
                    if s.abs() > tol {
                        jacobi = false;
                    }
                }
            }
        }
    }
    if !jacobi {
        out.push(InvariantViolation::Jacobi);
    }

    // Bracket lands in the center, center annihilates.
    let mut nilpotent = true;
    for k in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                if k != CENTER_INDEX && c[k][i][j].abs() > tol {
                    nilpotent = false;
                }
                if (i == CENTER_INDEX || j == CENTER_INDEX) && c[k][i][j].abs() > tol {
                    nilpotent = false;
                }
            }
        }
    }
    if !nilpotent {
        out.push(InvariantViolation::Nilpotency);
    }

    let mut traceless = true;
    for j in 0..3 {
        let tr: f64 = (0..3).map(|k| c[k][k][j]).sum();
        if tr.abs() > tol {
            traceless = false;
        }
    }
    if !traceless {
        out.push(InvariantViolation::Traceless);
    }

    out
}

/// Adjoint action of the connection coefficient: `(ad_a)^p_i = a^k C^p_{ki}`.
pub fn ad_matrix(lie: &LieStructure, a: &Vec3) -> Mat3 {
    Mat3::from_fn(|p, i| {
        (0..3).map(|k| a[k] * lie.constants[p][k][i]).sum::<f64>()
    })
}

/// Leading-principal-minor (Sylvester) test for symmetric positive definiteness.
pub fn is_spd(g: &Mat3) -> bool {
    let d1 = g[(0, 0)];
    let d2 = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let d3 = g.determinant();
    d1 > 0.0 && d2 > 0.0 && d3 > 0.0 && d1.is_finite() && d3.is_finite()
}

fn require_spd(g: &Mat3, what: &str) -> Result<()> {
    if is_spd(g) {
        Ok(())
    } else {
        Err(Error::NotSpd(format!(" ({what})")))
    }
}

/// Unit center direction `zeta = e3 / sqrt(G33)`, so `G(zeta, zeta) = 1`.
pub fn unit_center(g: &Mat3) -> Vec3 {
    Vec3::new(0.0, 0.0, 1.0 / g[(2, 2)].sqrt())
}

/// Squared norm of the bracket: full contraction
/// `G^{ii'} G^{jj'} C^k_{ij} C^{k'}_{i'j'} G_{kk'}`.
pub fn bracket_norm_sq(lie: &LieStructure, g: &Mat3) -> Result<f64> {
    require_spd(g, "fiber metric in bracket_norm_sq")?;
    let gi = g.try_inverse().ok_or_else(|| Error::NotSpd(" (singular fiber metric)".into()))?;
    Ok(bracket_norm_sq_with(lie, g, &gi))
}

/// As [`bracket_norm_sq`] but with a precomputed inverse; no validity checks.
pub(crate) fn bracket_norm_sq_with(lie: &LieStructure, g: &Mat3, gi: &Mat3) -> f64 {
    let mut total = 0.0;
    for k in 0..3 {
        let fk = lie.bracket_matrix(k);
        for kp in 0..3 {
            let fkp = lie.bracket_matrix(kp);
            // <F_k, Gi F_k' Gi> contracts both lower index pairs.
            let inner = (gi * fkp * gi).component_mul(&fk).sum();
            total += g[(k, kp)] * inner;
        }
    }
    total
}

/// Squared norm of the purely vertical torsion `H_{ijk} = h0 eps_{ijk}`: full
/// triple contraction `H_{ijk} H_{i'j'k'} G^{ii'} G^{jj'} G^{kk'}`.
pub fn hg_norm_sq(lie: &LieStructure, g: &Mat3, h0: f64) -> Result<f64> {
    let _ = lie; // the vertical torsion does not involve the bracket
    require_spd(g, "fiber metric in hg_norm_sq")?;
    let gi = g.try_inverse().ok_or_else(|| Error::NotSpd(" (singular fiber metric)".into()))?;
    Ok(hg_norm_sq_with(&gi, h0))
}

pub(crate) fn hg_norm_sq_with(gi: &Mat3, h0: f64) -> f64 {
    // eps eps Gi Gi Gi = 6 det(Gi); keep the explicit contraction form.
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                if EPS[i][j][k] == 0.0 {
                    continue;
                }
                for ip in 0..3 {
                    for jp in 0..3 {
                        for kp in 0..3 {
                            let e2 = EPS[ip][jp][kp];
                            if e2 == 0.0 {
                                continue;
                            }
                            s += EPS[i][j][k] * e2 * gi[(i, ip)] * gi[(j, jp)] * gi[(k, kp)];
                        }
                    }
                }
            }
        }
    }
    h0 * h0 * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brute;
    use approx::assert_relative_eq;

    #[test]
    fn canonical_structures_validate() {
        assert!(validate_structure(&LieStructure::heisenberg(1.0)).is_empty());
        assert!(validate_structure(&LieStructure::abelian()).is_empty());
        assert!(validate_structure(&LieStructure::heisenberg(2.0)).is_empty());
    }

    #[test]
    fn symmetric_entry_breaks_antisymmetry_only() {
        let mut c = [[[0.0; 3]; 3]; 3];
        c[2][0][1] = 1.0;
        c[2][1][0] = 1.0; // not antisymmetric
        let lie = LieStructure::with_constants(LieKind::Heisenberg, 1.0, c);
        assert_eq!(validate_structure(&lie), vec![InvariantViolation::Antisymmetry]);
    }

    #[test]
    fn non_central_bracket_flags_nilpotency() {
        let mut c = [[[0.0; 3]; 3]; 3];
        c[0][0][1] = 1.0;
        c[0][1][0] = -1.0;
        let lie = LieStructure::with_constants(LieKind::Heisenberg, 1.0, c);
        let v = validate_structure(&lie);
        assert!(v.contains(&InvariantViolation::Nilpotency));
        assert!(!v.contains(&InvariantViolation::Antisymmetry));
    }

    #[test]
    fn ad_matrix_examples() {
        let lie = LieStructure::heisenberg(1.0);
        // a = e1: expanding a^k C^p_{ki} leaves the single entry (p,i) = (3,2).
        let ad = ad_matrix(&lie, &Vec3::new(1.0, 0.0, 0.0));
        let mut expected = Mat3::zeros();
        expected[(2, 1)] = 1.0;
        assert_eq!(ad, expected);
        // center acts trivially
        assert_eq!(ad_matrix(&lie, &Vec3::new(0.0, 0.0, 5.0)), Mat3::zeros());
        // abelian: zero for any a
        assert_eq!(ad_matrix(&LieStructure::abelian(), &Vec3::new(0.3, -2.0, 7.0)), Mat3::zeros());
        // traceless and two-step: image in span(e3), kills e3
        let ad = ad_matrix(&lie, &Vec3::new(0.7, -1.3, 0.4));
        assert_relative_eq!(ad.trace(), 0.0, epsilon = 1e-15);
        for i in 0..3 {
            assert_eq!(ad[(0, i)], 0.0);
            assert_eq!(ad[(1, i)], 0.0);
            assert_eq!(ad[(i, 2)], 0.0);
        }
    }

    #[test]
    fn bracket_norm_identity_metric() {
        let lie = LieStructure::heisenberg(1.0);
        let g = Mat3::identity();
        let v = bracket_norm_sq(&lie, &g).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-14);
        assert_relative_eq!(v, brute::bracket_norm_sq(&lie, &g), epsilon = 1e-14);
    }

    #[test]
    fn bracket_norm_diag_metric() {
        let lie = LieStructure::heisenberg(1.0);
        let g = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 4.0));
        // closed form: 2 c^2 G33^2 / det G = 2 * 16 / 4 = 8
        let v = bracket_norm_sq(&lie, &g).unwrap();
        assert_relative_eq!(v, 8.0, epsilon = 1e-13);
        assert_relative_eq!(v, brute::bracket_norm_sq(&lie, &g), epsilon = 1e-13);
    }

    #[test]
    fn bracket_norm_abelian_and_errors() {
        let g = Mat3::from_diagonal(&Vec3::new(0.5, 2.0, 3.0));
        assert_eq!(bracket_norm_sq(&LieStructure::abelian(), &g).unwrap(), 0.0);
        let bad = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        assert!(bracket_norm_sq(&LieStructure::heisenberg(1.0), &bad).is_err());
        assert!(hg_norm_sq(&LieStructure::heisenberg(1.0), &bad, 1.0).is_err());
    }

    #[test]
    fn hg_norm_examples() {
        let lie = LieStructure::heisenberg(1.0);
        let g = Mat3::identity();
        // brute-force 27-term contraction gives 6 at the identity
        let v = hg_norm_sq(&lie, &g, 1.0).unwrap();
        assert_relative_eq!(v, 6.0, epsilon = 1e-14);
        assert_relative_eq!(v, brute::hg_norm_sq(&g, 1.0), epsilon = 1e-14);

        assert_eq!(hg_norm_sq(&lie, &g, 0.0).unwrap(), 0.0);

        // closed form 6 h0^2 / det G = 6*4/4
        let g = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 4.0));
        assert_relative_eq!(hg_norm_sq(&lie, &g, 2.0).unwrap(), 6.0, epsilon = 1e-13);
    }

    #[test]
    fn bracket_norm_generic_matches_brute_force() {
        let lie = LieStructure::heisenberg(1.7);
        let s = Mat3::new(0.9, 0.2, -0.1, 0.2, 1.4, 0.3, -0.1, 0.3, 0.8);
        let g = s * s.transpose() + Mat3::identity() * 0.1;
        let v = bracket_norm_sq(&lie, &g).unwrap();
        assert_relative_eq!(v, brute::bracket_norm_sq(&lie, &g), max_relative = 1e-12);
        // closed form for the Heisenberg bracket
        let closed = 2.0 * lie.c * lie.c * g[(2, 2)] * g[(2, 2)] / g.determinant();
        assert_relative_eq!(v, closed, max_relative = 1e-12);
    }

    #[test]
    fn unit_center_is_normalized_and_central() {
        let lie = LieStructure::heisenberg(1.0);
        let g = Mat3::new(2.0, 0.3, 0.0, 0.3, 1.5, 0.1, 0.0, 0.1, 4.0);
        let z = unit_center(&g);
        assert_relative_eq!((z.transpose() * g * z)[(0, 0)], 1.0, epsilon = 1e-14);
        // [eta, zeta] = 0 for all eta since C^k_{3j} = 0
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(lie.constants[k][CENTER_INDEX][j], 0.0);
            }
        }
    }
}
