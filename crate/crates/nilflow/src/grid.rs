//! Uniform periodic grid on the circle and the discrete differential
//! operators: fourth-order centered stencils, fiber-covariant derivatives
//! (`d/dx + ad_a` on fiber indices, Levi-Civita correction on base indices),
//! the Laplace-Beltrami operator, and metric integration.

use crate::algebra::{ad_matrix, LieStructure};
use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

pub type ScalarField = Vec<f64>;
pub type VectorField = Vec<Vec3>;
pub type SymMatrixField = Vec<Mat3>;
pub type AntisymMatrixField = Vec<Mat3>;

/// Uniform periodic grid: `n` points on a circle of length `len`,
/// `x_i = i * dx` with `x_n` identified with `x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub len: f64,
    pub dx: f64,
}

impl Grid {
    pub fn new(n: usize, len: f64) -> Result<Self> {
        if n < 16 {
            return Err(Error::InvalidGrid(format!("need at least 16 points, got {n}")));
        }
        if !(len > 0.0) {
            return Err(Error::InvalidGrid(format!("circle length must be positive, got {len}")));
        }
        Ok(Grid { n, len, dx: len / n as f64 })
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.x(i))
    }
}

/// Element types the stencils operate on (f64, Vec3, Mat3).
pub trait FieldElem:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<f64, Output = Self>
{
}
impl<T> FieldElem for T where
    T: Copy
        + std::ops::Add<Output = T>
        + std::ops::Sub<Output = T>
        + std::ops::Mul<f64, Output = T>
{
}

/// Fourth-order centered first derivative on the periodic grid.
pub fn deriv<T: FieldElem>(f: &[T], grid: &Grid) -> Vec<T> {
    let n = grid.n;
    assert_eq!(f.len(), n, "field length must match the grid");
    let w = 1.0 / (12.0 * grid.dx);
    (0..n)
        .map(|i| {
            let m2 = f[(i + n - 2) % n];
            let m1 = f[(i + n - 1) % n];
            let p1 = f[(i + 1) % n];
            let p2 = f[(i + 2) % n];
            (m2 - p2 + (p1 - m1) * 8.0) * w
        })
        .collect()
}

/// Fourth-order centered second derivative (compact 5-point stencil).
pub fn deriv2<T: FieldElem>(f: &[T], grid: &Grid) -> Vec<T> {
    let n = grid.n;
    assert_eq!(f.len(), n, "field length must match the grid");
    let w = 1.0 / (12.0 * grid.dx * grid.dx);
    (0..n)
        .map(|i| {
            let m2 = f[(i + n - 2) % n];
            let m1 = f[(i + n - 1) % n];
            let p1 = f[(i + 1) % n];
            let p2 = f[(i + 2) % n];
            ((m1 + p1) * 16.0 - m2 - p2 - f[i] * 30.0) * w
        })
        .collect()
}

/// Covariant derivative of a scalar (no fiber slots, no base slots): plain
/// differentiation.
pub fn covariant_deriv_scalar(f: &[f64], grid: &Grid) -> Vec<f64> {
    deriv(f, grid)
}

/// Covariant derivative of the fiber metric along the circle:
/// `(D_x G)_{ij} = dG_{ij}/dx - a^k C^p_{ki} G_{pj} - a^k C^p_{kj} G_{ip}`.
pub fn covariant_deriv_g(
    g_fiber: &[Mat3],
    a: &[Vec3],
    lie: &LieStructure,
    grid: &Grid,
) -> Vec<Mat3> {
    covariant_deriv_fiber2(g_fiber, a, lie, grid)
}

/// Covariant derivative of any (0,2) fiber tensor field (two fiber slots,
/// no base slot): `D_x T = dT/dx - ad^T T - T ad`.
pub fn covariant_deriv_fiber2(
    t: &[Mat3],
    a: &[Vec3],
    lie: &LieStructure,
    grid: &Grid,
) -> Vec<Mat3> {
    assert_eq!(t.len(), grid.n);
    assert_eq!(a.len(), grid.n);
    let dt = deriv(t, grid);
    (0..grid.n)
        .map(|i| {
            let ad = ad_matrix(lie, &a[i]);
            dt[i] - ad.transpose() * t[i] - t[i] * ad
        })
        .collect()
}

/// Covariant derivative of a (0,2) fiber tensor that also carries one base
/// slot (like the mixed torsion components `H(d/dx, e_i, e_j)`): the base
/// slot contributes the one-dimensional Christoffel correction
/// `-Gamma T` with `Gamma = g' / (2 g)`.
pub fn covariant_deriv_mixed2(
    t: &[Mat3],
    a: &[Vec3],
    g_base: &[f64],
    lie: &LieStructure,
    grid: &Grid,
) -> Vec<Mat3> {
    assert_eq!(g_base.len(), grid.n);
    let fiber = covariant_deriv_fiber2(t, a, lie, grid);
    let dg = deriv(g_base, grid);
    (0..grid.n)
        .map(|i| {
            let gamma = 0.5 * dg[i] / g_base[i];
            fiber[i] - t[i] * gamma
        })
        .collect()
}

/// Laplace-Beltrami operator of the base metric on scalar fields:
/// `Delta f = f''/g - g' f' / (2 g^2)`.
pub fn laplace_beltrami(f: &[f64], g_base: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    if let Some(&bad) = g_base.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonpositiveBaseMetric(format!(" (g = {bad})")));
    }
    let d1f = deriv(f, grid);
    let d2f = deriv2(f, grid);
    let d1g = deriv(g_base, grid);
    Ok((0..grid.n)
        .map(|i| d2f[i] / g_base[i] - 0.5 * d1g[i] * d1f[i] / (g_base[i] * g_base[i]))
        .collect())
}

/// `Int f dV_g = sum_i f(x_i) sqrt(g(x_i)) dx`. The fold order is fixed so
/// repeated runs are bit-identical.
pub fn integrate(f: &[f64], g_base: &[f64], grid: &Grid) -> f64 {
    assert_eq!(f.len(), grid.n);
    assert_eq!(g_base.len(), grid.n);
    let mut acc = 0.0;
    for i in 0..grid.n {
        acc += f[i] * g_base[i].sqrt() * grid.dx;
    }
    acc
}

/// Maximum over grid points (no interpolation).
pub fn sup(f: &[f64]) -> f64 {
    f.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Volume-weighted mean `Int f dV_g / Int dV_g`.
pub fn mean(f: &[f64], g_base: &[f64], grid: &Grid) -> f64 {
    let vol = integrate(&vec![1.0; grid.n], g_base, grid);
    integrate(f, g_base, grid) / vol
}
