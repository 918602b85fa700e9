//! Test-only brute-force contractions over the full rank-4 bundle
//! `span{d/dx} + span{e1,e2,e3}`. These are deliberately naive nested loops,
//! independent of the optimized formulas they cross-check.

use crate::algebra::{LieStructure, EPS};
use crate::Mat3;

/// `G^{ii'} G^{jj'} C^k_{ij} C^{k'}_{i'j'} G_{kk'}` by six nested loops.
pub fn bracket_norm_sq(lie: &LieStructure, g: &Mat3) -> f64 {
    let gi = g.try_inverse().unwrap();
    let c = &lie.constants;
    let mut s = 0.0;
    for i in 0..3 {
        for ip in 0..3 {
            for j in 0..3 {
                for jp in 0..3 {
                    for k in 0..3 {
                        for kp in 0..3 {
                            s += gi[(i, ip)] * gi[(j, jp)] * c[k][i][j] * c[kp][ip][jp] * g[(k, kp)];
                        }
                    }
                }
            }
        }
    }
    s
}

/// Triple contraction of `H_{ijk} = h0 eps_{ijk}` with itself.
pub fn hg_norm_sq(g: &Mat3, h0: f64) -> f64 {
    let gi = g.try_inverse().unwrap();
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for ip in 0..3 {
                    for jp in 0..3 {
                        for kp in 0..3 {
                            s += h0 * EPS[i][j][k] * h0 * EPS[ip][jp][kp]
                                * gi[(i, ip)]
                                * gi[(j, jp)]
                                * gi[(k, kp)];
                        }
                    }
                }
            }
        }
    }
    s
}

/// The full three-form on the rank-4 bundle. Index 0 is the base direction,
/// 1..=3 the fiber frame. `m[(i,j)]` holds `H(d/dx, e_i, e_j)`.
pub fn full_h(h0: f64, m: &Mat3) -> [[[f64; 4]; 4]; 4] {
    let mut h = [[[0.0; 4]; 4]; 4];
    let base: Vec<(usize, usize, usize, f64)> = {
        let mut v = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    if EPS[i][j][k] != 0.0 {
                        v.push((i + 1, j + 1, k + 1, h0 * EPS[i][j][k]));
                    }
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    v.push((0, i + 1, j + 1, m[(i, j)]));
                }
            }
        }
        v
    };
    // antisymmetrize over all slot orders
    for &(a, b, c, val) in &base {
        h[a][b][c] = val;
        h[b][c][a] = val;
        h[c][a][b] = val;
        h[a][c][b] = -val;
        h[c][b][a] = -val;
        h[b][a][c] = -val;
    }
    h
}

/// Inverse of the block metric `g + G` on the rank-4 bundle.
pub fn inverse_block_metric(g_base: f64, g_fiber: &Mat3) -> [[f64; 4]; 4] {
    let gi = g_fiber.try_inverse().unwrap();
    let mut e = [[0.0; 4]; 4];
    e[0][0] = 1.0 / g_base;
    for i in 0..3 {
        for j in 0..3 {
            e[i + 1][j + 1] = gi[(i, j)];
        }
    }
    e
}

/// `H^2(u, v) = H(u, A, B) H(v, A', B') E^{AA'} E^{BB'}` with full contraction
/// over the rank-4 bundle; `u`, `v` are bundle indices (0 = base).
pub fn h_squared(h: &[[[f64; 4]; 4]; 4], ei: &[[f64; 4]; 4], u: usize, v: usize) -> f64 {
    let mut s = 0.0;
    for a in 0..4 {
        for ap in 0..4 {
            for b in 0..4 {
                for bp in 0..4 {
                    s += h[u][a][b] * h[v][ap][bp] * ei[a][ap] * ei[b][bp];
                }
            }
        }
    }
    s
}
