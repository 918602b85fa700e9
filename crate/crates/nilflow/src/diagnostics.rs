//! Every scalar the analysis tracks: squared norms of the bracket, torsion
//! and fiber-metric derivative, the two nonnegative defect densities whose
//! vanishing pins the limit solutions, the scale-invariant energy functional,
//! and the decay monitors.

use crate::algebra::{LieStructure, EPS};
use crate::error::{Error, Result};
use crate::flow::{self, FlowState};
use crate::grid::{self, integrate};
use crate::{Mat3, Vec3};
use serde::Serialize;

/// Per-point diagnostic scalars.
pub struct PointScalars {
    /// |[,]|^2
    pub bracket: Vec<f64>,
    /// |H_vertical|^2
    pub hg: Vec<f64>,
    /// |DG|^2 (unit-frame)
    pub dg: Vec<f64>,
    /// tr_g H^2 (mixed torsion norm)
    pub trh2: Vec<f64>,
    /// dg + trh2
    pub qsum: Vec<f64>,
    /// |DG(.,.)| = |trace of DG| in the unit frame
    pub tracedg: Vec<f64>,
    /// first defect density (controls the sharp bracket decay)
    pub sa: Vec<f64>,
    /// second defect density (controls the energy dissipation)
    pub sb: Vec<f64>,
    /// |D^2 G|^2 + |DH|^2 (curvature proxy)
    pub d2: Vec<f64>,
}

/// `K_k = G^{ij} C^q_{ik} (D_x G)_{qj}` (coordinate frame, no g-weights).
fn bracket_dg_vec(lie: &LieStructure, p: &Mat3, gi: &Mat3) -> Vec3 {
    let pg = p * gi;
    Vec3::from_fn(|k, _| {
        let mut acc = 0.0;
        for q in 0..3 {
            for i in 0..3 {
                let c = lie.constants[q][i][k];
                if c != 0.0 {
                    acc += c * pg[(q, i)];
                }
            }
        }
        acc
    })
}

/// `w^p = C^p_{ij} (G^{-1} m G^{-1})_{ij}` (coordinate frame).
fn torsion_bracket_vec(lie: &LieStructure, gi: &Mat3, m: &Mat3) -> Vec3 {
    let gimgi = gi * m * gi;
    Vec3::from_fn(|p, _| lie.bracket_matrix(p).component_mul(&gimgi).sum())
}

/// `(H^2)(d/dx, e_k) = h eps_{k i j} (G^{-1} m G^{-1})_{ij}` (coordinate frame).
fn h2_mixed_vec(gi: &Mat3, m: &Mat3, h: f64) -> Vec3 {
    let gimgi = gi * m * gi;
    Vec3::from_fn(|k, _| {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = EPS[k][i][j];
                if e != 0.0 {
                    acc += e * gimgi[(i, j)];
                }
            }
        }
        h * acc
    })
}

fn norm2_sym(gi: &Mat3, a: &Mat3) -> f64 {
    let x = gi * a;
    (x * x).trace()
}

fn norm2_antisym(gi: &Mat3, a: &Mat3) -> f64 {
    let x = gi * a;
    -(x * x).trace()
}

/// All per-point scalars of a valid state.
pub fn point_scalars(s: &FlowState) -> PointScalars {
    let n = s.grid.n;
    let geom = flow::geometry(s);
    let mut out = PointScalars {
        bracket: Vec::with_capacity(n),
        hg: Vec::with_capacity(n),
        dg: Vec::with_capacity(n),
        trh2: Vec::with_capacity(n),
        qsum: Vec::with_capacity(n),
        tracedg: Vec::with_capacity(n),
        sa: Vec::with_capacity(n),
        sb: Vec::with_capacity(n),
        d2: Vec::with_capacity(n),
    };
    let lie = &s.lie;
    for i in 0..n {
        let g = &s.fiber[i];
        let gi = &geom.gi[i];
        let gb = s.base[i];
        let gbi = 1.0 / gb;
        let p = &geom.p[i];
        let m = &s.mixed[i];
        let h = s.h_at(i);

        let bracket = crate::algebra::bracket_norm_sq_with(lie, g, gi);
        let hg = crate::algebra::hg_norm_sq_with(gi, h);
        let dg = gbi * norm2_sym(gi, p);
        let trh2 = gbi * norm2_antisym(gi, m);
        let qsum = dg + trh2;
        let tr1 = gbi.sqrt() * (gi * p).trace();
        let tracedg = tr1.abs();

        // center-direction pieces (unit center e3 / sqrt(G33))
        let g33 = g[(2, 2)];
        let c33 = gbi.sqrt() * p[(2, 2)] / g33;
        let col3 = p.column(2).into_owned();
        let colsum = gbi * (col3.transpose() * gi * col3)[(0, 0)] / g33;

        // defect density A: |T|^2 + |W|^2 + hg*bracket/6
        let kv = bracket_dg_vec(lie, p, gi);
        let w = torsion_bracket_vec(lie, gi, m);
        let w_norm2 = gbi * (w.transpose() * g * w)[(0, 0)];
        let mut t_tensor = [[[0.0f64; 3]; 3]; 3];
        let pgi = p * gi;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let mut v = 0.0;
                    for r in 0..3 {
                        v += p[(r, a)] * lie.constants[r][b][c];
                        for q in 0..3 {
                            v += -pgi[(b, q)] * lie.constants[r][q][c] * g[(r, a)]
                                + pgi[(c, q)] * lie.constants[r][q][b] * g[(r, a)];
                        }
                    }
                    t_tensor[a][b][c] = v;
                }
            }
        }
        let mut t_norm2 = 0.0;
        for a in 0..3 {
            for ap in 0..3 {
                for b in 0..3 {
                    for bp in 0..3 {
                        for c in 0..3 {
                            for cp in 0..3 {
                                t_norm2 += t_tensor[a][b][c]
                                    * t_tensor[ap][bp][cp]
                                    * gi[(a, ap)]
                                    * gi[(b, bp)]
                                    * gi[(c, cp)];
                            }
                        }
                    }
                }
            }
        }
        t_norm2 *= gbi;
        let sa = t_norm2 + w_norm2 + hg * bracket / 6.0;

        // defect density B: eight nonnegative pieces
        let e_sym = geom.ddgc[i] - (p * gi * p) * gbi + (m * gi * m.transpose()) * gbi;
        let t1 = 2.0 * norm2_sym(gi, &e_sym);
        let x = m * gi * p;
        let f_anti = (geom.dxh[i] + x.transpose() - x) * gbi;
        let t2 = 2.0 * norm2_antisym(gi, &f_anti);
        let t3 = bracket * (tr1 - 2.0 * c33).powi(2);
        let t4 = 2.0 * bracket * (colsum - c33 * c33);
        let k_norm2 = gbi * (kv.transpose() * gi * kv)[(0, 0)];
        let t5 = 2.0 * k_norm2;
        let kh = kv + h2_mixed_vec(gi, m, h);
        let t6 = 2.0 * gbi * (kh.transpose() * gi * kh)[(0, 0)];
        let t7 = 2.0 * w_norm2;
        let t8 = hg * tr1 * tr1 / 3.0;
        let sb = t1 + t2 + t3 + t4 + t5 + t6 + t7 + t8;

        // curvature proxy
        let d2g_norm = norm2_sym(gi, &geom.ddgc[i]);
        let dh_norm = 3.0 * gbi * gbi * norm2_antisym(gi, &geom.dxh[i]);
        let d2 = d2g_norm + dh_norm;

        out.bracket.push(bracket);
        out.hg.push(hg);
        out.dg.push(dg);
        out.trh2.push(trh2);
        out.qsum.push(qsum);
        out.tracedg.push(tracedg);
        out.sa.push(sa);
        out.sb.push(sb);
        out.d2.push(d2);
    }
    out
}

/// sup and volume-weighted mean of one scalar field.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct SupMean {
    pub sup: f64,
    pub mean: f64,
}

fn supmean(f: &[f64], s: &FlowState) -> SupMean {
    SupMean { sup: grid::sup(f), mean: grid::mean(f, &s.base, &s.grid) }
}

/// One diagnostics row: all tracked scalars at a single time.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub h0: f64,
    pub volume: f64,
    pub diameter: f64,
    /// energy functional at tau = t (infinite at t = 0)
    pub energy: f64,
    pub bracket: SupMean,
    pub hg: SupMean,
    pub dg: SupMean,
    pub trh2: SupMean,
    pub qsum: SupMean,
    pub tracedg: SupMean,
    pub sa: SupMean,
    pub sb: SupMean,
    pub d2: SupMean,
    /// t * sup |[,]|^2 (threshold 2/3)
    pub mon_bracket: f64,
    /// t * sup |H_vert|^2 (threshold 2)
    pub mon_hg: f64,
    /// t * sup (|DG|^2 + tr_g H^2) (threshold 2)
    pub mon_qsum: f64,
    /// t^2 * sup (|D^2G|^2 + |DH|^2) (bounded, no sharp constant)
    pub mon_d2: f64,
    /// energy dissipation integrand: t Int s_b dV / sqrt(t)
    pub sb_integral: f64,
    /// (t/4) Int (qsum - 2/t)^2 dV / sqrt(t)
    pub qdev_integral: f64,
}

/// Compute the full diagnostics record of a state.
pub fn record(s: &FlowState) -> DiagnosticsRecord {
    let ps = point_scalars(s);
    let vol = volume(s);
    let t = s.t;
    let energy = if t > 0.0 { energy_from_qsum(&ps.qsum, s, t) } else { f64::INFINITY };
    let (sbi, qdi) = if t > 0.0 {
        let sb_int = integrate(&ps.sb, &s.base, &s.grid);
        let qdev: Vec<f64> = ps.qsum.iter().map(|&q| (q - 2.0 / t).powi(2)).collect();
        let qd_int = integrate(&qdev, &s.base, &s.grid);
        (t * sb_int / t.sqrt(), 0.25 * t * qd_int / t.sqrt())
    } else {
        // limits as t -> 0+: sqrt(t) Int S_B -> 0, Vol/t^{3/2} -> infinity
        (0.0, f64::INFINITY)
    };
    DiagnosticsRecord {
        t,
        h0: s.h0,
        volume: vol,
        diameter: 0.5 * vol,
        energy,
        bracket: supmean(&ps.bracket, s),
        hg: supmean(&ps.hg, s),
        dg: supmean(&ps.dg, s),
        trh2: supmean(&ps.trh2, s),
        qsum: supmean(&ps.qsum, s),
        tracedg: supmean(&ps.tracedg, s),
        sa: supmean(&ps.sa, s),
        sb: supmean(&ps.sb, s),
        d2: supmean(&ps.d2, s),
        mon_bracket: t * grid::sup(&ps.bracket),
        mon_hg: t * grid::sup(&ps.hg),
        mon_qsum: t * grid::sup(&ps.qsum),
        mon_d2: t * t * grid::sup(&ps.d2),
        sb_integral: sbi,
        qdev_integral: qdi,
    }
}

fn energy_from_qsum(qsum: &[f64], s: &FlowState, tau: f64) -> f64 {
    let integrand: Vec<f64> = qsum.iter().map(|&q| q + 2.0 / tau).collect();
    tau * integrate(&integrand, &s.base, &s.grid) / tau.sqrt()
}

/// Scale-invariant energy `tau Int (|DG|^2 + tr_g H^2 + 2/tau) dV_g / sqrt(tau)`.
pub fn energy(s: &FlowState, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let ps = point_scalars(s);
    Ok(energy_from_qsum(&ps.qsum, s, tau))
}

/// Base volume `Int dV_g`.
pub fn volume(s: &FlowState) -> f64 {
    integrate(&vec![1.0; s.grid.n], &s.base, &s.grid)
}

/// Diameter of the circle: half its circumference.
pub fn diameter(s: &FlowState) -> f64 {
    0.5 * volume(s)
}

/// Gauge vector coordinate component `q = -(1/2) g^{-1} G^{ij} (D_x G)_{ij}`.
/// Diagnostic only; the gauged equations are integrated directly.
pub fn gauge_vector(s: &FlowState) -> Vec<f64> {
    let geom = flow::geometry(s);
    (0..s.grid.n)
        .map(|i| -0.5 * (geom.gi[i] * geom.p[i]).trace() / s.base[i])
        .collect()
}

/// Residual of the trace identity: `G^{ij}(D_x G)_{ij}` against the stencil
/// derivative of `ln det G`. Exact cancellation of the adjoint terms makes
/// these agree to stencil accuracy.
pub fn trace_identity_residual(s: &FlowState) -> f64 {
    let geom = flow::geometry(s);
    let logdet: Vec<f64> = s.fiber.iter().map(|g| g.determinant().ln()).collect();
    let dlogdet = grid::deriv(&logdet, &s.grid);
    (0..s.grid.n)
        .map(|i| ((geom.gi[i] * geom.p[i]).trace() - dlogdet[i]).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::LieStructure;
    use crate::flow::{initial_state, FlowState, InitialData};
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid {
        Grid::new(n, 2.0 * PI).unwrap()
    }

    fn flat_abelian(n: usize) -> FlowState {
        FlowState::homogeneous(
            grid(n),
            LieStructure::abelian(),
            0.0,
            Mat3::identity(),
            1.0,
            Vec3::zeros(),
            0.0,
            Mat3::zeros(),
        )
    }

    #[test]
    fn flat_abelian_all_zero() {
        let ps = point_scalars(&flat_abelian(32));
        for v in [&ps.bracket, &ps.hg, &ps.dg, &ps.trh2, &ps.tracedg, &ps.sa, &ps.sb, &ps.d2] {
            assert!(v.iter().all(|&x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn homogeneous_heisenberg_values() {
        let s = FlowState::homogeneous(
            grid(32),
            LieStructure::heisenberg(1.0),
            0.0,
            Mat3::identity(),
            1.0,
            Vec3::zeros(),
            1.0,
            Mat3::zeros(),
        );
        let ps = point_scalars(&s);
        assert_relative_eq!(ps.bracket[0], 2.0, epsilon = 1e-13);
        assert_relative_eq!(ps.hg[0], 6.0, epsilon = 1e-13);
        assert!(ps.dg[0].abs() < 1e-14);
        assert!(ps.trh2[0].abs() < 1e-14);
        // only the hg*bracket/6 piece of the first defect survives
        assert_relative_eq!(ps.sa[0], 2.0, epsilon = 1e-12);
        // abelian: every defect term carries the bracket
        let mut ab = s.clone();
        ab.lie = LieStructure::abelian();
        let ps = point_scalars(&ab);
        assert!(ps.sa[0].abs() < 1e-14);
    }

    #[test]
    fn dg_norm_series_expansion() {
        let eps = 1e-3;
        let g = grid(128);
        let mut s = flat_abelian(128);
        s.fiber = g
            .points()
            .map(|x| {
                Mat3::from_diagonal(&Vec3::new((eps * x.sin()).exp(), (-eps * x.sin()).exp(), 1.0))
            })
            .collect();
        let ps = point_scalars(&s);
        for (i, x) in g.points().enumerate() {
            let expected = 2.0 * (eps * x.cos()).powi(2);
            assert!((ps.dg[i] - expected).abs() < 20.0 * eps.powi(4) + 1e-10);
            assert!(ps.tracedg[i] < 10.0 * eps * eps);
        }
    }

    #[test]
    fn defects_nonnegative_on_random_states() {
        for seed in 0..4 {
            let g = grid(64);
            let s = initial_state(
                &g,
                &LieStructure::heisenberg(1.3),
                &InitialData { seed, amp_fiber: 0.3, amp_mixed: 0.2, amp_conn: 0.2, ..InitialData::default() },
            );
            let ps = point_scalars(&s);
            assert!(ps.sa.iter().all(|&v| v >= 0.0));
            assert!(ps.sb.iter().all(|&v| v >= 0.0));
            assert!(ps.dg.iter().all(|&v| v >= 0.0));
            assert!(ps.trh2.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn h_squared_contraction_identity() {
        // G^{ij} H^2(e_i, e_j) = |H_vert|^2 + 2 tr_g H^2 pointwise
        let g = grid(32);
        let s = initial_state(
            &g,
            &LieStructure::heisenberg(1.0),
            &InitialData { amp_mixed: 0.4, ..InitialData::default() },
        );
        let ps = point_scalars(&s);
        for i in 0..g.n {
            let h = crate::brute::full_h(s.h0, &s.mixed[i]);
            let ei = crate::brute::inverse_block_metric(s.base[i], &s.fiber[i]);
            let gi = s.fiber[i].try_inverse().unwrap();
            let mut lhs = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    lhs += gi[(a, b)] * crate::brute::h_squared(&h, &ei, a + 1, b + 1);
                }
            }
            let rhs = ps.hg[i] + 2.0 * ps.trh2[i];
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-12);
            // and the pure mixed contraction matches tr_g H^2
            let hvv = crate::brute::h_squared(&h, &ei, 0, 0) / s.base[i];
            assert_relative_eq!(hvv, ps.trh2[i], max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_examples() {
        let s = flat_abelian(64);
        // constant integrand: 2 Vol / sqrt(tau) = 2 * 2pi / 2
        assert_relative_eq!(energy(&s, 4.0).unwrap(), 2.0 * PI, epsilon = 1e-12);
        assert!(energy(&s, 0.0).is_err());
        // lower bound 2 Vol / sqrt(tau)
        let g = grid(64);
        let s = initial_state(&g, &LieStructure::heisenberg(1.0), &InitialData::default());
        let tau = 2.7;
        assert!(energy(&s, tau).unwrap() >= 2.0 * volume(&s) / tau.sqrt());
    }

    #[test]
    fn energy_scale_invariance() {
        let g = grid(64);
        let s = initial_state(&g, &LieStructure::heisenberg(1.0), &InitialData::default());
        let tau = 1.7;
        let base = energy(&s, tau).unwrap();
        for sc in [0.5, 2.0, 10.0] {
            let mut scaled = s.clone();
            for i in 0..g.n {
                scaled.fiber[i] *= sc;
                scaled.base[i] *= sc;
                scaled.mixed[i] *= sc;
            }
            scaled.h0 *= sc;
            let e = energy(&scaled, sc * tau).unwrap();
            assert_relative_eq!(e, base, max_relative = 1e-12);
        }
    }

    #[test]
    fn diameter_examples() {
        let mut s = flat_abelian(64);
        assert_relative_eq!(diameter(&s), PI, epsilon = 1e-12);
        s.base = vec![4.0; 64];
        assert_relative_eq!(diameter(&s), 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn gauge_vector_examples() {
        // homogeneous state: zero
        let s = FlowState::homogeneous(
            grid(64),
            LieStructure::heisenberg(1.0),
            0.0,
            Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 0.7)),
            1.3,
            Vec3::zeros(),
            0.5,
            Mat3::zeros(),
        );
        assert!(gauge_vector(&s).iter().all(|&q| q.abs() < 1e-14));

        // det G constant in x: zero to stencil accuracy
        let g = grid(512);
        let mut s = flat_abelian(512);
        s.fiber = g
            .points()
            .map(|x| {
                let f = (0.1 * x.sin()).exp();
                Mat3::from_diagonal(&Vec3::new(f, 1.0 / f, 1.0))
            })
            .collect();
        assert!(gauge_vector(&s).iter().all(|&q| q.abs() < 1e-10));

        // G = diag(exp(eps sin x), 1, 1), g = 1: q ~ -(eps/2) cos x
        let g = grid(128);
        let eps = 1e-3;
        let mut s = flat_abelian(128);
        s.fiber = g
            .points()
            .map(|x| Mat3::from_diagonal(&Vec3::new((eps * x.sin()).exp(), 1.0, 1.0)))
            .collect();
        let q = gauge_vector(&s);
        for (i, x) in g.points().enumerate() {
            assert!((q[i] + 0.5 * eps * x.cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn trace_identity_fourth_order() {
        let lie = LieStructure::heisenberg(1.0);
        let gen = InitialData::default();
        let r1 = trace_identity_residual(&initial_state(&grid(64), &lie, &gen));
        let r2 = trace_identity_residual(&initial_state(&grid(128), &lie, &gen));
        assert!(r2 < r1 / 10.0, "expected ~16x shrink: {r1:.3e} -> {r2:.3e}");
    }
}
