//! Parabolic blowdown rescaling of trajectories, the canonical limit family
//! (ODE system and closed forms), residual comparison of rescaled solutions
//! against the family, and rigidity reporting.

use crate::algebra::{LieKind, LieStructure};
use crate::diagnostics::{self, point_scalars};
use crate::error::{Error, Result};
use crate::flow::{self, FlowState, Rhs, Snapshot, Trajectory};
use crate::grid::{self, Grid};
use crate::ode;
use crate::{Mat3, Vec3};
use nalgebra::Matrix2;
use serde::Serialize;

/// Expansion coefficient of the bracket norm in the limit family (exact).
pub const FAMILY_A: f64 = 1.5;

/// Data of one limit-family member, normalized at t = 1.
#[derive(Clone, Debug)]
pub struct CanonicalFamilyParams {
    pub kind: LieKind,
    /// integration constant C >= 0 of the bracket closed form
    pub c_const: f64,
    /// |H_vert|^2 at t = 1
    pub psi0: f64,
    /// 2x2 SPD block of the fiber metric on the center complement at t = 1
    pub block0: Matrix2<f64>,
    /// fiber metric on the center at t = 1
    pub center0: f64,
    /// base metric at t = 1 (the family expands it homothetically, g = t g1)
    pub g1: f64,
}

impl CanonicalFamilyParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_const < 0.0 {
            return Err(Error::InvalidArgument("family constant C must be >= 0".into()));
        }
        if self.psi0 < 0.0 {
            return Err(Error::InvalidArgument("psi0 must be >= 0".into()));
        }
        let spd = self.block0[(0, 0)] > 0.0 && self.block0.determinant() > 0.0;
        if !spd || !(self.center0 > 0.0) {
            return Err(Error::NotSpd(" (family fiber blocks)".into()));
        }
        if !(self.g1 > 0.0) {
            return Err(Error::InvalidArgument("g1 must be positive".into()));
        }
        Ok(())
    }

    /// Bracket norm at t = 1: `1/(a + C)` for the nonabelian family, 0 for
    /// the abelian one.
    pub fn phi1(&self) -> f64 {
        match self.kind {
            LieKind::Heisenberg => 1.0 / (FAMILY_A + self.c_const),
            LieKind::Abelian => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyRates {
    pub dphi: f64,
    pub dpsi: f64,
    /// d/dt of ln(block factor) on the center complement
    pub log_rate_block0: f64,
    /// d/dt of ln(block factor) on the center
    pub log_rate_center: f64,
}

/// ODE system of the limit family:
/// `dphi = -(3/2) phi^2 - psi phi / 6`, `dpsi = -psi^2/2 - psi phi / 2`,
/// block log-rates `phi/2 + psi/6` and `-phi/2 + psi/6`.
pub fn family_ode_rhs(phi: f64, psi: f64) -> Result<FamilyRates> {
    if phi < 0.0 || psi < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "family norms must be nonnegative (phi = {phi}, psi = {psi})"
        )));
    }
    Ok(FamilyRates {
        dphi: -FAMILY_A * phi * phi - psi * phi / 6.0,
        dpsi: -0.5 * psi * psi - 0.5 * psi * phi,
        log_rate_block0: 0.5 * phi + psi / 6.0,
        log_rate_center: -0.5 * phi + psi / 6.0,
    })
}

/// Closed form for vanishing vertical torsion:
/// `phi(t) = 1/(a t + C)` with block factors `((a t + C)/(a + C))^{1/3}`
/// on the center complement and its reciprocal on the center.
pub fn family_closed_form(t: f64, c_const: f64) -> (f64, f64, f64) {
    let u = FAMILY_A * t + c_const;
    let u1 = FAMILY_A + c_const;
    let phi = 1.0 / u;
    ((phi), (u / u1).powf(1.0 / 3.0), (u / u1).powf(-1.0 / 3.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct FamilyTrajectory {
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// block factor on the center complement, 1 at t = 1
    pub block0: Vec<f64>,
    /// block factor on the center, 1 at t = 1
    pub center: Vec<f64>,
    /// base metric t * g1
    pub g_base: Vec<f64>,
}

/// High-accuracy integration of the family ODEs from the t = 1 normalization
/// (independent of the PDE stepper), sampled at `times` (all > 0).
pub fn integrate_family(p: &CanonicalFamilyParams, times: &[f64]) -> Result<FamilyTrajectory> {
    p.validate()?;
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument("family times must be positive".into()));
    }
    let y0 = vec![p.phi1(), p.psi0, 0.0, 0.0];
    let f = |_t: f64, y: &[f64]| -> Vec<f64> {
        let r = family_ode_rhs(y[0].max(0.0), y[1].max(0.0)).expect("nonnegative norms");
        vec![r.dphi, r.dpsi, r.log_rate_block0, r.log_rate_center]
    };
    // integrate to each requested time from the nearest endpoint, keeping
    // the 1e-12 local tolerance
    let mut out = FamilyTrajectory {
        times: times.to_vec(),
        phi: Vec::new(),
        psi: Vec::new(),
        block0: Vec::new(),
        center: Vec::new(),
        g_base: Vec::new(),
    };
    let mut fwd: Vec<f64> = times.iter().copied().filter(|&t| t >= 1.0).collect();
    fwd.sort_by(f64::total_cmp);
    let mut bwd: Vec<f64> = times.iter().copied().filter(|&t| t < 1.0).collect();
    bwd.sort_by(|a, b| f64::total_cmp(b, a));
    let mut results = std::collections::BTreeMap::new();
    for (list, _dir) in [(fwd, 1.0), (bwd, -1.0)] {
        let path = ode::integrate_path(&f, 1.0, &y0, &list, 1e-12, 1e-14);
        for (t, y) in list.iter().zip(path) {
            results.insert(t.to_bits(), y);
        }
    }
    for &t in times {
        let y = &results[&t.to_bits()];
        out.phi.push(y[0]);
        out.psi.push(y[1]);
        out.block0.push(y[2].exp());
        out.center.push(y[3].exp());
        out.g_base.push(t * p.g1);
    }
    Ok(out)
}

/// Materialize a family member as a homogeneous flow state at time `t` (the
/// representative with x-independent fields on the given grid).
pub fn synthesize_state(p: &CanonicalFamilyParams, t: f64, grid: &Grid) -> Result<FlowState> {
    let fam = integrate_family(p, &[t])?;
    let g1 = {
        let b = p.block0 * fam.block0[0];
        let z = p.center0 * fam.center[0];
        Mat3::new(
            b[(0, 0)], b[(0, 1)], 0.0,
            b[(1, 0)], b[(1, 1)], 0.0,
            0.0, 0.0, z,
        )
    };
    let det1 = p.block0.determinant() * p.center0;
    let lie = match p.kind {
        LieKind::Abelian => LieStructure::abelian(),
        LieKind::Heisenberg => {
            // bracket scale from the t = 1 normalization
            let c2 = p.phi1() * det1 / (2.0 * p.center0 * p.center0);
            LieStructure::heisenberg(c2.sqrt())
        }
    };
    // psi * det G is constant along the family, so h0 is time-independent
    let h0 = (p.psi0 * det1 / 6.0).sqrt();
    Ok(FlowState::homogeneous(
        grid.clone(),
        lie,
        t,
        g1,
        fam.g_base[0],
        Vec3::zeros(),
        h0,
        Mat3::zeros(),
    ))
}

fn hermite<T: grid::FieldElem>(ya: T, da: T, yb: T, db: T, h: f64, theta: f64) -> T {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    ya * (2.0 * t3 - 3.0 * t2 + 1.0)
        + da * (h * (t3 - 2.0 * t2 + theta))
        + yb * (-2.0 * t3 + 3.0 * t2)
        + db * (h * (t3 - t2))
}

/// Cubic Hermite interpolation of the state at time `t` between stored
/// snapshots, using the stored time derivatives.
pub fn state_at(traj: &Trajectory, t: f64) -> Result<FlowState> {
    let snaps = &traj.snapshots;
    if snaps.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let (lo, hi) = (traj.t_lo(), traj.t_hi());
    if t < lo - 1e-12 || t > hi + 1e-12 {
        return Err(Error::WindowNotCovered { have_lo: lo, have_hi: hi, want_lo: t, want_hi: t });
    }
    // exact snapshot hit
    if let Some(s) = snaps.iter().find(|s| (s.state.t - t).abs() <= 1e-12 * (1.0 + t.abs())) {
        return Ok(s.state.clone());
    }
    let idx = snaps.partition_point(|s| s.state.t < t);
    let (a, b) = (&snaps[idx - 1], &snaps[idx]);
    let h = b.state.t - a.state.t;
    let theta = (t - a.state.t) / h;
    let n = a.state.grid.n;
    let mut out = a.state.clone();
    out.t = t;
    for i in 0..n {
        out.fiber[i] =
            hermite(a.state.fiber[i], a.rhs.fiber[i], b.state.fiber[i], b.rhs.fiber[i], h, theta);
        out.base[i] = hermite(a.state.base[i], a.rhs.base[i], b.state.base[i], b.rhs.base[i], h, theta);
        out.conn[i] = hermite(a.state.conn[i], a.rhs.conn[i], b.state.conn[i], b.rhs.conn[i], h, theta);
        out.mixed[i] =
            hermite(a.state.mixed[i], a.rhs.mixed[i], b.state.mixed[i], b.rhs.mixed[i], h, theta);
    }
    Ok(out)
}

fn rescale_state(s: &FlowState, scale: f64) -> FlowState {
    let mut out = s.clone();
    out.t = s.t / scale;
    let inv = 1.0 / scale;
    for i in 0..s.grid.n {
        out.fiber[i] *= inv;
        out.base[i] *= inv;
        out.mixed[i] *= inv;
        // connection coefficients are scale-invariant
    }
    out.h0 *= inv;
    if let Some(h) = out.h_field.as_mut() {
        h.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn rescale_rhs(r: &Rhs, scale: f64) -> Rhs {
    let mut out = r.clone();
    // d/dt of s^{-1} F(s t) is F'(s t): fiber, base, mixed rates carry over;
    // the unscaled connection compresses in time: da_k/dt = s da/dt
    for v in out.conn.iter_mut() {
        *v *= scale;
    }
    out
}

/// Parabolic rescaling of a whole trajectory:
/// `(G, g, h0, m)(t) -> (G, g, h0, m)(s t)/s`, connection unchanged,
/// snapshot times divided by `s`.
pub fn rescale(traj: &Trajectory, scale: f64) -> Result<Trajectory> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("rescale factor must be positive".into()));
    }
    let snapshots: Vec<Snapshot> = traj
        .snapshots
        .iter()
        .map(|s| Snapshot { state: rescale_state(&s.state, scale), rhs: rescale_rhs(&s.rhs, scale) })
        .collect();
    let series = snapshots.iter().map(|s| diagnostics::record(&s.state)).collect();
    Ok(Trajectory { snapshots, series })
}

/// Residuals of one rescaled trajectory against the limit family over a
/// fixed comparison window. All entries are nonnegative; `qsum_dev` is the
/// collapsed-base indicator (2 exactly when the base has stopped expanding)
/// and is reported, not asserted, by the comparison gates.
#[derive(Clone, Debug, Serialize)]
pub struct BlowdownResidual {
    pub scale: f64,
    pub window: (f64, f64),
    /// sup over the window of |t (|DG|^2 + tr_g H^2) - 2|
    pub qsum_dev: f64,
    /// sup of the trace part of DG
    pub tracedg: f64,
    /// sup of t * tr_g H^2 (mixed torsion must die in the limit)
    pub mixed_torsion: f64,
    /// sup of the energy dissipation integrand t Int S_B dV / sqrt(t)
    pub sb_integral: f64,
    /// sup of the off-block norm of DG (center mixing)
    pub dg_offblock: f64,
    /// sup of the connection velocity norm
    pub conn_rate: f64,
    /// least-squares C in t phi = t/((3/2) t + C) over the window tail
    pub c_fit: f64,
    /// rms misfit of the closed form with the fitted C
    pub c_fit_rms: f64,
}

pub const COMPARE_WINDOW: (f64, f64) = (0.5, 2.0);
const COMPARE_SAMPLES: usize = 25;

/// Rescale by each factor and measure the family residuals over the fixed
/// window [1/2, 2]. Fails if the trajectory does not cover `[s/2, 2 s]` for
/// the largest scale.
pub fn compare_to_family(traj: &Trajectory, scales: &[f64]) -> Result<Vec<BlowdownResidual>> {
    let mut out = Vec::with_capacity(scales.len());
    for &s in scales {
        let (w0, w1) = COMPARE_WINDOW;
        let (want_lo, want_hi) = (s * w0, s * w1);
        if want_lo < traj.t_lo() - 1e-9 || want_hi > traj.t_hi() + 1e-9 {
            return Err(Error::WindowNotCovered {
                have_lo: traj.t_lo(),
                have_hi: traj.t_hi(),
                want_lo,
                want_hi,
            });
        }
        let mut res = BlowdownResidual {
            scale: s,
            window: COMPARE_WINDOW,
            qsum_dev: 0.0,
            tracedg: 0.0,
            mixed_torsion: 0.0,
            sb_integral: 0.0,
            dg_offblock: 0.0,
            conn_rate: 0.0,
            c_fit: 0.0,
            c_fit_rms: 0.0,
        };
        let mut tail: Vec<(f64, f64)> = Vec::new();
        for k in 0..COMPARE_SAMPLES {
            let tau = w0 + (w1 - w0) * k as f64 / (COMPARE_SAMPLES - 1) as f64;
            let state = rescale_state(&state_at(traj, s * tau)?, s);
            let ps = point_scalars(&state);
            let rates = flow::rhs(&state, &flow::FlowOptions::default());
            let geom_off = dg_offblock_sup(&state);
            let mut conn_sup: f64 = 0.0;
            for i in 0..state.grid.n {
                let v = rates.conn[i];
                let norm2 = (v.transpose() * state.fiber[i] * v)[(0, 0)] / state.base[i];
                conn_sup = conn_sup.max(norm2.sqrt());
            }
            res.qsum_dev = res
                .qsum_dev
                .max(ps.qsum.iter().map(|&q| (tau * q - 2.0).abs()).fold(0.0, f64::max));
            res.tracedg = res.tracedg.max(grid::sup(&ps.tracedg));
            res.mixed_torsion = res.mixed_torsion.max(tau * grid::sup(&ps.trh2));
            let sb_int = grid::integrate(&ps.sb, &state.base, &state.grid);
            res.sb_integral = res.sb_integral.max(tau * sb_int / tau.sqrt());
            res.dg_offblock = res.dg_offblock.max(geom_off);
            res.conn_rate = res.conn_rate.max(conn_sup);
            if tau >= w1 - (w1 - w0) / 3.0 {
                tail.push((tau, grid::mean(&ps.bracket, &state.base, &state.grid)));
            }
        }
        // linearized least squares: C = mean(1/phi - a t) over the tail third
        let usable: Vec<(f64, f64)> = tail.iter().copied().filter(|&(_, p)| p > 1e-300).collect();
        if !usable.is_empty() {
            let c = usable.iter().map(|&(t, p)| 1.0 / p - FAMILY_A * t).sum::<f64>()
                / usable.len() as f64;
            res.c_fit = c;
            let rms = usable
                .iter()
                .map(|&(t, p)| {
                    let model = t / (FAMILY_A * t + c);
                    (t * p - model).powi(2)
                })
                .sum::<f64>()
                / usable.len() as f64;
            res.c_fit_rms = rms.sqrt();
        }
        out.push(res);
    }
    Ok(out)
}

/// sup over the grid of the norm of the off-block part of DG (components
/// mixing the center with its complement).
fn dg_offblock_sup(s: &FlowState) -> f64 {
    let geom = flow::geometry(s);
    let mut worst: f64 = 0.0;
    for i in 0..s.grid.n {
        let g = &s.fiber[i];
        let gi = &geom.gi[i];
        let p = &geom.p[i];
        let gbi = 1.0 / s.base[i];
        let g33 = g[(2, 2)];
        let col3 = p.column(2).into_owned();
        let colsum = gbi * (col3.transpose() * gi * col3)[(0, 0)] / g33;
        let c33sq = gbi * (p[(2, 2)] / g33).powi(2);
        worst = worst.max((2.0 * (colsum - c33sq)).max(0.0).sqrt());
    }
    worst
}

/// Residuals of every rigidity conclusion on a single state; all vanish on
/// limit-family members.
#[derive(Clone, Debug, Serialize)]
pub struct RigidityReport {
    /// sup |DG(.,.)| (the trace part must vanish)
    pub tracedg: f64,
    /// sup tr_g H^2 (the mixed torsion must vanish)
    pub mixed_torsion: f64,
    /// sup |(D.DG). - DG.DG| (second-order identity)
    pub second_order: f64,
    /// spatial oscillation (sup - inf) of |[,]|^2, |DG|^2, |H_vert|^2
    pub bracket_const: f64,
    pub dg_const: f64,
    pub hg_const: f64,
    /// sup |D_vG(zeta, zeta)| (no center stretching)
    pub dg_center: f64,
    /// sup |(D.DG). - (|DG|^2/2) G| restricted to the center complement
    pub block_harmonic: f64,
    /// sup norm of dA/dt (the connection must be parallel in time)
    pub conn_rate: f64,
}

impl RigidityReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.tracedg,
            self.mixed_torsion,
            self.second_order,
            self.bracket_const,
            self.dg_const,
            self.hg_const,
            self.dg_center,
            self.block_harmonic,
            self.conn_rate,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn rigidity_report(s: &FlowState) -> RigidityReport {
    let geom = flow::geometry(s);
    let ps = point_scalars(s);
    let rates = flow::rhs(s, &flow::FlowOptions::default());
    let mut second_order: f64 = 0.0;
    let mut dg_center: f64 = 0.0;
    let mut block_harmonic: f64 = 0.0;
    let mut conn_rate: f64 = 0.0;
    for i in 0..s.grid.n {
        let g = &s.fiber[i];
        let gi = &geom.gi[i];
        let p = &geom.p[i];
        let gbi = 1.0 / s.base[i];
        let r4 = geom.ddgc[i] - (p * gi * p) * gbi;
        second_order = second_order.max(((gi * r4) * (gi * r4)).trace().max(0.0).sqrt());
        dg_center = dg_center.max((gbi.sqrt() * p[(2, 2)] / g[(2, 2)]).abs());
        // G-orthogonal projector onto the center complement
        let e3 = Vec3::new(0.0, 0.0, 1.0);
        let proj = Mat3::identity() - e3 * (g * e3).transpose() / g[(2, 2)];
        let r7 = proj.transpose() * (geom.ddgc[i] - g * (0.5 * ps.dg[i])) * proj;
        block_harmonic = block_harmonic.max(((gi * r7) * (gi * r7)).trace().max(0.0).sqrt());
        let v = rates.conn[i];
        conn_rate = conn_rate.max(((v.transpose() * g * v)[(0, 0)] * gbi).max(0.0).sqrt());
    }
    let osc = |f: &[f64]| {
        let sup = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let inf = f.iter().copied().fold(f64::INFINITY, f64::min);
        sup - inf
    };
    RigidityReport {
        tracedg: grid::sup(&ps.tracedg),
        mixed_torsion: grid::sup(&ps.trh2),
        second_order,
        bracket_const: osc(&ps.bracket),
        dg_const: osc(&ps.dg),
        hg_const: osc(&ps.hg),
        dg_center,
        block_harmonic,
        conn_rate,
    }
}
