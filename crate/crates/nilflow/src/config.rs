//! Run configuration: `key = value` lines with `#` comments, unknown keys
//! rejected, every violation reported with its line number.

use crate::algebra::{LieKind, LieStructure};
use crate::error::{Error, Result};
use crate::flow::{EvolveConfig, FlowOptions, InitialData, StepController};
use crate::grid::Grid;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub group: LieKind,
    pub c: f64,
    pub l: f64,
    pub n: usize,
    pub t0: f64,
    pub t_end: f64,
    pub cfl_sigma: f64,
    pub error_tol: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub seed: u64,
    pub modes: usize,
    pub amp_g_fiber: f64,
    pub amp_g_base: f64,
    pub amp_a: f64,
    pub amp_m: f64,
    pub h0: f64,
    pub snapshot_cadence: f64,
    pub diagnostics_cadence: f64,
    pub output_dir: String,
    pub b_mixed_sign: f64,
    pub frame_sign: f64,
    pub full_h_debug: bool,
}

impl RunConfig {
    pub fn lie(&self) -> LieStructure {
        LieStructure::new(self.group, self.c)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n, self.l)
    }

    pub fn initial(&self) -> InitialData {
        InitialData {
            seed: self.seed,
            modes: self.modes,
            amp_fiber: self.amp_g_fiber,
            amp_base: self.amp_g_base,
            amp_conn: self.amp_a,
            amp_mixed: self.amp_m,
            h0: self.h0,
            t0: self.t0,
        }
    }

    pub fn controller(&self) -> StepController {
        StepController {
            cfl_sigma: self.cfl_sigma,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
            error_tol: self.error_tol,
        }
    }

    pub fn flow_options(&self) -> FlowOptions {
        FlowOptions {
            mixed_b_sign: self.b_mixed_sign,
            frame_correction_sign: self.frame_sign,
            full_h_debug: self.full_h_debug,
        }
    }

    pub fn evolve_config(&self) -> EvolveConfig {
        EvolveConfig {
            ctrl: self.controller(),
            opts: self.flow_options(),
            snapshot_cadence: self.snapshot_cadence,
            diagnostics_cadence: self.diagnostics_cadence,
        }
    }

    /// Annotated sample config with every key at its default.
    pub fn sample() -> String {
        SAMPLE.to_string()
    }
}

const SAMPLE: &str = "\
# nilflow run configuration (key = value, '#' starts a comment)

# fiber algebra: heisenberg or abelian
group = heisenberg
# bracket scale, [e1, e2] = c e3
c = 1.0

# circle length and grid size (N must be a power of two >= 16)
L = 6.283185307179586
N = 128

# time interval
t0 = 0.0
t_end = 10.0

# stepping: parabolic safety factor, embedded-pair tolerance, dt limits
cfl_sigma = 0.2
error_tol = 1e-8
dt_min = 1e-12
dt_max = 1.0

# seeded random initial data: G = exp(S(x)), g = exp(s(x)) with truncated
# Fourier series (modes <= 4, amplitudes below), plus the torsion scalar h0
seed = 42
modes = 4
amp_G = 0.03
amp_g = 0.1
amp_a = 0.05
amp_m = 0.05
h0 = 1.0

# output cadences and directory
snapshot_cadence = 0.5
diagnostics_cadence = 0.05
output_dir = out

# convention flags (frozen defaults; flip only to probe sign sensitivity)
b_mixed_sign = 1
frame_sign = 1
# carry h0 as a field and watch its drift
full_h_debug = false
";

fn is_power_of_two(n: usize) -> bool {
    n != 0 && (n & (n - 1)) == 0
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    // defaults; group/N/L/t_end are required
    let mut group: Option<LieKind> = None;
    let mut c = 1.0;
    let mut l: Option<f64> = None;
    let mut n: Option<usize> = None;
    let mut t0 = 0.0;
    let mut t_end: Option<f64> = None;
    let mut cfl_sigma = 0.2;
    let mut error_tol = 1e-8;
    let mut dt_min = 1e-12;
    let mut dt_max = 1.0;
    let mut seed = 42u64;
    let mut modes = 4usize;
    let mut amp_g_fiber = 0.03;
    let mut amp_g_base = 0.1;
    let mut amp_a = 0.05;
    let mut amp_m = 0.05;
    let mut h0 = 1.0;
    let mut snapshot_cadence = 0.5;
    let mut diagnostics_cadence = 0.05;
    let mut output_dir = "out".to_string();
    let mut b_mixed_sign = 1.0;
    let mut frame_sign = 1.0;
    let mut full_h_debug = false;

    let err = |line: usize, msg: String| Error::Config { line, msg };
    let mut seen = std::collections::BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(err(line_no, format!("duplicate key '{key}'")));
        }
        let parse_f = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| err(line_no, format!("'{key}' expects a number, got '{v}'")))
        };
        let parse_u = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| err(line_no, format!("'{key}' expects a nonnegative integer, got '{v}'")))
        };
        match key {
            "group" => {
                group = Some(value.parse().map_err(|e: String| err(line_no, e))?);
            }
            "c" => c = parse_f(value)?,
            "L" => l = Some(parse_f(value)?),
            "N" => n = Some(parse_u(value)? as usize),
            "t0" => t0 = parse_f(value)?,
            "t_end" => t_end = Some(parse_f(value)?),
            "cfl_sigma" => cfl_sigma = parse_f(value)?,
            "error_tol" => error_tol = parse_f(value)?,
            "dt_min" => dt_min = parse_f(value)?,
            "dt_max" => dt_max = parse_f(value)?,
            "seed" => seed = parse_u(value)?,
            "modes" => modes = parse_u(value)? as usize,
            "amp_G" => amp_g_fiber = parse_f(value)?,
            "amp_g" => amp_g_base = parse_f(value)?,
            "amp_a" => amp_a = parse_f(value)?,
            "amp_m" => amp_m = parse_f(value)?,
            "h0" => h0 = parse_f(value)?,
            "snapshot_cadence" => snapshot_cadence = parse_f(value)?,
            "diagnostics_cadence" => diagnostics_cadence = parse_f(value)?,
            "output_dir" => output_dir = value.to_string(),
            "b_mixed_sign" => b_mixed_sign = parse_f(value)?,
            "frame_sign" => frame_sign = parse_f(value)?,
            "full_h_debug" => {
                full_h_debug = value
                    .parse::<bool>()
                    .map_err(|_| err(line_no, format!("'{key}' expects true/false, got '{value}'")))?;
            }
            other => return Err(err(line_no, format!("unknown key '{other}'"))),
        }
    }

    let line = text.lines().count();
    let group = group.ok_or_else(|| err(line, "missing required key 'group'".into()))?;
    let n = n.ok_or_else(|| err(line, "missing required key 'N'".into()))?;
    let l = l.ok_or_else(|| err(line, "missing required key 'L'".into()))?;
    let t_end = t_end.ok_or_else(|| err(line, "missing required key 't_end'".into()))?;

    if !is_power_of_two(n) || n < 16 {
        return Err(err(line, "N must be a power of two >= 16".into()));
    }
    if !(l > 0.0) {
        return Err(err(line, "L must be positive".into()));
    }
    if !(t0 >= 0.0) || !(t_end > t0) {
        return Err(err(line, "need t_end > t0 >= 0".into()));
    }
    if !(snapshot_cadence > 0.0) || !(diagnostics_cadence > 0.0) {
        return Err(err(line, "cadences must be positive".into()));
    }
    if !(cfl_sigma > 0.0 && cfl_sigma <= 1.0) {
        return Err(err(line, "cfl_sigma must lie in (0, 1]".into()));
    }
    if group == LieKind::Heisenberg && !(c > 0.0) {
        return Err(err(line, "c must be positive for the heisenberg group".into()));
    }
    if modes > 4 {
        return Err(err(line, "modes must be at most 4".into()));
    }
    if b_mixed_sign.abs() != 1.0 || frame_sign.abs() != 1.0 {
        return Err(err(line, "sign flags must be +1 or -1".into()));
    }
    if [amp_g_fiber, amp_g_base, amp_a, amp_m].iter().any(|&a| a < 0.0) {
        return Err(err(line, "amplitudes must be nonnegative".into()));
    }

    Ok(RunConfig {
        group,
        c,
        l,
        n,
        t0,
        t_end,
        cfl_sigma,
        error_tol,
        dt_min,
        dt_max,
        seed,
        modes,
        amp_g_fiber,
        amp_g_base,
        amp_a,
        amp_m,
        h0,
        snapshot_cadence,
        diagnostics_cadence,
        output_dir,
        b_mixed_sign,
        frame_sign,
        full_h_debug,
    })
}
