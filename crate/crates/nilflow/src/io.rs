//! Snapshot and time-series persistence.
//!
//! Snapshots are plain text, lossless for binary64 (17 significant digits),
//! and diffable. The diagnostics series is CSV with a versioned schema. All
//! file writes go through write-temp-then-rename. Numeric output always uses
//! `.` as the decimal separator (Rust float formatting is locale-independent).

use crate::algebra::{LieKind, LieStructure};
use crate::diagnostics::DiagnosticsRecord;
use crate::error::{Error, Result};
use crate::flow::FlowState;
use crate::grid::Grid;
use crate::{Mat3, Vec3};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Parallelism cap from `NILFLOW_THREADS` (defaults to the machine's
/// available parallelism).
pub fn thread_cap() -> usize {
    match std::env::var("NILFLOW_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// 17 significant digits: round-trips every f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write-temp-then-rename so readers never observe partial files.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).expect("serializable report");
    body.push('\n');
    atomic_write(path, body.as_bytes())
}

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
pub const SERIES_SCHEMA_VERSION: u32 = 1;

/// Serialize a state: `key: value` header lines, then one row per grid point
/// with columns `x g G11 G12 G13 G22 G23 G33 a1 a2 a3 m12 m13 m23`.
pub fn snapshot_to_string(s: &FlowState) -> String {
    let mut out = String::new();
    writeln!(out, "schema_version: {SNAPSHOT_SCHEMA_VERSION}").unwrap();
    writeln!(out, "t: {}", fmt_f64(s.t)).unwrap();
    writeln!(out, "N: {}", s.grid.n).unwrap();
    writeln!(out, "L: {}", fmt_f64(s.grid.len)).unwrap();
    writeln!(out, "group: {}", s.lie.kind).unwrap();
    writeln!(out, "c: {}", fmt_f64(s.lie.c)).unwrap();
    writeln!(out, "h0: {}", fmt_f64(s.h0)).unwrap();
    for i in 0..s.grid.n {
        let g = &s.fiber[i];
        let a = &s.conn[i];
        let m = &s.mixed[i];
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            fmt_f64(s.grid.x(i)),
            fmt_f64(s.base[i]),
            fmt_f64(g[(0, 0)]),
            fmt_f64(g[(0, 1)]),
            fmt_f64(g[(0, 2)]),
            fmt_f64(g[(1, 1)]),
            fmt_f64(g[(1, 2)]),
            fmt_f64(g[(2, 2)]),
            fmt_f64(a[0]),
            fmt_f64(a[1]),
            fmt_f64(a[2]),
            fmt_f64(m[(0, 1)]),
            fmt_f64(m[(0, 2)]),
            fmt_f64(m[(1, 2)]),
        )
        .unwrap();
    }
    out
}

/// Write a snapshot as `<dir>/t=<time>.txt`.
pub fn write_snapshot(dir: &Path, s: &FlowState) -> Result<PathBuf> {
    let path = dir.join(format!("t={:.6}.txt", s.t));
    atomic_write(&path, snapshot_to_string(s).as_bytes())?;
    Ok(path)
}

pub fn read_snapshot(path: &Path) -> Result<FlowState> {
    snapshot_from_str(&std::fs::read_to_string(path)?)
}

pub fn snapshot_from_str(text: &str) -> Result<FlowState> {
    let mut lines = text.lines();
    let mut header = std::collections::BTreeMap::new();
    for _ in 0..7 {
        let line = lines
            .next()
            .ok_or_else(|| Error::Snapshot("truncated header".into()))?;
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Snapshot(format!("bad header line '{line}'")))?;
        header.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        header.get(k).ok_or_else(|| Error::Snapshot(format!("missing header key '{k}'")))
    };
    let version: u32 = get("schema_version")?
        .parse()
        .map_err(|_| Error::Snapshot("bad schema_version".into()))?;
    if version != SNAPSHOT_SCHEMA_VERSION {
        return Err(Error::Snapshot(format!("unsupported schema_version {version}")));
    }
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?.parse::<f64>().map_err(|_| Error::Snapshot(format!("bad numeric header '{k}'")))
    };
    let t = parse_f("t")?;
    let n: usize =
        get("N")?.parse().map_err(|_| Error::Snapshot("bad N".into()))?;
    let len = parse_f("L")?;
    let kind: LieKind = get("group")?.parse().map_err(Error::Snapshot)?;
    let c = parse_f("c")?;
    let h0 = parse_f("h0")?;

    let grid = Grid::new(n, len)?;
    let lie = LieStructure::new(kind, c);
    let mut fiber = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    let mut conn = Vec::with_capacity(n);
    let mut mixed = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Snapshot(format!("missing data row {i}")))?;
        let vals: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Snapshot(format!("bad number in row {i}")))?;
        if vals.len() != 14 {
            return Err(Error::Snapshot(format!("row {i} has {} columns, expected 14", vals.len())));
        }
        base.push(vals[1]);
        fiber.push(Mat3::new(
            vals[2], vals[3], vals[4],
            vals[3], vals[5], vals[6],
            vals[4], vals[6], vals[7],
        ));
        conn.push(Vec3::new(vals[8], vals[9], vals[10]));
        mixed.push(Mat3::new(
            0.0, vals[11], vals[12],
            -vals[11], 0.0, vals[13],
            -vals[12], -vals[13], 0.0,
        ));
    }
    let state = FlowState { t, grid, lie, fiber, base, conn, h0, mixed, h_field: None };
    state.validate()?;
    Ok(state)
}

pub const SERIES_COLUMNS: &[&str] = &[
    "t",
    "h0",
    "volume",
    "diameter",
    "energy",
    "bracket_sup",
    "bracket_mean",
    "hg_sup",
    "hg_mean",
    "dg_sup",
    "dg_mean",
    "trh2_sup",
    "trh2_mean",
    "qsum_sup",
    "qsum_mean",
    "tracedg_sup",
    "tracedg_mean",
    "sa_sup",
    "sa_mean",
    "sb_sup",
    "sb_mean",
    "d2_sup",
    "d2_mean",
    "mon_bracket",
    "mon_hg",
    "mon_qsum",
    "mon_d2",
    "sb_integral",
    "qdev_integral",
];

/// Accumulates diagnostics rows and writes `series.csv` atomically.
pub struct SeriesWriter {
    buf: String,
}

impl Default for SeriesWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl SeriesWriter {
    pub fn new() -> Self {
        let mut buf = String::new();
        writeln!(buf, "schema_version,{SERIES_SCHEMA_VERSION}").unwrap();
        writeln!(buf, "{}", SERIES_COLUMNS.join(",")).unwrap();
        SeriesWriter { buf }
    }

    pub fn push(&mut self, rec: &DiagnosticsRecord) {
        let cols = [
            rec.t,
            rec.h0,
            rec.volume,
            rec.diameter,
            rec.energy,
            rec.bracket.sup,
            rec.bracket.mean,
            rec.hg.sup,
            rec.hg.mean,
            rec.dg.sup,
            rec.dg.mean,
            rec.trh2.sup,
            rec.trh2.mean,
            rec.qsum.sup,
            rec.qsum.mean,
            rec.tracedg.sup,
            rec.tracedg.mean,
            rec.sa.sup,
            rec.sa.mean,
            rec.sb.sup,
            rec.sb.mean,
            rec.d2.sup,
            rec.d2.mean,
            rec.mon_bracket,
            rec.mon_hg,
            rec.mon_qsum,
            rec.mon_d2,
            rec.sb_integral,
            rec.qdev_integral,
        ];
        let row: Vec<String> = cols.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(self.buf, "{}", row.join(",")).unwrap();
    }

    pub fn contents(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.buf.as_bytes())
    }
}
