//! Plain-text and binary file formats for models, traces, windows, maps
//! and convergence logs.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, VelocityModel};
use crate::picking::PhaseWindow;
use crate::transport::TransportMap;
use crate::wave::Trace;

const TRACE_MAGIC: &[u8; 4] = b"W2TR";
const TRACE_VERSION: u32 = 1;

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{what}: cannot parse '{tok}' as a number")))
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.trim()
        .parse::<usize>()
        .map_err(|_| Error::Parse(format!("{what}: cannot parse '{tok}' as a count")))
}

/// Grid file: a header line `nx nz dx dz x0 z0`, then one line of `nx`
/// values per depth row.
pub fn grid_text(grid: &Grid2D, values: &[f64]) -> String {
    let mut out = format!("{} {} {} {} {} {}\n", grid.nx, grid.nz, grid.dx, grid.dz, grid.x0, grid.z0);
    for row in values.chunks(grid.nx) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_grid_text(text: &str) -> Result<(Grid2D, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("grid file is empty".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 6 {
        return Err(Error::Parse(format!("grid header needs 6 fields (nx nz dx dz x0 z0), got {}", h.len())));
    }
    let nx = parse_usize(h[0], "grid header nx")?;
    let nz = parse_usize(h[1], "grid header nz")?;
    let grid = Grid2D::new(
        (parse_f64(h[4], "grid header x0")?, parse_f64(h[5], "grid header z0")?),
        (parse_f64(h[2], "grid header dx")?, parse_f64(h[3], "grid header dz")?),
        (nx, nz),
    )?;
    let mut values = Vec::with_capacity(grid.len());
    for (r, line) in lines.enumerate() {
        let before = values.len();
        for tok in line.split_whitespace() {
            values.push(parse_f64(tok, &format!("grid row {r}"))?);
        }
        if values.len() - before != nx {
            return Err(Error::Parse(format!("grid row {r} has {} values, expected {nx}", values.len() - before)));
        }
    }
    if values.len() != grid.len() {
        return Err(Error::Parse(format!("grid has {} rows, expected {nz}", values.len() / nx)));
    }
    Ok((grid, values))
}

pub fn write_grid(path: &Path, grid: &Grid2D, values: &[f64]) -> Result<()> {
    fs::write(path, grid_text(grid, values))?;
    Ok(())
}

pub fn write_model(path: &Path, model: &VelocityModel) -> Result<()> {
    write_grid(path, model.grid(), model.values())
}

pub fn read_model(path: &Path) -> Result<VelocityModel> {
    let text = fs::read_to_string(path)?;
    let (grid, values) = parse_grid_text(&text)?;
    VelocityModel::new(grid, values)
}

/// Grid values as CSV rows `x,z,value` for plotting.
pub fn grid_csv(grid: &Grid2D, values: &[f64], column: &str) -> String {
    let mut out = format!("x,z,{column}\n");
    for (ix, iz, x, z) in grid.nodes() {
        let _ = writeln!(out, "{x},{z},{}", values[grid.index(ix, iz)]);
    }
    out
}

/// Trace CSV: a header `i,j,dt,t_f`, its values, then one sample per row.
pub fn trace_csv(trace: &Trace) -> String {
    let mut out = String::from("i,j,dt,t_f\n");
    let _ = writeln!(out, "{},{},{},{}", trace.source, trace.receiver, trace.dt, trace.t_final());
    for v in &trace.samples {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<Trace> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "i,j,dt,t_f" => {}
        _ => return Err(Error::Parse("trace file must start with the header i,j,dt,t_f".into())),
    }
    let meta = lines.next().ok_or_else(|| Error::Parse("trace file has no metadata row".into()))?;
    let f: Vec<&str> = meta.split(',').collect();
    if f.len() != 4 {
        return Err(Error::Parse("trace metadata row needs 4 fields".into()));
    }
    let i = parse_usize(f[0], "trace source index")?;
    let j = parse_usize(f[1], "trace receiver index")?;
    let dt = parse_f64(f[2], "trace dt")?;
    let t_f = parse_f64(f[3], "trace t_f")?;
    let samples = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| parse_f64(l, &format!("trace sample {k}")))
        .collect::<Result<Vec<f64>>>()?;
    let trace = Trace::new(i, j, dt, samples);
    if (trace.t_final() - t_f).abs() > 1e-9 * t_f.max(1.0) {
        return Err(Error::Parse(format!(
            "trace ({i},{j}) has {} samples, inconsistent with t_f = {t_f}",
            trace.len()
        )));
    }
    Ok(trace)
}

pub fn write_trace_csv(path: &Path, trace: &Trace) -> Result<()> {
    fs::write(path, trace_csv(trace))?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Trace> {
    parse_trace_csv(&fs::read_to_string(path)?)
}

/// Binary trace bundle: `W2TR`, a format version, a record count, then per
/// record `i, j, dt, t_f, n` followed by `n` samples, all little endian.
pub fn write_traces_bin(path: &Path, traces: &[Trace]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(traces.len() as u64).to_le_bytes())?;
    for t in traces {
        w.write_all(&(t.source as u64).to_le_bytes())?;
        w.write_all(&(t.receiver as u64).to_le_bytes())?;
        w.write_all(&t.dt.to_le_bytes())?;
        w.write_all(&t.t_final().to_le_bytes())?;
        w.write_all(&(t.samples.len() as u64).to_le_bytes())?;
        for v in &t.samples {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        if end > self.bytes.len() {
            return Err(Error::Parse("binary trace file is truncated".into()));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.at..end]);
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn read_traces_bin(path: &Path) -> Result<Vec<Trace>> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if &c.take::<4>()? != TRACE_MAGIC {
        return Err(Error::Parse(format!("{} is not a binary trace file", path.display())));
    }
    let version = u32::from_le_bytes(c.take()?);
    if version != TRACE_VERSION {
        return Err(Error::Parse(format!("binary trace format version {version} is not supported")));
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let i = c.u64()? as usize;
        let j = c.u64()? as usize;
        let dt = c.f64()?;
        let _t_f = c.f64()?;
        let n = c.u64()? as usize;
        if n > bytes.len() / 8 {
            return Err(Error::Parse("binary trace record length is corrupt".into()));
        }
        let samples = (0..n).map(|_| c.f64()).collect::<Result<Vec<f64>>>()?;
        out.push(Trace::new(i, j, dt, samples));
    }
    if c.at != bytes.len() {
        return Err(Error::Parse("binary trace file has trailing bytes".into()));
    }
    Ok(out)
}

/// Acceptance table `i,j,t_lo,t_hi,accepted,reason`.
pub fn windows_csv(windows: &[PhaseWindow]) -> String {
    let mut out = String::from("i,j,t_lo,t_hi,accepted,reason\n");
    for w in windows {
        let reason = w.rejected.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", w.source, w.receiver, w.t_lo, w.t_hi, w.accepted(), reason);
    }
    out
}

/// Map samples `t,T,U` with `U` the nodal potential.
pub fn map_csv(map: &TransportMap) -> String {
    let mut out = String::from("t,T,U\n");
    let u = map.potential();
    for (k, (t_map, u)) in map.nodes().iter().zip(&u).enumerate() {
        let _ = writeln!(out, "{},{t_map},{u}", k as f64 * map.dt());
    }
    out
}
