//! Time-domain 2-D acoustic solver for `u_tt = div(c^2 grad u) + f`.
//!
//! Space: fourth-order staggered differences in the self-adjoint form
//! `-D^T diag(c^2_edge) D` with harmonic averaging of `c^2` on edges.
//! Time: second-order leapfrog. Absorption: a second-order PML built from
//! per-edge memory filters, which keeps the z-transform of the whole scheme
//! symmetric. Two consequences that the gradient code relies on:
//! source/receiver reciprocity holds to round-off, and the discrete adjoint of
//! a forward run is a forward run with time-reversed sources.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, VelocityModel};

/// Ricker wavelet `A (1 - 2 pi^2 f0^2 t^2) exp(-pi^2 f0^2 t^2)`.
pub fn ricker(t: f64, f0: f64, amplitude: f64) -> f64 {
    let a = (PI * f0 * t).powi(2);
    amplitude * (1.0 - 2.0 * a) * (-a).exp()
}

/// One-dimensional piecewise-quintic discrete delta with support `|x| <= 3h`.
pub fn discrete_delta(x: f64, h: f64) -> f64 {
    let r = (x / h).abs();
    let p = if r <= 1.0 {
        1.0 - 1.25 * r * r - 35.0 / 12.0 * r.powi(3) + 5.25 * r.powi(4) - 25.0 / 12.0 * r.powi(5)
    } else if r <= 2.0 {
        -4.0 + 18.75 * r - 245.0 / 8.0 * r * r + 545.0 / 24.0 * r.powi(3) - 63.0 / 8.0 * r.powi(4)
            + 25.0 / 24.0 * r.powi(5)
    } else if r <= 3.0 {
        18.0 - 38.25 * r + 255.0 / 8.0 * r * r - 313.0 / 24.0 * r.powi(3) + 21.0 / 8.0 * r.powi(4)
            - 5.0 / 24.0 * r.powi(5)
    } else {
        0.0
    };
    p / h
}

/// An earthquake: point source with a delayed Ricker time function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub x: f64,
    pub z: f64,
    /// Origin time in s.
    pub origin_time: f64,
    /// Dominant frequency in Hz.
    pub f0: f64,
    pub amplitude: f64,
    /// Shift of the wavelet peak after the origin time, in s, so that the
    /// wavelet starts from rest.
    pub delay: f64,
}

impl SourceSpec {
    pub fn new(x: f64, z: f64, f0: f64) -> Self {
        Self {
            x,
            z,
            origin_time: 0.0,
            f0,
            amplitude: 1.0,
            delay: 1.5 / f0,
        }
    }

    /// Time at which the wavelet peaks.
    pub fn peak_time(&self) -> f64 {
        self.origin_time + self.delay
    }

    pub fn wavelet(&self, t: f64) -> f64 {
        ricker(t - self.peak_time(), self.f0, self.amplitude)
    }

    pub fn time_function(&self, axis: &TimeAxis) -> Vec<f64> {
        (0..axis.nt).map(|k| self.wavelet(axis.time(k))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverSpec {
    pub x: f64,
    pub z: f64,
}

/// Uniform sampling `t_k = k dt`, `k = 0..nt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub dt: f64,
    pub nt: usize,
}

impl TimeAxis {
    pub fn new(t_final: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && t_final > 0.0) {
            return Err(Error::Config(format!(
                "time axis needs t_f > 0 and dt > 0, got t_f = {t_final}, dt = {dt}"
            )));
        }
        let steps = (t_final / dt).round();
        if steps < 2.0 {
            return Err(Error::Config("time axis needs at least two steps".into()));
        }
        Ok(Self {
            dt,
            nt: steps as usize + 1,
        })
    }

    pub fn t_final(&self) -> f64 {
        (self.nt - 1) as f64 * self.dt
    }

    /// Number of leapfrog steps (`nt - 1`).
    pub fn steps(&self) -> usize {
        self.nt - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Trapezoidal weights on the axis.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![self.dt; self.nt];
        w[0] *= 0.5;
        w[self.nt - 1] *= 0.5;
        w
    }
}

/// One receiver's time series.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub source: usize,
    pub receiver: usize,
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl Trace {
    pub fn new(source: usize, receiver: usize, dt: f64, samples: Vec<f64>) -> Self {
        Self {
            source,
            receiver,
            dt,
            samples,
        }
    }

    pub fn zeros(source: usize, receiver: usize, axis: &TimeAxis) -> Self {
        Self::new(source, receiver, axis.dt, vec![0.0; axis.nt])
    }

    pub fn t_final(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// PML thickness in simulation cells on each absorbing side.
    pub pml_layers: usize,
    /// Theoretical normal-incidence reflection coefficient of the PML.
    pub pml_reflection: f64,
    /// Velocity used in the PML damping profile; the model maximum when unset.
    /// Fix it during inversion so the damping does not depend on the model.
    pub pml_velocity: Option<f64>,
    pub cfl_safety: f64,
    /// Leave the top side reflecting (zero normal flux) instead of absorbing.
    pub reflecting_top: bool,
    /// Upper bound on stored snapshot bytes per wavefield.
    pub memory_budget_bytes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            pml_layers: 15,
            pml_reflection: 1e-3,
            pml_velocity: None,
            cfl_safety: 0.45,
            reflecting_top: false,
            memory_budget_bytes: 1 << 30,
        }
    }
}

/// Discrete-delta weights of a point on the padded grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PointStencil {
    pub entries: Vec<(usize, f64)>,
}

/// Stored time slices of a wavefield on the padded simulation grid.
///
/// Every `stride`-th step is kept (plus the last); intermediate steps are
/// linearly interpolated. A reversed wavefield stores an adjoint run in
/// reversed time and presents it in physical time.
#[derive(Clone, Debug)]
pub struct Wavefield {
    nxp: usize,
    nzp: usize,
    steps: usize,
    stride: usize,
    reversed: bool,
    frames: Vec<Vec<f64>>,
}

impl Wavefield {
    fn new(nxp: usize, nzp: usize, steps: usize, stride: usize, reversed: bool) -> Self {
        Self {
            nxp,
            nzp,
            steps,
            stride,
            reversed,
            frames: Vec::with_capacity(steps / stride + 2),
        }
    }

    fn wants(&self, raw_step: usize) -> bool {
        raw_step % self.stride == 0 || raw_step == self.steps
    }

    fn push(&mut self, frame: &[f64]) {
        self.frames.push(frame.to_vec());
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn frame_len(&self) -> usize {
        self.nxp * self.nzp
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nxp, self.nzp)
    }

    /// Field at physical time step `n` (`0..=steps`) written into `out`.
    pub fn frame_at(&self, n: usize, out: &mut [f64]) {
        let raw = if self.reversed { self.steps - n } else { n };
        let lo = raw / self.stride;
        let lo_step = lo * self.stride;
        if lo_step == raw {
            out.copy_from_slice(&self.frames[lo]);
            return;
        }
        let hi_step = ((lo + 1) * self.stride).min(self.steps);
        let hi = lo + 1;
        let w = (raw - lo_step) as f64 / (hi_step - lo_step) as f64;
        for ((o, a), b) in out.iter_mut().zip(&self.frames[lo]).zip(&self.frames[hi]) {
            *o = (1.0 - w) * a + w * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.frames
            .iter()
            .flat_map(|f| f.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Per-model precomputed solver state. Immutable after construction, so one
/// instance can serve every source of an experiment concurrently.
#[derive(Clone, Debug)]
pub struct WaveSolver {
    phys: Grid2D,
    time: TimeAxis,
    memory_budget: usize,
    nxp: usize,
    nzp: usize,
    /// Padded index of physical node (0, 0).
    ox: usize,
    oz: usize,
    dx: f64,
    dz: f64,
    // x-edges: nzp rows of (nxp - 1); z-edges: (nzp - 1) rows of nxp
    mx: Vec<f64>,
    mz: Vec<f64>,
    gx: Vec<f64>,
    ax: Vec<f64>,
    bx: Vec<f64>,
    gz: Vec<f64>,
    az: Vec<f64>,
    bz: Vec<f64>,
    // d(c^2_edge)/dc of the two nodes an edge joins
    dmx_lo: Vec<f64>,
    dmx_hi: Vec<f64>,
    dmz_lo: Vec<f64>,
    dmz_hi: Vec<f64>,
    // node update coefficients
    inv_ap: Vec<f64>,
    am: Vec<f64>,
    beta_dt2: Vec<f64>,
    // per row, index ranges where the absorbing terms are not trivial
    x_active: Vec<Vec<(usize, usize)>>,
    z_active: Vec<Vec<(usize, usize)>>,
    node_active: Vec<Vec<(usize, usize)>>,
}

/// Scratch state for one run.
struct RunState {
    prev: Vec<f64>,
    cur: Vec<f64>,
    lap: Vec<f64>,
    psi_x: Vec<f64>,
    psi_z: Vec<f64>,
    dbuf: Vec<f64>,
}

impl WaveSolver {
    pub fn new(model: &VelocityModel, config: &SolverConfig, time: TimeAxis) -> Result<Self> {
        let g = *model.grid();
        let c_max = model.max();
        let limit = config.cfl_safety * g.dx.min(g.dz) / c_max;
        if time.dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: time.dt,
                limit,
            });
        }
        let np = config.pml_layers;
        let top = if config.reflecting_top { 0 } else { np };
        let (ox, oz) = (np, top);
        let nxp = g.nx + 2 * np;
        let nzp = g.nz + top + np;
        let (dx, dz) = (g.dx, g.dz);
        let dt = time.dt;

        // clamp-extended velocity on the padded grid
        let mut c = vec![0.0; nxp * nzp];
        for iz in 0..nzp {
            let pz = iz.saturating_sub(oz).min(g.nz - 1);
            for ix in 0..nxp {
                let px = ix.saturating_sub(ox).min(g.nx - 1);
                c[iz * nxp + ix] = model.at(px, pz);
            }
        }

        let v_pml = config.pml_velocity.unwrap_or(c_max);
        let sigma_profile = |depth_cells: f64, thickness_cells: usize, h: f64| -> f64 {
            if thickness_cells == 0 || depth_cells <= 0.0 {
                return 0.0;
            }
            let l = thickness_cells as f64 * h;
            let smax = 3.0 * v_pml * (1.0 / config.pml_reflection).ln() / (2.0 * l);
            let r = (depth_cells / thickness_cells as f64).min(1.0);
            smax * r * r
        };
        // fractional padded coordinate -> damping
        let sigma_x = |px: f64| -> f64 {
            let left = ox as f64 - px;
            let right = px - (ox + g.nx - 1) as f64;
            sigma_profile(left.max(right), np, dx)
        };
        let sigma_z = |pz: f64| -> f64 {
            let upper = oz as f64 - pz;
            let lower = pz - (oz + g.nz - 1) as f64;
            let mut s = sigma_profile(lower, np, dz);
            if top > 0 {
                s = s.max(sigma_profile(upper, top, dz));
            }
            s
        };

        let harmonic = |a: f64, b: f64| -> (f64, f64, f64) {
            let (a2, b2) = (a * a, b * b);
            let s = a2 + b2;
            (2.0 * a2 * b2 / s, 4.0 * a * b2 * b2 / (s * s), 4.0 * b * a2 * a2 / (s * s))
        };
        let filter = |sigma: f64| -> (f64, f64) {
            if sigma > 0.0 {
                let a = (-sigma * dt).exp();
                (a, (1.0 - a) / sigma)
            } else {
                (1.0, dt)
            }
        };

        let nex = nxp - 1;
        let mut mx = vec![0.0; nzp * nex];
        let mut gx = vec![0.0; nzp * nex];
        let mut ax = vec![1.0; nzp * nex];
        let mut bx = vec![0.0; nzp * nex];
        let mut dmx_lo = vec![0.0; nzp * nex];
        let mut dmx_hi = vec![0.0; nzp * nex];
        for iz in 0..nzp {
            let sz = sigma_z(iz as f64);
            for e in 0..nex {
                let k = iz * nex + e;
                let (m, dlo, dhi) = harmonic(c[iz * nxp + e], c[iz * nxp + e + 1]);
                let sx = sigma_x(e as f64 + 0.5);
                let (a, b) = filter(sx);
                mx[k] = m;
                dmx_lo[k] = dlo;
                dmx_hi[k] = dhi;
                gx[k] = m * (sz - sx);
                ax[k] = a;
                bx[k] = b;
            }
        }
        let mut mz = vec![0.0; (nzp - 1) * nxp];
        let mut gz = vec![0.0; (nzp - 1) * nxp];
        let mut az = vec![1.0; (nzp - 1) * nxp];
        let mut bz = vec![0.0; (nzp - 1) * nxp];
        let mut dmz_lo = vec![0.0; (nzp - 1) * nxp];
        let mut dmz_hi = vec![0.0; (nzp - 1) * nxp];
        for e in 0..nzp - 1 {
            let sz = sigma_z(e as f64 + 0.5);
            let (a, b) = filter(sz);
            for ix in 0..nxp {
                let k = e * nxp + ix;
                let (m, dlo, dhi) = harmonic(c[e * nxp + ix], c[(e + 1) * nxp + ix]);
                let sx = sigma_x(ix as f64);
                mz[k] = m;
                dmz_lo[k] = dlo;
                dmz_hi[k] = dhi;
                gz[k] = m * (sx - sz);
                az[k] = a;
                bz[k] = b;
            }
        }
        let mut inv_ap = vec![1.0; nxp * nzp];
        let mut am = vec![1.0; nxp * nzp];
        let mut beta_dt2 = vec![0.0; nxp * nzp];
        for iz in 0..nzp {
            let sz = sigma_z(iz as f64);
            for ix in 0..nxp {
                let sx = sigma_x(ix as f64);
                let k = iz * nxp + ix;
                let s = 0.5 * dt * (sx + sz);
                inv_ap[k] = 1.0 / (1.0 + s);
                am[k] = 1.0 - s;
                beta_dt2[k] = dt * dt * sx * sz;
            }
        }

        let x_active = (0..nzp)
            .map(|iz| {
                let r = iz * nex..(iz + 1) * nex;
                active_ranges(r.map(|k| gx[k] != 0.0 || ax[k] != 1.0 || bx[k] != 0.0))
            })
            .collect();
        let z_active = (0..nzp - 1)
            .map(|e| {
                let r = e * nxp..(e + 1) * nxp;
                active_ranges(r.map(|k| gz[k] != 0.0 || az[k] != 1.0 || bz[k] != 0.0))
            })
            .collect();
        let node_active = (0..nzp)
            .map(|iz| {
                let r = iz * nxp..(iz + 1) * nxp;
                active_ranges(r.map(|k| inv_ap[k] != 1.0 || am[k] != 1.0 || beta_dt2[k] != 0.0))
            })
            .collect();

        Ok(Self {
            phys: g,
            time,
            memory_budget: config.memory_budget_bytes,
            nxp,
            nzp,
            ox,
            oz,
            dx,
            dz,
            mx,
            mz,
            gx,
            ax,
            bx,
            gz,
            az,
            bz,
            dmx_lo,
            dmx_hi,
            dmz_lo,
            dmz_hi,
            inv_ap,
            am,
            beta_dt2,
            x_active,
            z_active,
            node_active,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.phys
    }

    pub fn time(&self) -> &TimeAxis {
        &self.time
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.nxp, self.nzp)
    }

    /// Padded index of physical node `(ix, iz)`.
    pub fn padded_index(&self, ix: usize, iz: usize) -> usize {
        (iz + self.oz) * self.nxp + ix + self.ox
    }

    /// Discrete-delta stencil of a point inside the physical domain.
    pub fn stencil(&self, x: f64, z: f64) -> Result<PointStencil> {
        let g = &self.phys;
        if !g.contains_strictly(x, z) {
            return Err(Error::Config(format!(
                "point ({x}, {z}) is not strictly inside the physical domain"
            )));
        }
        let px = (x - g.x0) / self.dx + self.ox as f64;
        let pz = (z - g.z0) / self.dz + self.oz as f64;
        let mut entries = Vec::new();
        let (ix0, iz0) = (px.floor() as i64 - 3, pz.floor() as i64 - 3);
        let mut lost = 0.0;
        for iz in iz0..=iz0 + 7 {
            let wz = discrete_delta(iz as f64 - pz, 1.0) / self.dz;
            if wz == 0.0 {
                continue;
            }
            for ix in ix0..=ix0 + 7 {
                let wx = discrete_delta(ix as f64 - px, 1.0) / self.dx;
                if wx == 0.0 {
                    continue;
                }
                if ix < 0 || iz < 0 || ix >= self.nxp as i64 || iz >= self.nzp as i64 {
                    lost += (wx * wz).abs();
                    continue;
                }
                entries.push((iz as usize * self.nxp + ix as usize, wx * wz));
            }
        }
        if lost > 0.0 {
            return Err(Error::Config(format!(
                "point ({x}, {z}) is too close to the grid edge for the delta stencil"
            )));
        }
        Ok(PointStencil { entries })
    }

    fn new_state(&self) -> RunState {
        let n = self.nxp * self.nzp;
        RunState {
            prev: vec![0.0; n],
            cur: vec![0.0; n],
            lap: vec![0.0; n],
            psi_x: vec![0.0; self.nzp * (self.nxp - 1)],
            psi_z: vec![0.0; (self.nzp - 1) * self.nxp],
            dbuf: vec![0.0; self.nxp],
        }
    }

    /// Storage stride that keeps a wavefield within the memory budget.
    pub fn storage_stride(&self) -> usize {
        let frame = (self.nxp * self.nzp * std::mem::size_of::<f64>()) as f64;
        let frames = (self.time.steps() + 1) as f64;
        ((frame * frames / self.memory_budget.max(1) as f64).ceil() as usize).max(1)
    }

    /// Runs the scheme with the given injections (stencil and per-step time
    /// function) and returns recordings at `receivers` for all `nt` samples.
    pub fn run(
        &self,
        injections: &[(&PointStencil, &[f64])],
        receivers: &[PointStencil],
        store: bool,
        reversed: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<Wavefield>)> {
        self.run_with(injections, receivers, store, reversed, |_, _| Ok(()))
    }

    /// As [`WaveSolver::run`], calling `visit(n, u^n)` after every step
    /// (including the zero initial state).
    pub fn run_with<F>(
        &self,
        injections: &[(&PointStencil, &[f64])],
        receivers: &[PointStencil],
        store: bool,
        reversed: bool,
        mut visit: F,
    ) -> Result<(Vec<Vec<f64>>, Option<Wavefield>)>
    where
        F: FnMut(usize, &[f64]) -> Result<()>,
    {
        let nt = self.time.nt;
        for (_, f) in injections {
            if f.len() < nt - 1 {
                return Err(Error::Internal(format!(
                    "source time function has {} samples, need {}",
                    f.len(),
                    nt - 1
                )));
            }
        }
        let dt2 = self.time.dt * self.time.dt;
        let area = self.dx * self.dz;
        let mut st = self.new_state();
        let mut rec = vec![vec![0.0; nt]; receivers.len()];
        let mut field = store.then(|| {
            Wavefield::new(self.nxp, self.nzp, self.time.steps(), self.storage_stride(), reversed)
        });
        if let Some(f) = field.as_mut() {
            f.push(&st.cur);
        }
        visit(0, &st.cur)?;
        for step in 0..self.time.steps() {
            st.lap.iter_mut().for_each(|v| *v = 0.0);
            self.apply_stiffness(&mut st);
            for (stencil, f) in injections {
                let a = f[step];
                if a != 0.0 {
                    for &(k, w) in &stencil.entries {
                        st.lap[k] += w * a;
                    }
                }
            }
            // leapfrog update written into prev, then swap
            for (iz, ranges) in self.node_active.iter().enumerate() {
                let base = iz * self.nxp;
                let mut start = 0;
                for &(lo, hi) in ranges.iter().chain(std::iter::once(&(self.nxp, self.nxp))) {
                    let plain = base + start..base + lo;
                    for ((p, u), l) in st.prev[plain.clone()].iter_mut().zip(&st.cur[plain.clone()]).zip(&st.lap[plain]) {
                        *p = 2.0 * u - *p + dt2 * l;
                    }
                    for k in base + lo..base + hi {
                        let u = st.cur[k];
                        st.prev[k] = self.inv_ap[k]
                            * (2.0 * u - self.am[k] * st.prev[k] - self.beta_dt2[k] * u + dt2 * st.lap[k]);
                    }
                    start = hi;
                }
            }
            std::mem::swap(&mut st.prev, &mut st.cur);
            let n = step + 1;
            for (r, s) in receivers.iter().zip(rec.iter_mut()) {
                s[n] = area * r.entries.iter().map(|&(k, w)| w * st.cur[k]).sum::<f64>();
            }
            if n % 50 == 0 || n == self.time.steps() {
                if !st.cur.iter().all(|v| v.is_finite()) {
                    return Err(Error::Unstable { step: n });
                }
            }
            if let Some(f) = field.as_mut() {
                if f.wants(n) {
                    f.push(&st.cur);
                }
            }
            visit(n, &st.cur)?;
        }
        Ok((rec, field))
    }

    /// `lap += -D^T (c^2 D u + PML memory terms)` for the current field.
    fn apply_stiffness(&self, st: &mut RunState) {
        let (nxp, nzp) = (self.nxp, self.nzp);
        let nex = nxp - 1;
        let c4x = 1.0 / (24.0 * self.dx);
        let c2x = 1.0 / self.dx;
        let c4z = 1.0 / (24.0 * self.dz);
        let c2z = 1.0 / self.dz;
        let u = &st.cur;
        let lap = &mut st.lap;

        // x-direction, row by row: edge fluxes first, then their divergence
        let flux = &mut st.dbuf;
        for iz in 0..nzp {
            let row = &u[iz * nxp..(iz + 1) * nxp];
            let out = &mut lap[iz * nxp..(iz + 1) * nxp];
            let base = iz * nex;
            let mx = &self.mx[base..base + nex];
            let gx = &self.gx[base..base + nex];
            let ax = &self.ax[base..base + nex];
            let bx = &self.bx[base..base + nex];
            let psi = &mut st.psi_x[base..base + nex];
            let flux = &mut flux[..nex];
            flux[0] = (row[1] - row[0]) * c2x;
            for (f, r) in flux[1..nex - 1].iter_mut().zip(row.windows(4)) {
                *f = (27.0 * (r[2] - r[1]) - (r[3] - r[0])) * c4x;
            }
            flux[nex - 1] = (row[nex] - row[nex - 1]) * c2x;
            for &(lo, hi) in &self.x_active[iz] {
                for e in lo..hi {
                    psi[e] = ax[e] * psi[e] + bx[e] * flux[e];
                }
            }
            for (f, m) in flux.iter_mut().zip(mx) {
                *f *= m;
            }
            for &(lo, hi) in &self.x_active[iz] {
                for e in lo..hi {
                    flux[e] += gx[e] * psi[e];
                }
            }
            // the two end edges use the second-order pair
            let (q0, ql) = (flux[0] * c2x, flux[nex - 1] * c2x);
            out[0] += q0;
            out[1] -= q0;
            out[nex - 1] += ql;
            out[nex] -= ql;
            let w = |e: usize| if e >= 1 && e + 1 < nex { flux[e] * c4x } else { 0.0 };
            for i in 0..nxp.min(3) {
                out[i] += fourth_divergence(&w, i, nex);
            }
            if nxp > 6 {
                for (o, f) in out[3..nxp - 3].iter_mut().zip(flux[1..].windows(4)) {
                    *o += 27.0 * (f[2] - f[1]) * c4x - (f[3] - f[0]) * c4x;
                }
            }
            for i in nxp.saturating_sub(3).max(3)..nxp {
                out[i] += fourth_divergence(&w, i, nex);
            }
        }

        // z-direction, one edge row at a time
        let d = &mut st.dbuf[..nxp];
        for e in 0..nzp - 1 {
            let fourth = e >= 1 && e + 2 < nzp;
            let r0 = &u[e * nxp..(e + 1) * nxp];
            let r1 = &u[(e + 1) * nxp..(e + 2) * nxp];
            if fourth {
                let rm = &u[(e - 1) * nxp..e * nxp];
                let r2 = &u[(e + 2) * nxp..(e + 3) * nxp];
                for ((((d, a), b), c), m) in d.iter_mut().zip(r1).zip(r0).zip(r2).zip(rm) {
                    *d = (27.0 * (a - b) - (c - m)) * c4z;
                }
            } else {
                for ((d, a), b) in d.iter_mut().zip(r1).zip(r0) {
                    *d = (a - b) * c2z;
                }
            }
            let base = e * nxp;
            let mz = &self.mz[base..base + nxp];
            let gz = &self.gz[base..base + nxp];
            let az = &self.az[base..base + nxp];
            let bz = &self.bz[base..base + nxp];
            let psi = &mut st.psi_z[base..base + nxp];
            for &(lo, hi) in &self.z_active[e] {
                for ix in lo..hi {
                    psi[ix] = az[ix] * psi[ix] + bz[ix] * d[ix];
                }
            }
            for (d, m) in d.iter_mut().zip(mz) {
                *d *= m;
            }
            for &(lo, hi) in &self.z_active[e] {
                for ix in lo..hi {
                    d[ix] += gz[ix] * psi[ix];
                }
            }
            if fourth {
                let (head, tail) = lap.split_at_mut((e + 1) * nxp);
                let (lm, l0) = head[(e - 1) * nxp..].split_at_mut(nxp);
                let (l1, rest) = tail.split_at_mut(nxp);
                let l2 = &mut rest[..nxp];
                for ((((q, l1), l0), l2), lm) in d.iter().zip(l1).zip(l0).zip(l2).zip(lm) {
                    let q1 = q * c4z;
                    *l1 -= 27.0 * q1;
                    *l0 += 27.0 * q1;
                    *l2 += q1;
                    *lm -= q1;
                }
            } else {
                let (head, tail) = lap.split_at_mut((e + 1) * nxp);
                let l0 = &mut head[e * nxp..];
                let l1 = &mut tail[..nxp];
                for ((q, l1), l0) in d.iter().zip(l1).zip(l0) {
                    let q1 = q * c2z;
                    *l1 -= q1;
                    *l0 += q1;
                }
            }
        }
    }

    /// Accumulates `sum_e d(c^2_e)/dc_node (D a)_e (D b)_e` onto padded nodes.
    pub fn accumulate_sensitivity(&self, a: &[f64], b: &[f64], acc: &mut [f64]) {
        let (nxp, nzp) = (self.nxp, self.nzp);
        let nex = nxp - 1;
        for iz in 0..nzp {
            let ra = &a[iz * nxp..(iz + 1) * nxp];
            let rb = &b[iz * nxp..(iz + 1) * nxp];
            let out = &mut acc[iz * nxp..(iz + 1) * nxp];
            let base = iz * nex;
            for e in 0..nex {
                let p = self.diff_x(ra, e) * self.diff_x(rb, e);
                out[e] += self.dmx_lo[base + e] * p;
                out[e + 1] += self.dmx_hi[base + e] * p;
            }
        }
        for e in 0..nzp - 1 {
            let base = e * nxp;
            for ix in 0..nxp {
                let p = self.diff_z(a, e, ix) * self.diff_z(b, e, ix);
                acc[base + ix] += self.dmz_lo[base + ix] * p;
                acc[base + nxp + ix] += self.dmz_hi[base + ix] * p;
            }
        }
    }

    /// Extracts the physical-domain part of a padded field.
    pub fn physical_part(&self, padded: &[f64]) -> Vec<f64> {
        let g = &self.phys;
        let mut out = Vec::with_capacity(g.len());
        for iz in 0..g.nz {
            let start = self.padded_index(0, iz);
            out.extend_from_slice(&padded[start..start + g.nx]);
        }
        out
    }

    /// Discrete energy of the leapfrog scheme over the physical region:
    /// `|(b - a)/dt|^2 + <c^2 D b, D a>` for consecutive frames `a`, `b`,
    /// summed over nodes and edges that lie inside the physical domain.
    pub fn physical_energy(&self, before: &[f64], after: &[f64]) -> f64 {
        let g = &self.phys;
        let dt = self.time.dt;
        let nxp = self.nxp;
        let nex = nxp - 1;
        let mut e = 0.0;
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                let k = self.padded_index(ix, iz);
                let v = (after[k] - before[k]) / dt;
                e += v * v;
            }
        }
        for iz in 0..g.nz {
            let pz = iz + self.oz;
            let ra = &before[pz * nxp..(pz + 1) * nxp];
            let rb = &after[pz * nxp..(pz + 1) * nxp];
            for px in self.ox..self.ox + g.nx - 1 {
                e += self.mx[pz * nex + px] * self.diff_x(ra, px) * self.diff_x(rb, px);
            }
        }
        for pz in self.oz..self.oz + g.nz - 1 {
            for px in self.ox..self.ox + g.nx {
                let da = self.diff_z(before, pz, px);
                let db = self.diff_z(after, pz, px);
                e += self.mz[pz * nxp + px] * da * db;
            }
        }
        e * self.dx * self.dz
    }

    fn diff_x(&self, row: &[f64], e: usize) -> f64 {
        if e >= 1 && e + 2 < self.nxp {
            (27.0 * (row[e + 1] - row[e]) - (row[e + 2] - row[e - 1])) / (24.0 * self.dx)
        } else {
            (row[e + 1] - row[e]) / self.dx
        }
    }

    fn diff_z(&self, u: &[f64], e: usize, ix: usize) -> f64 {
        let n = self.nxp;
        if e >= 1 && e + 2 < self.nzp {
            (27.0 * (u[(e + 1) * n + ix] - u[e * n + ix]) - (u[(e + 2) * n + ix] - u[(e - 1) * n + ix]))
                / (24.0 * self.dz)
        } else {
            (u[(e + 1) * n + ix] - u[e * n + ix]) / self.dz
        }
    }
}

/// Forward solve for one source; returns one trace per receiver and, when
/// `store` is set, the wavefield needed for kernel correlation.
pub fn solve_forward(
    solver: &WaveSolver,
    source_id: usize,
    source: &SourceSpec,
    receivers: &[ReceiverSpec],
    store: bool,
) -> Result<(Vec<Trace>, Option<Wavefield>)> {
    let stencil = solver.stencil(source.x, source.z)?;
    let wavelet = source.time_function(solver.time());
    let rs = receivers
        .iter()
        .map(|r| solver.stencil(r.x, r.z))
        .collect::<Result<Vec<_>>>()?;
    let (rec, field) = solver.run(&[(&stencil, &wavelet)], &rs, store, false)?;
    let dt = solver.time().dt;
    let traces = rec
        .into_iter()
        .enumerate()
        .map(|(j, s)| Trace::new(source_id, j, dt, s))
        .collect();
    Ok((traces, field))
}

/// Adjoint solve: `w_tt = div(c^2 grad w) + sum_j Q_j(t) delta(x - eta_j)` with
/// zero terminal data, integrated as a forward run in reversed time.
///
/// The returned wavefield is indexed in physical time and is scaled so that
/// correlating it with the forward field gives the exact gradient of the
/// discrete trapezoidal misfit.
pub fn solve_with_adjoint_sources(
    solver: &WaveSolver,
    injections: &[(ReceiverSpec, &Trace)],
) -> Result<Wavefield> {
    let (stencils, series) = adjoint_injections(solver, injections)?;
    let inj: Vec<(&PointStencil, &[f64])> = stencils
        .iter()
        .zip(&series)
        .map(|(s, f)| (s, f.as_slice()))
        .collect();
    let (_, field) = solver.run(&inj, &[], true, true)?;
    field.ok_or_else(|| Error::Internal("adjoint run did not store a wavefield".into()))
}

/// Stencils and reversed-time source series of an adjoint run. The series
/// carry the trapezoidal end weights of the misfit's time integral.
pub fn adjoint_injections(
    solver: &WaveSolver,
    injections: &[(ReceiverSpec, &Trace)],
) -> Result<(Vec<PointStencil>, Vec<Vec<f64>>)> {
    let axis = *solver.time();
    let n = axis.steps();
    let mut stencils = Vec::with_capacity(injections.len());
    let mut series = Vec::with_capacity(injections.len());
    for (r, q) in injections {
        if q.samples.len() != axis.nt {
            return Err(Error::Internal(format!(
                "adjoint source has {} samples, time axis has {}",
                q.samples.len(),
                axis.nt
            )));
        }
        stencils.push(solver.stencil(r.x, r.z)?);
        let rev: Vec<f64> = (0..axis.nt)
            .map(|k| {
                let m = n - k;
                let w = if m == 0 || m == n { 0.5 } else { 1.0 };
                q.samples[m] * w
            })
            .collect();
        series.push(rev);
    }
    Ok((stencils, series))
}


/// Maximal runs `[lo, hi)` of true flags.
fn active_ranges(flags: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open = None;
    let mut n = 0;
    for (k, f) in flags.enumerate() {
        match (f, open) {
            (true, None) => open = Some(k),
            (false, Some(lo)) => {
                out.push((lo, k));
                open = None;
            }
            _ => {}
        }
        n = k + 1;
    }
    if let Some(lo) = open {
        out.push((lo, n));
    }
    out
}

/// Node `i` share of `-D^T` applied to weighted fourth-order edge fluxes `w`.
#[inline]
fn fourth_divergence(w: &impl Fn(usize) -> f64, i: usize, nex: usize) -> f64 {
    let at = |e: isize| if e >= 0 && (e as usize) < nex { w(e as usize) } else { 0.0 };
    let i = i as isize;
    27.0 * (at(i) - at(i - 1)) - (at(i + 1) - at(i - 2))
}
