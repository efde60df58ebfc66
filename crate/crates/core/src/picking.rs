//! Direct-phase picking: first-arrival traveltimes, time windows around the
//! direct arrival, and rejection of pairs whose direct phase is contaminated
//! by a reflection.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, VelocityModel};
use crate::transport::trapezoid_dot;
use crate::wave::{ReceiverSpec, SourceSpec, TimeAxis, Trace};

/// First-arrival times of one source on the model grid.
#[derive(Clone, Debug)]
pub struct TraveltimeField {
    grid: Grid2D,
    times: Vec<f64>,
}

impl TraveltimeField {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.times
    }

    /// Bilinear interpolation, clamped to the grid.
    pub fn at(&self, x: f64, z: f64) -> f64 {
        let g = &self.grid;
        let fx = ((x - g.x0) / g.dx).clamp(0.0, (g.nx - 1) as f64);
        let fz = ((z - g.z0) / g.dz).clamp(0.0, (g.nz - 1) as f64);
        let ix = (fx.floor() as usize).min(g.nx.saturating_sub(2));
        let iz = (fz.floor() as usize).min(g.nz.saturating_sub(2));
        let (wx, wz) = (fx - ix as f64, fz - iz as f64);
        let t = |i: usize, k: usize| self.times[g.index(i, k)];
        (1.0 - wz) * ((1.0 - wx) * t(ix, iz) + wx * t(ix + 1, iz))
            + wz * ((1.0 - wx) * t(ix, iz + 1) + wx * t(ix + 1, iz + 1))
    }
}

const MAX_SWEEP_ROUNDS: usize = 200;

/// First-arrival traveltime by fast sweeping on the factored eikonal
/// `T = T0 tau`, with `T0` the traveltime in a medium of the source slowness.
pub fn traveltime(model: &VelocityModel, x_s: f64, z_s: f64) -> Result<TraveltimeField> {
    let g = *model.grid();
    let (nx, nz) = (g.nx, g.nz);
    let slowness: Vec<f64> = model.values().iter().map(|c| 1.0 / c).collect();
    let s0 = 1.0 / model.nearest(x_s, z_s);
    let mut t0 = vec![0.0; g.len()];
    let mut ax = vec![0.0; g.len()];
    let mut az = vec![0.0; g.len()];
    for (ix, iz, x, z) in g.nodes() {
        let k = g.index(ix, iz);
        let (rx, rz) = (x - x_s, z - z_s);
        let r = rx.hypot(rz);
        t0[k] = s0 * r;
        if r > 0.0 {
            ax[k] = s0 * rx / r;
            az[k] = s0 * rz / r;
        }
    }
    let h_min = g.dx.min(g.dz);
    let mut tau = vec![f64::INFINITY; g.len()];
    let mut fixed = vec![false; g.len()];
    for (ix, iz, x, z) in g.nodes() {
        if (x - x_s).hypot(z - z_s) <= 1.5 * h_min {
            let k = g.index(ix, iz);
            tau[k] = 1.0;
            fixed[k] = true;
        }
    }
    if !fixed.iter().any(|f| *f) {
        return Err(Error::Config(format!("source ({x_s}, {z_s}) is outside the grid")));
    }

    let update = |tau: &[f64], ix: usize, iz: usize| -> f64 {
        let k = g.index(ix, iz);
        let big_t = |kk: usize| t0[kk] * tau[kk];
        let pick = |a: Option<usize>, b: Option<usize>| -> Option<(usize, f64)> {
            // neighbour index with the smaller traveltime and its direction sign
            let ta = a.map(|kk| big_t(kk)).unwrap_or(f64::INFINITY);
            let tb = b.map(|kk| big_t(kk)).unwrap_or(f64::INFINITY);
            if ta.is_infinite() && tb.is_infinite() {
                None
            } else if ta <= tb {
                a.map(|kk| (kk, 1.0))
            } else {
                b.map(|kk| (kk, -1.0))
            }
        };
        let xn = pick(
            (ix > 0).then(|| k - 1),
            (ix + 1 < nx).then(|| k + 1),
        );
        let zn = pick(
            (iz > 0).then(|| k - nx),
            (iz + 1 < nz).then(|| k + nx),
        );
        let s = slowness[k];
        let coef = |n: Option<(usize, f64)>, a: f64, h: f64| -> Option<(f64, f64, f64)> {
            n.map(|(kk, sig)| (a + sig * t0[k] / h, sig * t0[k] * tau[kk] / h, sig))
        };
        let cx = coef(xn, ax[k], g.dx);
        let cz = coef(zn, az[k], g.dz);
        let mut best = tau[k];
        let mut consider = |cand: f64| {
            if cand.is_finite() && cand > 0.0 && t0[k] * cand < t0[k] * best {
                best = cand;
            }
        };
        if t0[k] == 0.0 {
            return best;
        }
        if let (Some((a1, b1, s1)), Some((a2, b2, s2))) = (cx, cz) {
            let qa = a1 * a1 + a2 * a2;
            let qb = -2.0 * (a1 * b1 + a2 * b2);
            let qc = b1 * b1 + b2 * b2 - s * s;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 && qa > 0.0 {
                let r = (-qb + disc.sqrt()) / (2.0 * qa);
                if s1 * (r * a1 - b1) >= 0.0 && s2 * (r * a2 - b2) >= 0.0 {
                    consider(r);
                }
            }
        }
        for (a1, b1, s1) in [cx, cz].into_iter().flatten() {
            if s1 * a1 > 0.0 {
                consider((b1 + s1 * s) / a1);
            }
        }
        best
    };

    let orders: [(bool, bool); 4] = [(false, false), (true, false), (true, true), (false, true)];
    let mut converged = false;
    for _round in 0..MAX_SWEEP_ROUNDS {
        let mut change: f64 = 0.0;
        for &(rev_x, rev_z) in &orders {
            for jz in 0..nz {
                let iz = if rev_z { nz - 1 - jz } else { jz };
                for jx in 0..nx {
                    let ix = if rev_x { nx - 1 - jx } else { jx };
                    let k = g.index(ix, iz);
                    if fixed[k] {
                        continue;
                    }
                    let new = update(&tau, ix, iz);
                    if new < tau[k] {
                        let old = tau[k] * t0[k];
                        let d = if old.is_finite() { old - new * t0[k] } else { f64::INFINITY };
                        change = change.max(d);
                        tau[k] = new;
                    }
                }
            }
        }
        if change <= 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged || tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::EikonalNonConvergence(MAX_SWEEP_ROUNDS));
    }
    let times = t0.iter().zip(&tau).map(|(a, b)| a * b).collect();
    Ok(TraveltimeField { grid: g, times })
}

/// Window shape in units of the dominant period and rejection thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowPolicy {
    /// Periods before the direct arrival.
    pub lead: f64,
    /// Periods after the direct arrival.
    pub tail: f64,
    /// Cosine taper width in periods.
    pub taper: f64,
    /// Required direct/reflected separation in window lengths.
    pub separation: f64,
    /// Windowed observed energy below this fraction of the largest observed
    /// trace energy rejects the pair.
    pub noise_floor: f64,
    /// Depths of horizontal reflectors in the initial model.
    pub reflectors: Vec<f64>,
    /// Turn windows off: every pair is accepted with a full-length hard window.
    pub enabled: bool,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            lead: 1.0,
            tail: 3.0,
            taper: 0.5,
            separation: 1.0,
            noise_floor: 1e-6,
            reflectors: Vec::new(),
            enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    WindowCollapsed,
    Multipath,
    WeakSignal,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::WindowCollapsed => "window-collapsed",
            RejectReason::Multipath => "multipath",
            RejectReason::WeakSignal => "weak-signal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub source: usize,
    pub receiver: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub taper: f64,
    pub rejected: Option<RejectReason>,
}

impl PhaseWindow {
    pub fn accepted(&self) -> bool {
        self.rejected.is_none()
    }

    pub fn length(&self) -> f64 {
        self.t_hi - self.t_lo
    }

    /// Window weight at time `t`.
    pub fn weight(&self, t: f64) -> f64 {
        if t < self.t_lo || t > self.t_hi {
            return 0.0;
        }
        if self.taper <= 0.0 {
            return 1.0;
        }
        let edge = (t - self.t_lo).min(self.t_hi - t);
        if edge >= self.taper {
            1.0
        } else {
            0.5 * (1.0 - (PI * edge / self.taper).cos())
        }
    }

    pub fn weights(&self, axis: &TimeAxis) -> Vec<f64> {
        (0..axis.nt).map(|k| self.weight(axis.time(k))).collect()
    }

    /// Multiplies the samples by the window weights.
    pub fn apply(&self, samples: &[f64], dt: f64) -> Vec<f64> {
        samples
            .iter()
            .enumerate()
            .map(|(k, v)| v * self.weight(k as f64 * dt))
            .collect()
    }
}

/// Window `[t_arr - lead/f0, t_arr + tail/f0]` clipped to `[0, t_f]`. It is
/// rejected when clipping leaves less than two tapers or half its length.
pub fn make_window(
    source: usize,
    receiver: usize,
    t_arr: f64,
    f0: f64,
    t_f: f64,
    policy: &WindowPolicy,
) -> PhaseWindow {
    let period = 1.0 / f0;
    let t_lo = (t_arr - policy.lead * period).max(0.0);
    let t_hi = (t_arr + policy.tail * period).min(t_f);
    let taper = policy.taper * period;
    let nominal = (policy.lead + policy.tail) * period;
    let short = t_hi - t_lo < (2.0 * taper).max(0.5 * nominal);
    let rejected = (!t_arr.is_finite() || short).then_some(RejectReason::WindowCollapsed);
    PhaseWindow {
        source,
        receiver,
        t_lo: t_lo.min(t_hi),
        t_hi,
        taper,
        rejected,
    }
}

/// Straight-ray traveltime through `model` along the segment `a -> b`.
fn ray_time(model: &VelocityModel, a: (f64, f64), b: (f64, f64)) -> f64 {
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let h = model.grid().dx.min(model.grid().dz) * 0.25;
    let n = ((len / h).ceil() as usize).max(1);
    let mut t = 0.0;
    for k in 0..n {
        let w = (k as f64 + 0.5) / n as f64;
        let (x, z) = (a.0 + w * (b.0 - a.0), a.1 + w * (b.1 - a.1));
        t += 1.0 / model.nearest(x, z);
    }
    t * len / n as f64
}

/// Reflection traveltime off a horizontal reflector at depth `depth`, by the
/// image-source construction with straight legs.
pub fn reflection_time(model: &VelocityModel, src: (f64, f64), rec: (f64, f64), depth: f64) -> Option<f64> {
    let side = |z: f64| z < depth;
    if side(src.1) != side(rec.1) {
        return None;
    }
    let image_z = 2.0 * depth - src.1;
    let w = (depth - rec.1) / (image_z - rec.1);
    if !(0.0..=1.0).contains(&w) {
        return None;
    }
    let hit = (rec.0 + w * (src.0 - rec.0), depth);
    Some(ray_time(model, src, hit) + ray_time(model, hit, rec))
}

/// Per-pair windows computed on the initial model, with the accept/reject
/// decision. With observed traces the weak-signal rule is applied as well.
pub fn select_pairs(
    model_0: &VelocityModel,
    sources: &[SourceSpec],
    receivers: &[ReceiverSpec],
    axis: &TimeAxis,
    policy: &WindowPolicy,
    observed: Option<&[Vec<Trace>]>,
) -> Result<Vec<PhaseWindow>> {
    let t_f = axis.t_final();
    let mut table = Vec::with_capacity(sources.len() * receivers.len());
    if !policy.enabled {
        for i in 0..sources.len() {
            for j in 0..receivers.len() {
                table.push(PhaseWindow {
                    source: i,
                    receiver: j,
                    t_lo: 0.0,
                    t_hi: t_f,
                    taper: 0.0,
                    rejected: None,
                });
            }
        }
    } else {
        for (i, src) in sources.iter().enumerate() {
            let field = traveltime(model_0, src.x, src.z).map_err(|e| e.for_source(i))?;
            for (j, rec) in receivers.iter().enumerate() {
                let t_dir = field.at(rec.x, rec.z);
                let mut w = make_window(i, j, src.peak_time() + t_dir, src.f0, t_f, policy);
                if w.accepted() {
                    let limit = policy.separation * (policy.lead + policy.tail) / src.f0;
                    let clash = policy.reflectors.iter().any(|&d| {
                        reflection_time(model_0, (src.x, src.z), (rec.x, rec.z), d)
                            .is_some_and(|t_r| (t_r - t_dir).abs() < limit)
                    });
                    if clash {
                        w.rejected = Some(RejectReason::Multipath);
                    }
                }
                table.push(w);
            }
        }
    }
    if let Some(obs) = observed {
        let energy = |s: &[f64]| {
            let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            trapezoid_dot(&sq, &vec![1.0; sq.len()], axis.dt)
        };
        let reference = obs
            .iter()
            .flat_map(|row| row.iter())
            .map(|t| energy(&t.samples))
            .fold(0.0f64, f64::max);
        for w in table.iter_mut().filter(|w| w.accepted()) {
            let d = &obs[w.source][w.receiver];
            let e = energy(&w.apply(&d.samples, axis.dt));
            if e == 0.0 || e < policy.noise_floor * reference {
                w.rejected = Some(RejectReason::WeakSignal);
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LayeredModel;

    fn uniform(c: f64, h: f64) -> VelocityModel {
        VelocityModel::uniform(Grid2D::covering(20.0, 15.0, h).unwrap(), c).unwrap()
    }

    #[test]
    fn homogeneous_traveltime() {
        let m = uniform(5.8, 0.2);
        let f = traveltime(&m, 7.3, 4.1).unwrap();
        let g = *m.grid();
        for (ix, iz, x, z) in g.nodes() {
            let r = (x - 7.3f64).hypot(z - 4.1);
            let t = f.values()[g.index(ix, iz)];
            assert!(t >= 0.0);
            if r >= 10.0 * 0.2 {
                assert!((t - r / 5.8).abs() <= 0.01 * r / 5.8);
            }
        }
    }

    #[test]
    fn traveltime_at_source_is_zero() {
        let m = uniform(4.0, 0.2);
        let f = traveltime(&m, 8.0, 6.0).unwrap();
        assert_eq!(f.at(8.0, 6.0), 0.0);
    }

    #[test]
    fn vertical_ray_in_layered_model() {
        let g = Grid2D::covering(80.0, 60.0, 0.5).unwrap();
        let m = LayeredModel::two_layer(false).sample(&g).unwrap();
        let f = traveltime(&m, 20.0, 25.0).unwrap();
        let t = f.at(20.0, 1.0);
        let expect = 24.0 / 5.8;
        assert!((t - expect).abs() <= 0.01 * expect, "{t} vs {expect}");
    }

    #[test]
    fn refinement_reduces_error_in_gradient_medium() {
        // c = 2 + 0.1 z has the analytic traveltime acosh(1 + s0 s c^2 ...)
        let err = |h: f64| {
            let g = Grid2D::covering(10.0, 10.0, h).unwrap();
            let (c0, k) = (2.0, 0.1);
            let m = VelocityModel::from_fn(g, |_, z| c0 + k * z).unwrap();
            let (xs, zs) = (5.0, 2.0);
            let f = traveltime(&m, xs, zs).unwrap();
            let mut worst: f64 = 0.0;
            for (ix, iz, x, z) in g.nodes() {
                let (cs, c) = (c0 + k * zs, c0 + k * z);
                let r2 = (x - xs).powi(2) + (z - zs).powi(2);
                let exact = (1.0 + k * k * r2 / (2.0 * cs * c)).acosh() / k;
                worst = worst.max((f.values()[g.index(ix, iz)] - exact).abs());
            }
            worst
        };
        let (e1, e2) = (err(0.2), err(0.1));
        assert!(e2 < e1, "{e1} {e2}");
    }

    #[test]
    fn default_window_arithmetic() {
        let w = make_window(0, 0, 5.0, 2.0, 20.0, &WindowPolicy::default());
        assert!((w.t_lo - 4.5).abs() < 1e-12);
        assert!((w.t_hi - 6.5).abs() < 1e-12);
        assert!((w.taper - 0.25).abs() < 1e-12);
        assert!(w.accepted());
        let late = make_window(0, 0, 19.9, 2.0, 20.0, &WindowPolicy::default());
        assert_eq!(late.rejected, Some(RejectReason::WindowCollapsed));
    }

    #[test]
    fn window_zeroes_outside_and_hard_window_is_idempotent() {
        let w = make_window(0, 0, 2.0, 4.0, 5.0, &WindowPolicy::default());
        let dt = 0.01;
        let s: Vec<f64> = (0..501).map(|k| (k as f64 * 0.37).sin() + 1.5).collect();
        let a = w.apply(&s, dt);
        for (k, v) in a.iter().enumerate() {
            let t = k as f64 * dt;
            if t < w.t_lo || t > w.t_hi {
                assert_eq!(*v, 0.0);
            }
        }
        let hard = PhaseWindow { taper: 0.0, ..w };
        let once = hard.apply(&s, dt);
        assert_eq!(hard.apply(&once, dt), once);
    }

    #[test]
    fn multipath_rejection_near_reflector() {
        let g = Grid2D::covering(80.0, 60.0, 0.5).unwrap();
        let m = LayeredModel::two_layer(false).sample(&g).unwrap();
        let geometry = |zs: f64, xr: f64| {
            let mut src = SourceSpec::new(20.0, zs, 2.0);
            src.delay = 0.0;
            let rec = ReceiverSpec { x: xr, z: 1.0 };
            let policy = WindowPolicy {
                reflectors: vec![30.0],
                ..WindowPolicy::default()
            };
            let axis = TimeAxis::new(40.0, 0.05).unwrap();
            select_pairs(&m, &[src], &[rec], &axis, &policy, None).unwrap()[0].clone()
        };
        // shallow source, short offset: reflection arrives about 2 (30 - 5) / 5.8 s later
        let a = geometry(5.0, 22.0);
        assert!(a.accepted());
        let direct = (2.0f64.hypot(4.0)) / 5.8;
        let refl = (2.0f64.hypot(30.0 - 1.0 + 30.0 - 5.0)) / 5.8;
        assert!(refl - direct > 2.0);
        // source just above the Moho: the two legs nearly coincide in time
        let b = geometry(28.5, 21.0);
        let direct = 1.0f64.hypot(27.5) / 5.8;
        let refl = 1.0f64.hypot(29.0 + 1.5) / 5.8;
        assert!(refl - direct < 2.0);
        assert_eq!(b.rejected, Some(RejectReason::Multipath));
    }

    #[test]
    fn zero_observed_window_is_rejected() {
        let m = uniform(5.0, 0.2);
        let src = SourceSpec::new(10.0, 5.0, 4.0);
        let recs = [ReceiverSpec { x: 5.0, z: 1.0 }, ReceiverSpec { x: 15.0, z: 1.0 }];
        let axis = TimeAxis::new(5.0, 0.01).unwrap();
        let mut loud = Trace::zeros(0, 1, &axis);
        loud.samples.iter_mut().enumerate().for_each(|(k, v)| *v = (k as f64 * 0.1).sin());
        let obs = vec![vec![Trace::zeros(0, 0, &axis), loud]];
        let t = select_pairs(&m, &[src], &recs, &axis, &WindowPolicy::default(), Some(&obs)).unwrap();
        assert_eq!(t[0].rejected, Some(RejectReason::WeakSignal));
        assert!(t[1].accepted());
        let again = select_pairs(&m, &[src], &recs, &axis, &WindowPolicy::default(), Some(&obs)).unwrap();
        assert_eq!(t, again);
    }
}
