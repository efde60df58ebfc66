//! One-dimensional quadratic Wasserstein distance between sampled densities.
//!
//! Nodal samples `f(t_k)` are read as a piecewise-constant density on the
//! midpoint cells `[t_k - dt/2, t_k + dt/2]` clipped to `[0, t_f]`. Its mass is
//! the trapezoidal sum and its CDF at the nodes is the running trapezoidal
//! integral. With that reading the quantile functions are piecewise linear, so
//! `W2^2 = int_0^1 |F^-1(p) - G^-1(p)|^2 dp` and its gradient are evaluated in
//! closed form instead of by quadrature, which keeps the misfit and its adjoint
//! consistent to round-off.

use crate::error::{Error, Result};

/// Tolerance on the trapezoidal mass of a probability trace.
pub const MASS_TOL: f64 = 1e-12;

/// A non-negative density sampled on `t_k = k dt` with unit trapezoidal mass.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTrace {
    dt: f64,
    density: Vec<f64>,
}

/// Trapezoidal integral of uniformly sampled values.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

/// Trapezoidal inner product `int a b dt`.
pub fn trapezoid_dot(a: &[f64], b: &[f64], dt: f64) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dt * (s - 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]))
}

impl ProbabilityTrace {
    pub fn new(dt: f64, density: Vec<f64>) -> Result<Self> {
        if density.len() < 2 || !(dt > 0.0) {
            return Err(Error::InvalidDensity("need dt > 0 and at least two samples".into()));
        }
        if let Some(v) = density.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDensity(format!("sample {v} is negative or not finite")));
        }
        let mass = trapezoid(&density, dt);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDensity(format!("trapezoidal mass {mass} is not 1")));
        }
        Ok(Self { dt, density })
    }

    /// Divides non-negative samples by their trapezoidal mass.
    pub fn normalized(dt: f64, mut values: Vec<f64>) -> Result<Self> {
        let mass = trapezoid(&values, dt);
        if !(mass > 0.0) {
            return Err(Error::DegenerateTrace);
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Self::new(dt, values)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_final(&self) -> f64 {
        (self.density.len() - 1) as f64 * self.dt
    }

    pub fn samples(&self) -> &[f64] {
        &self.density
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }
}

/// CDF of a probability trace: nodal values plus the values at cell
/// midpoints, which are the breakpoints of the piecewise-linear CDF.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfTable {
    dt: f64,
    /// `F` at `t = k dt / 2`, `k = 0..=2N`.
    knots: Vec<f64>,
}

impl CdfTable {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_final(&self) -> f64 {
        (self.knots.len() - 1) as f64 * 0.5 * self.dt
    }

    /// `F(t_k)` at the sample nodes.
    pub fn nodes(&self) -> Vec<f64> {
        self.knots.iter().step_by(2).copied().collect()
    }

    fn knot_t(&self, k: usize) -> f64 {
        k as f64 * 0.5 * self.dt
    }

    /// Evaluates the piecewise-linear CDF at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let h = 0.5 * self.dt;
        if t <= 0.0 {
            return 0.0;
        }
        let last = self.knots.len() - 1;
        let s = t / h;
        if s >= last as f64 {
            return 1.0;
        }
        let k = s.floor() as usize;
        let w = s - k as f64;
        self.knots[k] + w * (self.knots[k + 1] - self.knots[k])
    }

    /// Increasing pieces `(p0, p1, t0, t1)` of the CDF.
    fn pieces(&self) -> Vec<Piece> {
        self.knots
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0])
            .map(|(k, w)| Piece {
                p0: w[0],
                p1: w[1],
                t0: self.knot_t(k),
                t1: self.knot_t(k + 1),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    p0: f64,
    p1: f64,
    t0: f64,
    t1: f64,
}

impl Piece {
    fn at(&self, p: f64) -> f64 {
        let w = ((p - self.p0) / (self.p1 - self.p0)).clamp(0.0, 1.0);
        self.t0 + w * (self.t1 - self.t0)
    }
}

/// Builds the CDF of `f`; the final value is exactly 1.
pub fn cdf(f: &ProbabilityTrace) -> CdfTable {
    let n = f.len() - 1;
    let half = 0.5 * f.dt;
    let mut knots = Vec::with_capacity(2 * n + 1);
    let mut acc = 0.0;
    knots.push(0.0);
    for (i, v) in f.density.iter().enumerate() {
        if i > 0 {
            acc += v * half;
            knots.push(acc);
        }
        if i < n {
            acc += v * half;
            knots.push(acc);
        }
    }
    let total = acc;
    for k in knots.iter_mut() {
        *k = (*k / total).clamp(0.0, 1.0);
    }
    // round-off cannot break monotonicity after this
    for k in 1..knots.len() {
        if knots[k] < knots[k - 1] {
            knots[k] = knots[k - 1];
        }
    }
    *knots.last_mut().unwrap() = 1.0;
    CdfTable { dt: f.dt, knots }
}

/// Generalized inverse `inf { t : G(t) >= p }`, with `quantile(1) = t_f`.
pub fn quantile(g: &CdfTable, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(p));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(g.t_final());
    }
    let k = g.knots.partition_point(|v| *v < p);
    let (lo, hi) = (g.knots[k - 1], g.knots[k]);
    let w = (p - lo) / (hi - lo);
    Ok(g.knot_t(k - 1) + w * 0.5 * g.dt)
}

/// Monotone map `T = G^-1 o F`, piecewise linear between knots (a repeated
/// abscissa marks a jump across a gap in the target support).
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMap {
    dt: f64,
    nodes: Vec<f64>,
    knots: Vec<(f64, f64)>,
}

impl TransportMap {
    /// Map given by its nodal values, linear between nodes.
    pub fn from_samples(dt: f64, values: Vec<f64>) -> Self {
        let knots = values.iter().enumerate().map(|(k, v)| (k as f64 * dt, *v)).collect();
        Self {
            dt,
            nodes: values,
            knots,
        }
    }

    /// `T(t_k)` at the sample nodes.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Kantorovich potential `2 int_0^t (s - T(s)) ds` at the nodes.
    pub fn potential(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut walker = PotentialWalker::new(&self.knots);
        (0..n).map(|k| walker.phi_at(k as f64 * self.dt)).collect()
    }
}

/// Walks the knots of a map, integrating `h = t - T` exactly.
struct PotentialWalker<'a> {
    knots: &'a [(f64, f64)],
    seg: usize,
    /// `phi` and `Phi = int phi` at the start of `seg`
    phi0: f64,
    big0: f64,
}

impl<'a> PotentialWalker<'a> {
    fn new(knots: &'a [(f64, f64)]) -> Self {
        Self {
            knots,
            seg: 0,
            phi0: 0.0,
            big0: 0.0,
        }
    }

    fn seg_terms(&self, s: f64) -> (f64, f64) {
        let (x0, t0) = self.knots[self.seg];
        let (x1, t1) = self.knots[self.seg + 1];
        let len = x1 - x0;
        let h0 = x0 - t0;
        let h1 = x1 - t1;
        let slope = if len > 0.0 { (h1 - h0) / len } else { 0.0 };
        let phi = self.phi0 + 2.0 * (h0 * s + 0.5 * slope * s * s);
        let big = self.big0 + self.phi0 * s + h0 * s * s + slope * s * s * s / 3.0;
        (phi, big)
    }

    fn advance_to(&mut self, x: f64) -> f64 {
        while self.seg + 2 < self.knots.len() && self.knots[self.seg + 1].0 <= x {
            let len = self.knots[self.seg + 1].0 - self.knots[self.seg].0;
            let (phi, big) = self.seg_terms(len);
            self.phi0 = phi;
            self.big0 = big;
            self.seg += 1;
        }
        (x - self.knots[self.seg].0).max(0.0)
    }

    fn phi_at(&mut self, x: f64) -> f64 {
        let s = self.advance_to(x);
        self.seg_terms(s).0
    }

    fn big_phi_at(&mut self, x: f64) -> f64 {
        let s = self.advance_to(x);
        self.seg_terms(s).1
    }
}

/// `W2^2(f, g)` and the optimal map from `f` to `g`.
pub fn w2_squared(f: &ProbabilityTrace, g: &ProbabilityTrace) -> Result<(f64, TransportMap)> {
    if f.len() != g.len() || (f.dt - g.dt).abs() > 1e-12 * f.dt {
        return Err(Error::InvalidDensity("densities live on different time axes".into()));
    }
    let cf = cdf(f);
    let cg = cdf(g);
    let sa = cf.pieces();
    let sb = cg.pieces();
    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(2 * (sa.len() + sb.len()) + 2);
    let mut total = 0.0;
    let (mut i, mut j, mut p) = (0usize, 0usize, 0.0f64);
    while i < sa.len() && j < sb.len() {
        let (a, b) = (sa[i], sb[j]);
        let hi = a.p1.min(b.p1);
        if hi > p {
            let (f0, f1) = (a.at(p), a.at(hi));
            let (g0, g1) = (b.at(p), b.at(hi));
            let (d0, d1) = (f0 - g0, f1 - g1);
            total += (d0 * d0 + d0 * d1 + d1 * d1) * (hi - p) / 3.0;
            if knots.last() != Some(&(f0, g0)) {
                knots.push((f0, g0));
            }
            knots.push((f1, g1));
            p = hi;
        }
        if a.p1 <= hi {
            i += 1;
        }
        if b.p1 <= hi {
            j += 1;
        }
    }
    let t_f = f.t_final();
    if let Some(&(t, v)) = knots.first() {
        if t > 0.0 {
            knots.insert(0, (0.0, v));
        }
    }
    if let Some(&(t, v)) = knots.last() {
        if t < t_f {
            knots.push((t_f, v));
        }
    }
    let nodes = cf
        .nodes()
        .into_iter()
        .map(|p| quantile(&cg, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        total.max(0.0),
        TransportMap {
            dt: f.dt,
            nodes,
            knots,
        },
    ))
}

/// Gradient of `W2^2(f, g)` with respect to the samples of `f`, in the
/// trapezoidal inner product: `d W2^2 = <U, df>` for zero-mass `df`.
///
/// `U_k` is the mean of the potential `2 int_0^t (s - T(s)) ds` over the
/// cell of node `k`. At interior nodes this agrees with the nodal potential to
/// second order; on a linear potential it is exact there.
pub fn outer_gradient(f: &ProbabilityTrace, map: &TransportMap) -> Vec<f64> {
    let n = f.len() - 1;
    let dt = f.dt;
    let t_f = f.t_final();
    let mut walker = PotentialWalker::new(&map.knots);
    let mut left = walker.big_phi_at(0.0);
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let b = ((k as f64 + 0.5) * dt).min(t_f);
        let a = ((k as f64 - 0.5) * dt).max(0.0);
        let right = walker.big_phi_at(b);
        out.push((right - left) / (b - a));
        left = right;
    }
    out
}
