//! Maps from signed traces to probability densities, their adjoints, and the
//! per-trace misfit built on them.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::transport::{outer_gradient, trapezoid, trapezoid_dot, w2_squared, ProbabilityTrace};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisfitKind {
    L2,
    W2P1,
    W2P2,
    W2P3,
}

impl MisfitKind {
    pub const ALL: [MisfitKind; 4] = [MisfitKind::L2, MisfitKind::W2P1, MisfitKind::W2P2, MisfitKind::W2P3];

    pub fn is_transport(self) -> bool {
        self != MisfitKind::L2
    }
}

impl fmt::Display for MisfitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MisfitKind::L2 => "l2",
            MisfitKind::W2P1 => "w2-p1",
            MisfitKind::W2P2 => "w2-p2",
            MisfitKind::W2P3 => "w2-p3",
        })
    }
}

impl FromStr for MisfitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(MisfitKind::L2),
            "w2-p1" => Ok(MisfitKind::W2P1),
            "w2-p2" => Ok(MisfitKind::W2P2),
            "w2-p3" => Ok(MisfitKind::W2P3),
            other => Err(Error::Config(format!("unknown misfit '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingOperator {
    pub kind: MisfitKind,
    pub epsilon: f64,
}

impl ScalingOperator {
    pub fn new(kind: MisfitKind, epsilon: f64) -> Result<Self> {
        let needs_eps = matches!(kind, MisfitKind::W2P2 | MisfitKind::W2P3);
        if !epsilon.is_finite() || epsilon < 0.0 || (needs_eps && epsilon == 0.0) {
            return Err(Error::Config(format!("epsilon {epsilon} is not valid for {kind}")));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn with_default_epsilon(kind: MisfitKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Density `P(s)` of a trace sampled with step `dt`.
    pub fn apply(&self, s: &[f64], dt: f64) -> Result<ProbabilityTrace> {
        let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        let m = trapezoid(&sq, dt);
        let t_f = (s.len().max(1) - 1) as f64 * dt;
        let eps = self.epsilon;
        let values = match self.kind {
            MisfitKind::L2 => {
                return Err(Error::Config("the L2 baseline has no density".into()));
            }
            MisfitKind::W2P1 => {
                nonzero(m)?;
                sq.iter().map(|v| v / m).collect()
            }
            MisfitKind::W2P2 => {
                let m2 = m + eps * t_f;
                nonzero(m2)?;
                sq.iter().map(|v| (v + eps) / m2).collect()
            }
            MisfitKind::W2P3 => {
                nonzero(m)?;
                let z = 1.0 + t_f * eps;
                sq.iter().map(|v| (v / m + eps) / z).collect()
            }
        };
        ProbabilityTrace::new(dt, values)
    }

    /// `[dP/ds]^T u` at `s`, in the trapezoidal inner product.
    pub fn adjoint_apply(&self, s: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        let m = trapezoid(&sq, dt);
        let t_f = (s.len().max(1) - 1) as f64 * dt;
        let eps = self.epsilon;
        let (norm, mean, scale) = match self.kind {
            MisfitKind::L2 => {
                return Err(Error::Config("the L2 baseline has no density".into()));
            }
            MisfitKind::W2P1 => {
                nonzero(m)?;
                (m, trapezoid_dot(u, &sq, dt) / m, 1.0)
            }
            MisfitKind::W2P2 => {
                let m2 = m + eps * t_f;
                nonzero(m2)?;
                let mean = (trapezoid_dot(u, &sq, dt) + eps * trapezoid(u, dt)) / m2;
                (m2, mean, 1.0)
            }
            MisfitKind::W2P3 => {
                nonzero(m)?;
                (m, trapezoid_dot(u, &sq, dt) / m, 1.0 / (1.0 + t_f * eps))
            }
        };
        Ok(s
            .iter()
            .zip(u)
            .map(|(sv, uv)| 2.0 * sv / norm * (uv - mean) * scale)
            .collect())
    }

    /// Misfit `chi(s, d)`.
    pub fn misfit(&self, s: &[f64], d: &[f64], dt: f64) -> Result<f64> {
        check_axes(s, d)?;
        match self.kind {
            MisfitKind::L2 => Ok(half_l2(s, d, dt)),
            _ => {
                let f = self.apply(s, dt)?;
                let g = self.apply(d, dt)?;
                Ok(w2_squared(&f, &g)?.0)
            }
        }
    }

    /// Misfit and its gradient with respect to `s` (the adjoint source).
    pub fn misfit_and_adjoint(&self, s: &[f64], d: &[f64], dt: f64) -> Result<(f64, Vec<f64>)> {
        check_axes(s, d)?;
        match self.kind {
            MisfitKind::L2 => Ok((half_l2(s, d, dt), s.iter().zip(d).map(|(a, b)| a - b).collect())),
            _ => {
                let f = self.apply(s, dt)?;
                let g = self.apply(d, dt)?;
                let (value, map) = w2_squared(&f, &g)?;
                let u = outer_gradient(&f, &map);
                Ok((value, self.adjoint_apply(s, &u, dt)?))
            }
        }
    }
}

fn nonzero(mass: f64) -> Result<()> {
    if mass > 0.0 && mass.is_finite() {
        Ok(())
    } else {
        Err(Error::DegenerateTrace)
    }
}

fn check_axes(s: &[f64], d: &[f64]) -> Result<()> {
    if s.len() != d.len() {
        return Err(Error::InvalidDensity(format!(
            "traces have {} and {} samples",
            s.len(),
            d.len()
        )));
    }
    Ok(())
}

fn half_l2(s: &[f64], d: &[f64], dt: f64) -> f64 {
    let r: Vec<f64> = s.iter().zip(d).map(|(a, b)| a - b).collect();
    0.5 * trapezoid_dot(&r, &r, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.02;

    fn op(kind: MisfitKind) -> ScalingOperator {
        ScalingOperator::with_default_epsilon(kind)
    }

    fn wavelet(n: usize, center: f64, width: f64) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let x = (k as f64 * DT - center) / width;
                (1.0 - 2.0 * x * x) * (-x * x).exp()
            })
            .collect()
    }

    #[test]
    fn constant_trace_gives_uniform_density() {
        for kind in [MisfitKind::W2P1, MisfitKind::W2P3] {
            let p = op(kind).apply(&[2.5; 101], DT).unwrap();
            for v in p.samples() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p3_floor_where_signal_vanishes() {
        let mut s = wavelet(201, 2.0, 0.2);
        s[0] = 0.0;
        s[200] = 0.0;
        let o = op(MisfitKind::W2P3);
        let p = o.apply(&s, DT).unwrap();
        let t_f = 4.0;
        let floor = o.epsilon / (1.0 + t_f * o.epsilon);
        assert!((p.samples()[0] - floor).abs() < 1e-15);
        assert!((p.samples()[200] - floor).abs() < 1e-15);
    }

    #[test]
    fn p2_floors_differ_but_p3_floors_agree() {
        let s = wavelet(201, 2.0, 0.2);
        let d: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
        let (t_f, eps) = (4.0, DEFAULT_EPSILON);
        let ms = trapezoid(&s.iter().map(|v| v * v).collect::<Vec<_>>(), DT);
        let md = 9.0 * ms;
        let fs = eps / (ms + eps * t_f);
        let fd = eps / (md + eps * t_f);
        assert!((fs - fd).abs() > 1e-6);
        let a = op(MisfitKind::W2P2).apply(&s, DT).unwrap();
        let b = op(MisfitKind::W2P2).apply(&d, DT).unwrap();
        let (sa, sb) = (s[0] * s[0], d[0] * d[0]);
        assert!((a.samples()[0] - (sa + eps) * fs / eps).abs() < 1e-12);
        assert!((b.samples()[0] - (sb + eps) * fd / eps).abs() < 1e-12);
        let a = op(MisfitKind::W2P3).apply(&s, DT).unwrap();
        let b = op(MisfitKind::W2P3).apply(&d, DT).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_invariance_of_p1_and_p3() {
        let s = wavelet(151, 1.3, 0.15);
        let t: Vec<f64> = s.iter().map(|v| -7.3 * v).collect();
        for kind in [MisfitKind::W2P1, MisfitKind::W2P3] {
            let a = op(kind).apply(&s, DT).unwrap();
            let b = op(kind).apply(&t, DT).unwrap();
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_trace_is_degenerate_for_p1_and_p3() {
        let z = vec![0.0; 50];
        assert!(matches!(op(MisfitKind::W2P1).apply(&z, DT), Err(Error::DegenerateTrace)));
        assert!(matches!(op(MisfitKind::W2P3).apply(&z, DT), Err(Error::DegenerateTrace)));
        assert!(op(MisfitKind::W2P2).apply(&z, DT).is_ok());
        assert!(ScalingOperator::new(MisfitKind::W2P2, 0.0).is_err());
        assert!(ScalingOperator::new(MisfitKind::W2P1, 0.0).is_ok());
    }

    /// Directional derivative of `P` written out from the definitions.
    fn jvp(o: &ScalingOperator, s: &[f64], ds: &[f64]) -> Vec<f64> {
        let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        let dsq: Vec<f64> = s.iter().zip(ds).map(|(a, b)| 2.0 * a * b).collect();
        let m = trapezoid(&sq, DT);
        let dm = trapezoid(&dsq, DT);
        let t_f = (s.len() - 1) as f64 * DT;
        let e = o.epsilon;
        sq.iter()
            .zip(&dsq)
            .map(|(q, dq)| match o.kind {
                MisfitKind::W2P1 => dq / m - q * dm / (m * m),
                MisfitKind::W2P2 => dq / (m + e * t_f) - (q + e) * dm / (m + e * t_f).powi(2),
                MisfitKind::W2P3 => (dq / m - q * dm / (m * m)) / (1.0 + t_f * e),
                MisfitKind::L2 => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 120;
        for kind in [MisfitKind::W2P1, MisfitKind::W2P2, MisfitKind::W2P3] {
            let o = op(kind);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ds: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jd = jvp(&o, &s, &ds);
            let lhs = trapezoid_dot(&jd, &v, DT);
            let rhs = trapezoid_dot(&ds, &o.adjoint_apply(&s, &v, DT).unwrap(), DT);
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs(), "{kind}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn identical_traces_have_zero_misfit_and_gradient() {
        let s = wavelet(201, 2.0, 0.2);
        for kind in MisfitKind::ALL {
            let (v, q) = op(kind).misfit_and_adjoint(&s, &s, DT).unwrap();
            assert!(v.abs() < 1e-12, "{kind}");
            assert!(q.iter().all(|x| x.abs() < 1e-8), "{kind}");
        }
    }

    #[test]
    fn l2_adjoint_is_residual() {
        let d = wavelet(101, 1.0, 0.2);
        let s: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        let (_, q) = op(MisfitKind::L2).misfit_and_adjoint(&s, &d, DT).unwrap();
        assert_eq!(q, d);
    }

    #[test]
    fn names_round_trip() {
        for kind in MisfitKind::ALL {
            assert_eq!(kind.to_string().parse::<MisfitKind>().unwrap(), kind);
        }
        assert!("w2".parse::<MisfitKind>().is_err());
    }
}
