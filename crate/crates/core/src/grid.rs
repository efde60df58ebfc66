//! Rectangular node grids, velocity models on them, and the transfer pair
//! between the coarse inversion grid and the fine simulation grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when deciding whether two grid coordinates coincide.
const COORD_TOL: f64 = 1e-9;

/// A uniform rectangular node grid. Node `(ix, iz)` sits at
/// `(x0 + ix * dx, z0 + iz * dz)`; storage is row-major with one row per depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x0: f64,
    pub z0: f64,
    pub dx: f64,
    pub dz: f64,
    pub nx: usize,
    pub nz: usize,
}

impl Grid2D {
    pub fn new(origin: (f64, f64), spacing: (f64, f64), counts: (usize, usize)) -> Result<Self> {
        let (dx, dz) = spacing;
        let (nx, nz) = counts;
        if !(dx > 0.0 && dz > 0.0 && dx.is_finite() && dz.is_finite()) {
            return Err(Error::Config(format!(
                "grid spacing must be positive, got ({dx}, {dz})"
            )));
        }
        if nx < 2 || nz < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 nodes per axis, got ({nx}, {nz})"
            )));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(Self {
            x0: origin.0,
            z0: origin.1,
            dx,
            dz,
            nx,
            nz,
        })
    }

    /// Node grid covering `[0, width] x [0, depth]` including both ends.
    pub fn covering(width: f64, depth: f64, spacing: f64) -> Result<Self> {
        let nx = exact_count(width, spacing)? + 1;
        let nz = exact_count(depth, spacing)? + 1;
        Self::new((0.0, 0.0), (spacing, spacing), (nx, nz))
    }

    /// Cell-centred grid: one node per `spacing`-sized cell of `[0, width] x [0, depth]`.
    pub fn cell_centered(width: f64, depth: f64, spacing: f64) -> Result<Self> {
        let nx = exact_count(width, spacing)?;
        let nz = exact_count(depth, spacing)?;
        Self::new((0.5 * spacing, 0.5 * spacing), (spacing, spacing), (nx, nz))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iz: usize) -> usize {
        iz * self.nx + ix
    }

    #[inline]
    pub fn x(&self, ix: usize) -> f64 {
        self.x0 + ix as f64 * self.dx
    }

    #[inline]
    pub fn z(&self, iz: usize) -> f64 {
        self.z0 + iz as f64 * self.dz
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.nx - 1)
    }

    pub fn z_max(&self) -> f64 {
        self.z(self.nz - 1)
    }

    /// Whether `(x, z)` lies strictly inside the grid's bounding box.
    pub fn contains_strictly(&self, x: f64, z: f64) -> bool {
        let tx = COORD_TOL * self.dx;
        let tz = COORD_TOL * self.dz;
        x > self.x0 + tx && x < self.x_max() - tx && z > self.z0 + tz && z < self.z_max() - tz
    }

    /// Iterator over `(ix, iz, x, z)` for every node in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        (0..self.nz).flat_map(move |iz| (0..self.nx).map(move |ix| (ix, iz, self.x(ix), self.z(iz))))
    }

    /// Trapezoidal quadrature weights (area per node, halved on edges).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let wx = trapezoid_1d(self.nx, self.dx);
        let wz = trapezoid_1d(self.nz, self.dz);
        let mut w = Vec::with_capacity(self.len());
        for &a in &wz {
            for &b in &wx {
                w.push(a * b);
            }
        }
        w
    }
}

fn exact_count(length: f64, spacing: f64) -> Result<usize> {
    if !(length > 0.0 && spacing > 0.0) {
        return Err(Error::Config(format!(
            "length {length} and spacing {spacing} must be positive"
        )));
    }
    let n = (length / spacing).round();
    if (n * spacing - length).abs() > COORD_TOL * length.max(1.0) || n < 1.0 {
        return Err(Error::Config(format!(
            "length {length} km is not an integer multiple of spacing {spacing} km"
        )));
    }
    Ok(n as usize)
}

fn trapezoid_1d(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] *= 0.5;
    w[n - 1] *= 0.5;
    w
}

/// Weighted inner product `sum_k w_k a_k b_k`.
pub fn weighted_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), w.len());
    a.iter().zip(b).zip(w).map(|((x, y), q)| x * y * q).sum()
}

/// Wave speed in km/s on the nodes of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    grid: Grid2D,
    values: Vec<f64>,
}

impl VelocityModel {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Config(format!(
                "model has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!(
                "velocity values must be finite and positive, found {bad}"
            )));
        }
        Ok(Self { grid, values })
    }

    /// Samples `velocity(x, z)` at every node.
    pub fn from_fn(grid: Grid2D, velocity: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = grid.nodes().map(|(_, _, x, z)| velocity(x, z)).collect();
        Self::new(grid, values)
    }

    pub fn uniform(grid: Grid2D, c: f64) -> Result<Self> {
        Self::new(grid, vec![c; grid.len()])
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, ix: usize, iz: usize) -> f64 {
        self.values[self.grid.index(ix, iz)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::MAX, f64::min)
    }

    /// Value at the node closest to `(x, z)`.
    pub fn nearest(&self, x: f64, z: f64) -> f64 {
        let g = &self.grid;
        let ix = (((x - g.x0) / g.dx).round().max(0.0) as usize).min(g.nx - 1);
        let iz = (((z - g.z0) / g.dz).round().max(0.0) as usize).min(g.nz - 1);
        self.at(ix, iz)
    }

    /// Returns `self + delta`, clamped below by `floor`.
    pub fn updated(&self, delta: &[f64], floor: f64) -> Result<Self> {
        if delta.len() != self.values.len() {
            return Err(Error::Internal("model update has the wrong length".into()));
        }
        let values = self
            .values
            .iter()
            .zip(delta)
            .map(|(c, d)| (c + d).max(floor))
            .collect();
        Self::new(self.grid, values)
    }
}

/// A field stored on both grids of a [`GridTransfer`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldPair {
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

/// Bilinear prolongation from a coarse grid to a nested fine grid and its
/// adjoint restriction.
///
/// Fine nodes outside the coarse bounding box take the nearest coarse value.
/// The restriction satisfies `<P a, b>_fine = <a, R b>_coarse` with trapezoid
/// weights on the fine grid and lumped weights `P^T w_fine` on the coarse grid
/// (which equal the coarse cell area for cell-centred nestings).
#[derive(Clone, Debug)]
pub struct GridTransfer {
    coarse: Grid2D,
    fine: Grid2D,
    x_stencil: Vec<(usize, usize, f64)>,
    z_stencil: Vec<(usize, usize, f64)>,
    fine_weights: Vec<f64>,
    coarse_weights: Vec<f64>,
}

impl GridTransfer {
    pub fn new(coarse: Grid2D, fine: Grid2D) -> Result<Self> {
        check_nested_axis(coarse.x0, coarse.dx, coarse.nx, fine.x0, fine.dx, fine.nx, "x")?;
        check_nested_axis(coarse.z0, coarse.dz, coarse.nz, fine.z0, fine.dz, fine.nz, "z")?;
        let x_stencil = axis_stencil(coarse.x0, coarse.dx, coarse.nx, fine.x0, fine.dx, fine.nx);
        let z_stencil = axis_stencil(coarse.z0, coarse.dz, coarse.nz, fine.z0, fine.dz, fine.nz);
        let fine_weights = fine.trapezoid_weights();
        let mut t = Self {
            coarse,
            fine,
            x_stencil,
            z_stencil,
            fine_weights,
            coarse_weights: Vec::new(),
        };
        t.coarse_weights = t.transpose(&t.fine_weights);
        Ok(t)
    }

    pub fn coarse(&self) -> &Grid2D {
        &self.coarse
    }

    pub fn fine(&self) -> &Grid2D {
        &self.fine
    }

    pub fn coarse_weights(&self) -> &[f64] {
        &self.coarse_weights
    }

    pub fn fine_weights(&self) -> &[f64] {
        &self.fine_weights
    }

    pub fn prolongate(&self, coarse: &[f64]) -> Result<Vec<f64>> {
        if coarse.len() != self.coarse.len() {
            return Err(Error::Config(format!(
                "field has {} values, coarse grid has {} nodes",
                coarse.len(),
                self.coarse.len()
            )));
        }
        let cnx = self.coarse.nx;
        let mut out = Vec::with_capacity(self.fine.len());
        for &(z0, z1, wz) in &self.z_stencil {
            let (r0, r1) = (&coarse[z0 * cnx..(z0 + 1) * cnx], &coarse[z1 * cnx..(z1 + 1) * cnx]);
            for &(x0, x1, wx) in &self.x_stencil {
                let a = (1.0 - wx) * r0[x0] + wx * r0[x1];
                let b = (1.0 - wx) * r1[x0] + wx * r1[x1];
                out.push((1.0 - wz) * a + wz * b);
            }
        }
        Ok(out)
    }

    /// Plain transpose `P^T b` (no weights).
    fn transpose(&self, fine: &[f64]) -> Vec<f64> {
        let cnx = self.coarse.nx;
        let mut out = vec![0.0; self.coarse.len()];
        let mut k = 0;
        for &(z0, z1, wz) in &self.z_stencil {
            for &(x0, x1, wx) in &self.x_stencil {
                let v = fine[k];
                k += 1;
                out[z0 * cnx + x0] += (1.0 - wz) * (1.0 - wx) * v;
                out[z0 * cnx + x1] += (1.0 - wz) * wx * v;
                out[z1 * cnx + x0] += wz * (1.0 - wx) * v;
                out[z1 * cnx + x1] += wz * wx * v;
            }
        }
        out
    }

    pub fn restrict(&self, fine: &[f64]) -> Result<Vec<f64>> {
        if fine.len() != self.fine.len() {
            return Err(Error::Config(format!(
                "field has {} values, fine grid has {} nodes",
                fine.len(),
                self.fine.len()
            )));
        }
        let weighted: Vec<f64> = fine.iter().zip(&self.fine_weights).map(|(b, w)| b * w).collect();
        let mut out = self.transpose(&weighted);
        for (o, w) in out.iter_mut().zip(&self.coarse_weights) {
            *o /= w;
        }
        Ok(out)
    }

    pub fn pair_from_coarse(&self, coarse: Vec<f64>) -> Result<FieldPair> {
        let fine = self.prolongate(&coarse)?;
        Ok(FieldPair { coarse, fine })
    }

    /// Injection: fine values at the nodes that coincide with coarse nodes.
    pub fn inject(&self, fine: &[f64]) -> Vec<f64> {
        let g = &self.fine;
        let c = &self.coarse;
        let mut out = Vec::with_capacity(c.len());
        for iz in 0..c.nz {
            let fz = ((c.z(iz) - g.z0) / g.dz).round() as usize;
            for ix in 0..c.nx {
                let fx = ((c.x(ix) - g.x0) / g.dx).round() as usize;
                out.push(fine[g.index(fx, fz)]);
            }
        }
        out
    }
}

fn check_nested_axis(
    c0: f64,
    ch: f64,
    cn: usize,
    f0: f64,
    fh: f64,
    fn_: usize,
    axis: &str,
) -> Result<()> {
    let ratio = ch / fh;
    if (ratio - ratio.round()).abs() > COORD_TOL * ratio || ratio.round() < 1.0 {
        return Err(Error::Config(format!(
            "{axis}: coarse spacing {ch} is not an integer multiple of fine spacing {fh}"
        )));
    }
    let off = (c0 - f0) / fh;
    if (off - off.round()).abs() > 1e-6 || off.round() < 0.0 {
        return Err(Error::Config(format!(
            "{axis}: coarse origin {c0} does not coincide with a fine node"
        )));
    }
    let last = c0 + (cn - 1) as f64 * ch;
    let fine_last = f0 + (fn_ - 1) as f64 * fh;
    if last > fine_last + COORD_TOL * fh * fn_ as f64 {
        return Err(Error::Config(format!(
            "{axis}: coarse grid extends past the fine grid ({last} > {fine_last})"
        )));
    }
    Ok(())
}

/// For each fine node along one axis: (left coarse index, right coarse index, weight of right).
fn axis_stencil(c0: f64, ch: f64, cn: usize, f0: f64, fh: f64, fn_: usize) -> Vec<(usize, usize, f64)> {
    (0..fn_)
        .map(|k| {
            let s = (f0 + k as f64 * fh - c0) / ch;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (cn - 1) as f64 {
                (cn - 1, cn - 1, 0.0)
            } else {
                let i = s.floor() as usize;
                let mut w = s - i as f64;
                // snap round-off so coincident nodes copy exactly
                if w < 1e-12 {
                    w = 0.0;
                }
                (i, (i + 1).min(cn - 1), w)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair() -> GridTransfer {
        let fine = Grid2D::covering(20.0, 16.0, 0.2).unwrap();
        let coarse = Grid2D::cell_centered(20.0, 16.0, 2.0).unwrap();
        GridTransfer::new(coarse, fine).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid2D::new((0.0, 0.0), (0.0, 1.0), (3, 3)).is_err());
        assert!(Grid2D::new((0.0, 0.0), (1.0, 1.0), (1, 3)).is_err());
        assert!(Grid2D::covering(10.0, 10.0, 0.3).is_err());
        let g = Grid2D::covering(80.0, 60.0, 0.2).unwrap();
        assert_eq!((g.nx, g.nz), (401, 301));
        assert!((g.x_max() - 80.0).abs() < 1e-9);
        let c = Grid2D::cell_centered(80.0, 80.0, 2.0).unwrap();
        assert_eq!(c.len(), 1600);
    }

    #[test]
    fn lumped_coarse_weights_equal_cell_area() {
        let t = pair();
        for w in t.coarse_weights() {
            assert!((w - 4.0).abs() < 1e-10, "{w}");
        }
    }

    #[test]
    fn prolongation_reproduces_constants() {
        let t = pair();
        let fine = t.prolongate(&vec![1.0; t.coarse().len()]).unwrap();
        assert!(fine.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let back = t.restrict(&fine).unwrap();
        assert!(back.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn transfer_pair_is_adjoint() {
        let t = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a: Vec<f64> = (0..t.coarse().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..t.fine().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs = weighted_dot(&t.prolongate(&a).unwrap(), &b, t.fine_weights());
            let rhs = weighted_dot(&a, &t.restrict(&b).unwrap(), t.coarse_weights());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn round_trip_exact_for_linear_fields_at_interior_nodes() {
        let t = pair();
        let c = *t.coarse();
        let a: Vec<f64> = c.nodes().map(|(_, _, x, z)| 1.0 + 0.3 * x - 0.7 * z).collect();
        let back = t.restrict(&t.prolongate(&a).unwrap()).unwrap();
        for (ix, iz, _, _) in c.nodes() {
            if ix == 0 || iz == 0 || ix == c.nx - 1 || iz == c.nz - 1 {
                continue;
            }
            let k = c.index(ix, iz);
            assert!((back[k] - a[k]).abs() <= 1e-12 * a[k].abs().max(1.0));
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let fine = Grid2D::covering(20.0, 16.0, 0.2).unwrap();
        let coarse = Grid2D::new((0.1, 0.0), (2.0, 2.0), (10, 8)).unwrap();
        assert!(GridTransfer::new(coarse, fine).is_err());
        let too_big = Grid2D::cell_centered(40.0, 16.0, 2.0).unwrap();
        assert!(GridTransfer::new(too_big, fine).is_err());
        let t = pair();
        assert!(t.prolongate(&[1.0; 3]).is_err());
    }

    #[test]
    fn injection_picks_coincident_nodes() {
        let t = pair();
        let f: Vec<f64> = t.fine().nodes().map(|(_, _, x, z)| x * 100.0 + z).collect();
        let c = t.inject(&f);
        for (k, (_, _, x, z)) in t.coarse().nodes().enumerate() {
            assert!((c[k] - (x * 100.0 + z)).abs() < 1e-9);
        }
    }

    #[test]
    fn model_rejects_nonpositive_values() {
        let g = Grid2D::covering(1.0, 1.0, 0.5).unwrap();
        assert!(VelocityModel::new(g, vec![1.0; 8]).is_err());
        assert!(VelocityModel::new(g, vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        let m = VelocityModel::uniform(g, 2.0).unwrap();
        let u = m.updated(&[-5.0; 9], 0.5).unwrap();
        assert!(u.values().iter().all(|v| *v == 0.5));
    }
}
