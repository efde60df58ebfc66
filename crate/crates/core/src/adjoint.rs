//! Adjoint sources, sensitivity kernels and their aggregation on the
//! inversion grid.

use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridTransfer};
use crate::picking::PhaseWindow;
use crate::scaling::ScalingOperator;
use crate::wave::{adjoint_injections, PointStencil, ReceiverSpec, SourceSpec, Trace, Wavefield, WaveSolver};

/// Misfit of one source-receiver pair; `None` when the pair was skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMisfit {
    pub source: usize,
    pub receiver: usize,
    pub value: Option<f64>,
}

/// Adjoint sources of one earthquake, zero outside the phase windows.
#[derive(Clone, Debug)]
pub struct AdjointSourceSet {
    pub source: usize,
    /// `(receiver, Q_ij)` for every accepted, non-degenerate pair.
    pub series: Vec<(usize, Trace)>,
    pub misfits: Vec<PairMisfit>,
}

impl AdjointSourceSet {
    pub fn misfit(&self) -> f64 {
        self.misfits.iter().filter_map(|m| m.value).sum()
    }

    /// Receivers whose pair was accepted but degenerate under the operator.
    pub fn flagged(&self) -> Vec<usize> {
        self.misfits
            .iter()
            .filter(|m| m.value.is_none())
            .map(|m| m.receiver)
            .collect()
    }
}

/// Windows both traces with the same window and evaluates the misfit; with
/// `adjoint` also the windowed adjoint source. Degenerate pairs give `None`.
fn pair_terms(
    op: &ScalingOperator,
    window: &PhaseWindow,
    s: &Trace,
    d: &Trace,
    adjoint: bool,
) -> Result<Option<(f64, Option<Vec<f64>>)>> {
    let dt = s.dt;
    let sw = window.apply(&s.samples, dt);
    let dw = window.apply(&d.samples, dt);
    let out = if adjoint {
        op.misfit_and_adjoint(&sw, &dw, dt)
            .map(|(v, q)| (v, Some(window.apply(&q, dt))))
    } else {
        op.misfit(&sw, &dw, dt).map(|v| (v, None))
    };
    match out {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateTrace) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-pair misfits of one source over its accepted windows.
pub fn pair_misfits(
    op: &ScalingOperator,
    windows: &[PhaseWindow],
    synthetic: &[Trace],
    observed: &[Trace],
) -> Result<Vec<PairMisfit>> {
    let mut out = Vec::new();
    for w in windows.iter().filter(|w| w.accepted()) {
        let value = pair_terms(op, w, &synthetic[w.receiver], &observed[w.receiver], false)?.map(|(v, _)| v);
        out.push(PairMisfit {
            source: w.source,
            receiver: w.receiver,
            value,
        });
    }
    Ok(out)
}

/// Adjoint sources `Q_ij` of one source. `windows` holds that source's row.
pub fn build_adjoint_sources(
    op: &ScalingOperator,
    source: usize,
    windows: &[PhaseWindow],
    synthetic: &[Trace],
    observed: &[Trace],
) -> Result<AdjointSourceSet> {
    let mut series = Vec::new();
    let mut misfits = Vec::new();
    for w in windows.iter().filter(|w| w.accepted()) {
        if w.source != source {
            return Err(Error::Internal(format!("window of source {} passed for source {source}", w.source)));
        }
        let s = &synthetic[w.receiver];
        let d = &observed[w.receiver];
        if s.len() != d.len() {
            return Err(Error::Internal("synthetic and observed traces differ in length".into()));
        }
        let terms = pair_terms(op, w, s, d, true)?;
        misfits.push(PairMisfit {
            source,
            receiver: w.receiver,
            value: terms.as_ref().map(|t| t.0),
        });
        if let Some((_, Some(q))) = terms {
            series.push((w.receiver, Trace::new(source, w.receiver, s.dt, q)));
        }
    }
    Ok(AdjointSourceSet {
        source,
        series,
        misfits,
    })
}

/// Kernel of one source on the physical simulation grid: the misfit change
/// per unit velocity change, per unit area.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityKernel {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl SensitivityKernel {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn finish_kernel(solver: &WaveSolver, acc: &[f64]) -> SensitivityKernel {
    let dt = solver.time().dt;
    let values = solver.physical_part(acc).into_iter().map(|v| -dt * v).collect();
    SensitivityKernel {
        grid: *solver.grid(),
        values,
    }
}

/// Correlates a stored forward field with a stored adjoint field.
pub fn compute_kernel(solver: &WaveSolver, forward: &Wavefield, adjoint: &Wavefield) -> Result<SensitivityKernel> {
    if forward.steps() != adjoint.steps()
        || forward.dims() != adjoint.dims()
        || forward.steps() != solver.time().steps()
        || forward.dims() != solver.padded_dims()
    {
        return Err(Error::Internal("forward and adjoint wavefields are on different axes".into()));
    }
    let len = forward.frame_len();
    let mut acc = vec![0.0; len];
    let (mut u, mut w) = (vec![0.0; len], vec![0.0; len]);
    for n in 0..forward.steps() {
        forward.frame_at(n, &mut u);
        adjoint.frame_at(n, &mut w);
        solver.accumulate_sensitivity(&w, &u, &mut acc);
    }
    Ok(finish_kernel(solver, &acc))
}

/// Runs the adjoint solve for `injections` and correlates it with `forward`
/// on the fly, so the adjoint field is never stored.
pub fn adjoint_kernel(
    solver: &WaveSolver,
    forward: &Wavefield,
    injections: &[(ReceiverSpec, &Trace)],
) -> Result<SensitivityKernel> {
    if injections.is_empty() {
        return Ok(SensitivityKernel::zeros(*solver.grid()));
    }
    if forward.steps() != solver.time().steps() || forward.dims() != solver.padded_dims() {
        return Err(Error::Internal("forward wavefield is on a different axis".into()));
    }
    let (stencils, series) = adjoint_injections(solver, injections)?;
    let inj: Vec<(&PointStencil, &[f64])> = stencils.iter().zip(&series).map(|(s, f)| (s, f.as_slice())).collect();
    let n = forward.steps();
    let len = forward.frame_len();
    let mut acc = vec![0.0; len];
    let mut u = vec![0.0; len];
    solver.run_with(&inj, &[], false, false, |j, w| {
        if j >= 1 {
            forward.frame_at(n - j, &mut u);
            solver.accumulate_sensitivity(w, &u, &mut acc);
        }
        Ok(())
    })?;
    Ok(finish_kernel(solver, &acc))
}

/// 0/1 weights on the simulation grid: zero in a band along the domain edge
/// and within a radius of every source and receiver.
pub fn gradient_mask(
    grid: &Grid2D,
    sources: &[SourceSpec],
    receivers: &[ReceiverSpec],
    band_cells: usize,
    radius_cells: f64,
) -> Vec<f64> {
    let radius = radius_cells * grid.dx.max(grid.dz);
    let points: Vec<(f64, f64)> = sources
        .iter()
        .map(|s| (s.x, s.z))
        .chain(receivers.iter().map(|r| (r.x, r.z)))
        .collect();
    grid.nodes()
        .map(|(ix, iz, x, z)| {
            let edge = ix < band_cells || iz < band_cells || ix + band_cells >= grid.nx || iz + band_cells >= grid.nz;
            let near = points.iter().any(|&(px, pz)| (x - px).hypot(z - pz) <= radius);
            if edge || near {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Separable Gaussian smoothing with standard deviation `sigma` in km.
pub fn smooth(grid: &Grid2D, values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let taps = |h: f64| -> Vec<f64> {
        let r = (3.0 * sigma / h).ceil() as i64;
        (-r..=r).map(|k| (-0.5 * (k as f64 * h / sigma).powi(2)).exp()).collect()
    };
    let pass = |src: &[f64], kernel: &[f64], along_x: bool| -> Vec<f64> {
        let r = (kernel.len() / 2) as i64;
        let mut out = vec![0.0; src.len()];
        for iz in 0..grid.nz {
            for ix in 0..grid.nx {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, w) in kernel.iter().enumerate() {
                    let off = t as i64 - r;
                    let (jx, jz) = if along_x { (ix as i64 + off, iz as i64) } else { (ix as i64, iz as i64 + off) };
                    if jx < 0 || jz < 0 || jx >= grid.nx as i64 || jz >= grid.nz as i64 {
                        continue;
                    }
                    acc += w * src[grid.index(jx as usize, jz as usize)];
                    wsum += w;
                }
                out[grid.index(ix, iz)] = acc / wsum;
            }
        }
        out
    };
    let a = pass(values, &taps(grid.dx), true);
    pass(&a, &taps(grid.dz), false)
}

/// Total gradient on the inversion grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    /// Masked sum of kernels on the simulation grid.
    pub fine: Vec<f64>,
    /// Restriction of `fine` to the inversion grid. In the coarse weighted
    /// inner product, `<coarse, dm> = sum_fine area * fine * P dm`.
    pub coarse: Vec<f64>,
}

/// Sums kernels in the given order, applies the mask and restricts.
pub fn aggregate_gradient(kernels: &[SensitivityKernel], transfer: &GridTransfer, mask: &[f64]) -> Result<GradientField> {
    let fine_grid = transfer.fine();
    let mut fine = vec![0.0; fine_grid.len()];
    for k in kernels {
        if k.grid != *fine_grid {
            return Err(Error::Internal("kernel is not on the simulation grid".into()));
        }
        for (a, v) in fine.iter_mut().zip(&k.values) {
            *a += v;
        }
    }
    for (a, m) in fine.iter_mut().zip(mask) {
        *a *= m;
    }
    let coarse = transfer.restrict(&fine)?;
    Ok(GradientField { fine, coarse })
}
