//! The outer optimization loop: misfit over accepted pairs, steepest descent
//! with backtracking, and convergence metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;

use crate::adjoint::{
    adjoint_kernel, aggregate_gradient, build_adjoint_sources, pair_misfits, smooth, GradientField, PairMisfit,
    SensitivityKernel,
};
use crate::error::{Error, Result};
use crate::grid::{weighted_dot, GridTransfer, VelocityModel};
use crate::picking::PhaseWindow;
use crate::scaling::ScalingOperator;
use crate::wave::{solve_forward, ReceiverSpec, SolverConfig, SourceSpec, TimeAxis, Trace, WaveSolver};

/// Everything that stays fixed during an inversion.
#[derive(Clone, Debug)]
pub struct Problem {
    pub transfer: GridTransfer,
    pub solver: SolverConfig,
    pub axis: TimeAxis,
    pub sources: Vec<SourceSpec>,
    pub receivers: Vec<ReceiverSpec>,
    /// `observed[i][j]`.
    pub observed: Vec<Vec<Trace>>,
    /// Row-major by source: `windows[i * receivers + j]`.
    pub windows: Vec<PhaseWindow>,
    pub operator: ScalingOperator,
    /// 0/1 weights on the simulation grid.
    pub mask: Vec<f64>,
    /// Gaussian smoothing of the summed kernel, std in km.
    pub smoothing: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MisfitEvaluation {
    pub total: f64,
    pub pairs: Vec<PairMisfit>,
}

impl MisfitEvaluation {
    /// Pairs that contributed a value.
    pub fn used_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.value.is_some()).count()
    }
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let (ns, nr) = (self.sources.len(), self.receivers.len());
        if self.windows.len() != ns * nr {
            return Err(Error::Config(format!("expected {} windows, got {}", ns * nr, self.windows.len())));
        }
        for (k, w) in self.windows.iter().enumerate() {
            if w.source != k / nr || w.receiver != k % nr {
                return Err(Error::Config("windows are not ordered by (source, receiver)".into()));
            }
        }
        if self.observed.len() != ns || self.observed.iter().any(|row| row.len() != nr) {
            return Err(Error::Config("observed traces do not match the geometry".into()));
        }
        if self.observed.iter().flatten().any(|t| t.len() != self.axis.nt) {
            return Err(Error::Config("observed traces do not match the time axis".into()));
        }
        if self.mask.len() != self.transfer.fine().len() {
            return Err(Error::Config("mask does not match the simulation grid".into()));
        }
        Ok(())
    }

    pub fn source_windows(&self, i: usize) -> &[PhaseWindow] {
        let nr = self.receivers.len();
        &self.windows[i * nr..(i + 1) * nr]
    }

    pub fn accepted_pairs(&self) -> usize {
        self.windows.iter().filter(|w| w.accepted()).count()
    }

    pub fn wave_solver(&self, model: &VelocityModel) -> Result<WaveSolver> {
        if model.grid() != self.transfer.fine() {
            return Err(Error::Config("model is not on the simulation grid".into()));
        }
        WaveSolver::new(model, &self.solver, self.axis)
    }

    /// Synthetic traces of every source.
    pub fn synthetics(&self, model: &VelocityModel) -> Result<Vec<Vec<Trace>>> {
        let solver = self.wave_solver(model)?;
        self.per_source(|i| {
            let (tr, _) = solve_forward(&solver, i, &self.sources[i], &self.receivers, false)?;
            Ok(tr)
        })
    }

    /// Runs `f` for every source, in parallel, returning results in source order.
    fn per_source<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        (0..self.sources.len())
            .into_par_iter()
            .map(|i| f(i).map_err(|e| e.for_source(i)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    /// Total misfit over accepted pairs and the per-pair terms.
    pub fn evaluate_misfit(&self, model: &VelocityModel) -> Result<MisfitEvaluation> {
        let solver = self.wave_solver(model)?;
        let rows = self.per_source(|i| {
            let (tr, _) = solve_forward(&solver, i, &self.sources[i], &self.receivers, false)?;
            pair_misfits(&self.operator, self.source_windows(i), &tr, &self.observed[i])
        })?;
        Ok(collect_misfit(rows))
    }

    /// Misfit, per-source kernels and the aggregated gradient.
    pub fn gradient(&self, model: &VelocityModel) -> Result<(MisfitEvaluation, Vec<SensitivityKernel>, GradientField)> {
        let solver = self.wave_solver(model)?;
        let rows = self.per_source(|i| {
            let (tr, field) = solve_forward(&solver, i, &self.sources[i], &self.receivers, true)?;
            let field = field.ok_or_else(|| Error::Internal("forward run did not store a wavefield".into()))?;
            let set = build_adjoint_sources(&self.operator, i, self.source_windows(i), &tr, &self.observed[i])?;
            let inj: Vec<(ReceiverSpec, &Trace)> = set.series.iter().map(|(j, q)| (self.receivers[*j], q)).collect();
            let kernel = adjoint_kernel(&solver, &field, &inj)?;
            Ok((set.misfits, kernel))
        })?;
        let mut misfits = Vec::with_capacity(rows.len());
        let mut kernels = Vec::with_capacity(rows.len());
        for (m, k) in rows {
            misfits.push(m);
            kernels.push(k);
        }
        let mut grad = aggregate_gradient(&kernels, &self.transfer, &self.mask)?;
        if let Some(sigma) = self.smoothing {
            let smoothed = smooth(self.transfer.fine(), &grad.fine, sigma);
            grad.fine = smoothed.iter().zip(&self.mask).map(|(v, m)| v * m).collect();
            grad.coarse = self.transfer.restrict(&grad.fine)?;
        }
        Ok((collect_misfit(misfits), kernels, grad))
    }

    /// Fine-grid update `mask * P(delta)` of a coarse perturbation.
    pub fn fine_update(&self, coarse: &[f64]) -> Result<Vec<f64>> {
        let fine = self.transfer.prolongate(coarse)?;
        Ok(fine.iter().zip(&self.mask).map(|(v, m)| v * m).collect())
    }

    /// `<a, b>` in the coarse-grid weighted inner product.
    pub fn coarse_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        weighted_dot(a, b, self.transfer.coarse_weights())
    }
}

fn collect_misfit(rows: Vec<Vec<PairMisfit>>) -> MisfitEvaluation {
    let pairs: Vec<PairMisfit> = rows.into_iter().flatten().collect();
    let mut total = 0.0;
    for v in pairs.iter().filter_map(|p| p.value) {
        total += v;
    }
    MisfitEvaluation { total, pairs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerPolicy {
    /// Largest velocity change of a first line-search trial, km/s.
    pub max_update: f64,
    pub armijo_c1: f64,
    pub max_trials: usize,
    pub velocity_floor: f64,
}

impl Default for OptimizerPolicy {
    fn default() -> Self {
        Self {
            max_update: 0.1,
            armijo_c1: 1e-4,
            max_trials: 8,
            velocity_floor: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    ZeroGradient,
    LineSearchFailed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Running => "running",
            Status::ZeroGradient => "zero-gradient",
            Status::LineSearchFailed => "line-search-failed",
        })
    }
}

#[derive(Clone, Debug)]
pub struct InversionState {
    pub k: usize,
    pub model: VelocityModel,
    pub misfit: f64,
    pub rme: Option<f64>,
    pub rmf: f64,
    /// Step length of the accepted update (0 for `k = 0` or a stall).
    pub step: f64,
    pub accepted_pairs: usize,
    pub status: Status,
    pub seconds: f64,
}

/// Relative model error on the inversion grid.
pub fn relative_model_error(
    transfer: &GridTransfer,
    c_k: &VelocityModel,
    c_0: &VelocityModel,
    c_t: &VelocityModel,
) -> Result<f64> {
    let w = transfer.coarse_weights();
    let (k, o, t) = (transfer.inject(c_k.values()), transfer.inject(c_0.values()), transfer.inject(c_t.values()));
    let num: f64 = k.iter().zip(&t).zip(w).map(|((a, b), w)| w * (a - b).powi(2)).sum();
    let den: f64 = o.iter().zip(&t).zip(w).map(|((a, b), w)| w * (a - b).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::MetricUndefined("initial and true models coincide on the inversion grid".into()));
    }
    Ok(num / den)
}

/// `(RME, RMF)` for iterate `c_k`.
pub fn metrics(
    transfer: &GridTransfer,
    c_k: &VelocityModel,
    c_0: &VelocityModel,
    c_t: &VelocityModel,
    misfit_k: f64,
    misfit_0: f64,
) -> Result<(f64, f64)> {
    if misfit_0 == 0.0 {
        return Err(Error::MetricUndefined("initial misfit is zero".into()));
    }
    Ok((relative_model_error(transfer, c_k, c_0, c_t)?, misfit_k / misfit_0))
}

/// One steepest-descent iteration from `state` along `-gradient`.
pub fn step(
    problem: &Problem,
    state: &InversionState,
    gradient: &GradientField,
    policy: &OptimizerPolicy,
    misfit_0: f64,
    truth: Option<(&VelocityModel, &VelocityModel)>,
) -> Result<InversionState> {
    let started = Instant::now();
    let direction: Vec<f64> = gradient.coarse.iter().map(|g| -g).collect();
    let slope = problem.coarse_dot(&gradient.coarse, &direction);
    let fine_dir = problem.fine_update(&direction)?;
    let peak = fine_dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stalled = |status| InversionState {
        k: state.k + 1,
        step: 0.0,
        status,
        seconds: started.elapsed().as_secs_f64(),
        ..state.clone()
    };
    if peak == 0.0 || slope >= 0.0 {
        return Ok(stalled(Status::ZeroGradient));
    }
    let mut alpha = policy.max_update / peak;
    for _ in 0..policy.max_trials {
        let delta: Vec<f64> = fine_dir.iter().map(|v| alpha * v).collect();
        let trial = state.model.updated(&delta, policy.velocity_floor)?;
        let eval = problem.evaluate_misfit(&trial)?;
        if eval.total < state.misfit && eval.total <= state.misfit + policy.armijo_c1 * alpha * slope {
            let rme = match truth {
                Some((c0, ct)) => Some(relative_model_error(&problem.transfer, &trial, c0, ct)?),
                None => None,
            };
            return Ok(InversionState {
                k: state.k + 1,
                model: trial,
                misfit: eval.total,
                rme,
                rmf: eval.total / misfit_0,
                step: alpha,
                accepted_pairs: eval.used_pairs(),
                status: Status::Running,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        alpha *= 0.5;
    }
    Ok(stalled(Status::LineSearchFailed))
}

/// Runs up to `iterations` steps from `c_0`, calling `observe` on every state
/// (starting with `k = 0`). Stops early on a stall.
pub fn invert(
    problem: &Problem,
    c_0: &VelocityModel,
    c_true: Option<&VelocityModel>,
    policy: &OptimizerPolicy,
    iterations: usize,
    mut observe: impl FnMut(&InversionState) -> Result<()>,
) -> Result<Vec<InversionState>> {
    problem.validate()?;
    let started = Instant::now();
    let (eval, _, mut grad) = problem.gradient(c_0)?;
    if eval.total == 0.0 {
        return Err(Error::MetricUndefined("initial misfit is zero".into()));
    }
    let misfit_0 = eval.total;
    let truth = c_true.map(|t| (c_0, t));
    let rme = match truth {
        Some((c0, ct)) => Some(relative_model_error(&problem.transfer, c0, c0, ct)?),
        None => None,
    };
    let mut state = InversionState {
        k: 0,
        model: c_0.clone(),
        misfit: misfit_0,
        rme,
        rmf: 1.0,
        step: 0.0,
        accepted_pairs: eval.used_pairs(),
        status: Status::Running,
        seconds: started.elapsed().as_secs_f64(),
    };
    observe(&state)?;
    let mut log = vec![state.clone()];
    for k in 0..iterations {
        let t0 = Instant::now();
        let next = step(problem, &state, &grad, policy, misfit_0, truth)?;
        let mut next = next;
        let done = next.status != Status::Running || k + 1 == iterations;
        if !done {
            grad = problem.gradient(&next.model)?.2;
        }
        next.seconds = t0.elapsed().as_secs_f64();
        observe(&next)?;
        log.push(next.clone());
        state = next;
        if state.status != Status::Running {
            break;
        }
    }
    Ok(log)
}

/// Convergence log as CSV: `k,Xi,RME,RMF,step,accepted_pairs`.
pub fn convergence_csv(log: &[InversionState]) -> String {
    let mut out = String::from("k,Xi,RME,RMF,step,accepted_pairs\n");
    for s in log {
        let rme = s.rme.map(|v| format!("{v:.17e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.17e},{},{:.17e},{:.17e},{}\n",
            s.k, s.misfit, rme, s.rmf, s.step, s.accepted_pairs
        ));
    }
    out
}
