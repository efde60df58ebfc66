//! Experiment configuration, the two layered presets, and assembly of an
//! inversion problem from a configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::adjoint::gradient_mask;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridTransfer, VelocityModel};
use crate::inversion::{OptimizerPolicy, Problem};
use crate::models::LayeredModel;
use crate::picking::{select_pairs, PhaseWindow, WindowPolicy};
use crate::scaling::{MisfitKind, ScalingOperator, DEFAULT_EPSILON};
use crate::wave::{solve_forward, ReceiverSpec, SolverConfig, SourceSpec, TimeAxis, Trace, WaveSolver};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    TwoLayer,
    CrustalRoot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Full,
    Desk,
}

impl FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-layer" => Ok(PresetName::TwoLayer),
            "crustal-root" => Ok(PresetName::CrustalRoot),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected two-layer or crustal-root)"))),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale '{other}' (expected full or desk)"))),
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PresetName::TwoLayer => "two-layer",
            PresetName::CrustalRoot => "crustal-root",
        })
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub width: f64,
    pub depth: f64,
    /// Simulation grid spacing, km.
    pub spacing: f64,
    /// Inversion cell size, km.
    pub inversion_spacing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "true")]
    pub truth: LayeredModel,
    pub initial: LayeredModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Number of randomly placed earthquakes; ignored when `positions` is set.
    pub count: usize,
    pub positions: Vec<[f64; 2]>,
    pub f0: f64,
    pub amplitude: f64,
    pub origin_time: f64,
    /// Wavelet peak delay after the origin time, in periods.
    pub delay_periods: f64,
    /// Distance kept from the domain sides and from the crust bottom, km.
    pub margin: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            count: 0,
            positions: Vec::new(),
            f0: 2.0,
            amplitude: 1.0,
            origin_time: 0.0,
            delay_periods: 1.5,
            margin: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    pub count: usize,
    pub positions: Vec<[f64; 2]>,
    /// Burial depth of the surface line, km.
    pub depth: f64,
    /// Distance kept from the left and right sides, km.
    pub margin: f64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            count: 0,
            positions: Vec::new(),
            depth: 0.6,
            margin: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub misfit: MisfitKind,
    pub epsilon: f64,
    pub iterations: usize,
    pub optimizer: OptimizerPolicy,
    /// Gradient zeroed within this many simulation cells of the domain edge.
    pub mask_band_cells: usize,
    /// Gradient zeroed within this many simulation cells of sources and receivers.
    pub mask_radius_cells: f64,
    /// Optional Gaussian smoothing of the gradient, std in km.
    pub smoothing: Option<f64>,
    /// Write a model snapshot every this many iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            misfit: MisfitKind::W2P3,
            epsilon: DEFAULT_EPSILON,
            iterations: 20,
            optimizer: OptimizerPolicy::default(),
            mask_band_cells: 3,
            mask_radius_cells: 3.0,
            smoothing: None,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub domain: DomainConfig,
    pub time: TimeConfig,
    pub model: ModelConfig,
    pub sources: SourceConfig,
    pub receivers: ReceiverConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub picking: WindowPolicy,
    #[serde(default)]
    pub inversion: InversionConfig,
}

impl ExperimentConfig {
    /// Reference geometry at full scale, or shrunk for desk runs: lengths and
    /// times by 1/4, frequency by 2, simulation steps by 1/2, a 1 km
    /// inversion cell, and fewer events.
    pub fn preset(name: PresetName, scale: Scale) -> Self {
        let (truth, initial, width, depth, receivers) = match name {
            PresetName::TwoLayer => (LayeredModel::two_layer(true), LayeredModel::two_layer(false), 80.0, 60.0, 25),
            PresetName::CrustalRoot => {
                (LayeredModel::crustal_root(true), LayeredModel::crustal_root(false), 80.0, 80.0, 40)
            }
        };
        let s = match scale {
            Scale::Full => 1.0,
            Scale::Desk => 0.25,
        };
        let (spacing, dt, f0) = match scale {
            Scale::Full => (0.2, 0.01, 2.0),
            Scale::Desk => (0.1, 0.005, 4.0),
        };
        let (n_src, n_rec) = match scale {
            Scale::Full => (80, receivers),
            Scale::Desk => (8, 8),
        };
        // shorter windows keep more pairs clear of the Moho reflection in the shrunk geometry
        let (lead, tail) = match scale {
            Scale::Full => (1.0, 3.0),
            Scale::Desk => (0.75, 1.75),
        };
        let initial = initial.scaled(s);
        let reflectors = initial.horizontal_interfaces();
        let truth = truth.scaled(s);
        let c_max = truth_max(&truth).max(truth_max(&initial));
        Self {
            schema_version: SCHEMA_VERSION,
            name: format!("{name}-{scale}"),
            seed: 2024,
            domain: DomainConfig {
                width: width * s,
                depth: depth * s,
                spacing,
                // cell centres must land on simulation nodes
                inversion_spacing: match scale {
                    Scale::Full => 2.0,
                    Scale::Desk => 1.0,
                },
            },
            time: TimeConfig { t_final: 21.0 * s, dt },
            model: ModelConfig { truth, initial },
            sources: SourceConfig {
                count: n_src,
                f0,
                // direct arrivals peak near 1, so that epsilon is a small shift
                amplitude: 1e3,
                margin: 3.0 * s,
                ..SourceConfig::default()
            },
            receivers: ReceiverConfig {
                count: n_rec,
                depth: 3.0 * spacing,
                margin: 3.0 * spacing,
                ..ReceiverConfig::default()
            },
            solver: SolverConfig {
                pml_velocity: Some(c_max),
                ..SolverConfig::default()
            },
            picking: WindowPolicy {
                lead,
                tail,
                reflectors,
                ..WindowPolicy::default()
            },
            inversion: InversionConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "configuration schema version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn operator(&self) -> Result<ScalingOperator> {
        ScalingOperator::new(self.inversion.misfit, self.inversion.epsilon)
    }

    pub fn simulation_grid(&self) -> Result<Grid2D> {
        Grid2D::covering(self.domain.width, self.domain.depth, self.domain.spacing)
    }

    pub fn inversion_grid(&self) -> Result<Grid2D> {
        Grid2D::cell_centered(self.domain.width, self.domain.depth, self.domain.inversion_spacing)
    }

    pub fn time_axis(&self) -> Result<TimeAxis> {
        TimeAxis::new(self.time.t_final, self.time.dt)
    }

    /// Earthquakes: explicit positions, or uniform in the crust of the
    /// initial model away from the margins, drawn from the seeded generator.
    pub fn source_specs(&self) -> Result<Vec<SourceSpec>> {
        let c = &self.sources;
        if !(c.f0 > 0.0) || c.origin_time < 0.0 || c.delay_periods < 0.0 {
            return Err(Error::Config("sources need f0 > 0, origin time >= 0 and delay >= 0".into()));
        }
        let positions: Vec<[f64; 2]> = if !c.positions.is_empty() {
            c.positions.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let (x_lo, x_hi) = (c.margin, self.domain.width - c.margin);
            let (z_lo, z_hi) = (c.margin, self.model.initial.crust_bottom() - c.margin);
            if !(x_hi > x_lo && z_hi > z_lo) {
                return Err(Error::Config("source margins leave no room in the crust".into()));
            }
            (0..c.count)
                .map(|_| [rng.gen_range(x_lo..x_hi), rng.gen_range(z_lo..z_hi)])
                .collect()
        };
        if positions.is_empty() {
            return Err(Error::Config("the experiment has no sources".into()));
        }
        Ok(positions
            .iter()
            .map(|p| SourceSpec {
                x: p[0],
                z: p[1],
                origin_time: c.origin_time,
                f0: c.f0,
                amplitude: c.amplitude,
                delay: c.delay_periods / c.f0,
            })
            .collect())
    }

    /// Receivers: explicit positions, or uniform along the buried surface line.
    pub fn receiver_specs(&self) -> Result<Vec<ReceiverSpec>> {
        let c = &self.receivers;
        let positions: Vec<[f64; 2]> = if !c.positions.is_empty() {
            c.positions.clone()
        } else {
            // a separate stream so that source and receiver draws do not interact
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_5a11);
            let (x_lo, x_hi) = (c.margin, self.domain.width - c.margin);
            if !(x_hi > x_lo) {
                return Err(Error::Config("receiver margins leave no room".into()));
            }
            let mut xs: Vec<f64> = (0..c.count).map(|_| rng.gen_range(x_lo..x_hi)).collect();
            xs.sort_by(f64::total_cmp);
            xs.into_iter().map(|x| [x, c.depth]).collect()
        };
        if positions.is_empty() {
            return Err(Error::Config("the experiment has no receivers".into()));
        }
        Ok(positions.iter().map(|p| ReceiverSpec { x: p[0], z: p[1] }).collect())
    }
}

fn truth_max(m: &LayeredModel) -> f64 {
    match m {
        LayeredModel::TwoLayer { crust, mantle, anomaly, .. } => {
            anomaly.map(|a| a.velocity).unwrap_or(0.0).max(*crust).max(*mantle)
        }
        LayeredModel::CrustalRoot {
            upper_crust,
            lower_crust,
            mantle,
            ..
        } => upper_crust.max(*lower_crust).max(*mantle),
    }
}

/// A validated configuration with its grids, models and geometry resolved.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub transfer: GridTransfer,
    pub true_model: VelocityModel,
    pub initial_model: VelocityModel,
    pub sources: Vec<SourceSpec>,
    pub receivers: Vec<ReceiverSpec>,
    pub axis: TimeAxis,
    pub solver: SolverConfig,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema version {} is not supported", config.schema_version)));
        }
        let fine = config.simulation_grid()?;
        let coarse = config.inversion_grid()?;
        let transfer = GridTransfer::new(coarse, fine)?;
        let true_model = config.model.truth.sample(&fine)?;
        let initial_model = config.model.initial.sample(&fine)?;
        let axis = config.time_axis()?;
        let mut solver = config.solver.clone();
        if solver.pml_velocity.is_none() {
            solver.pml_velocity = Some(true_model.max().max(initial_model.max()));
        }
        // CFL on both models
        WaveSolver::new(&true_model, &solver, axis)?;
        WaveSolver::new(&initial_model, &solver, axis)?;
        config.operator()?;
        let sources = config.source_specs()?;
        let receivers = config.receiver_specs()?;
        let probe = WaveSolver::new(&initial_model, &solver, axis)?;
        for (i, s) in sources.iter().enumerate() {
            probe
                .stencil(s.x, s.z)
                .map_err(|e| Error::Config(format!("source {i}: {e}")))?;
        }
        for (j, r) in receivers.iter().enumerate() {
            probe
                .stencil(r.x, r.z)
                .map_err(|e| Error::Config(format!("receiver {j}: {e}")))?;
        }
        Ok(Self {
            config,
            transfer,
            true_model,
            initial_model,
            sources,
            receivers,
            axis,
            solver,
        })
    }

    /// Synthetic traces of every source in `model`.
    pub fn simulate(&self, model: &VelocityModel) -> Result<Vec<Vec<Trace>>> {
        let solver = WaveSolver::new(model, &self.solver, self.axis)?;
        (0..self.sources.len())
            .into_par_iter()
            .map(|i| {
                solve_forward(&solver, i, &self.sources[i], &self.receivers, false)
                    .map(|(t, _)| t)
                    .map_err(|e| e.for_source(i))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    /// Observed data: synthetics of the true model.
    pub fn observed(&self) -> Result<Vec<Vec<Trace>>> {
        self.simulate(&self.true_model)
    }

    /// Windows and accept/reject decisions on the initial model.
    pub fn windows(&self, policy: &WindowPolicy, observed: &[Vec<Trace>]) -> Result<Vec<PhaseWindow>> {
        select_pairs(&self.initial_model, &self.sources, &self.receivers, &self.axis, policy, Some(observed))
    }

    pub fn mask(&self) -> Vec<f64> {
        gradient_mask(
            self.transfer.fine(),
            &self.sources,
            &self.receivers,
            self.config.inversion.mask_band_cells,
            self.config.inversion.mask_radius_cells,
        )
    }

    pub fn problem(&self, observed: Vec<Vec<Trace>>, windows: Vec<PhaseWindow>, operator: ScalingOperator) -> Problem {
        Problem {
            transfer: self.transfer.clone(),
            solver: self.solver.clone(),
            axis: self.axis,
            sources: self.sources.clone(),
            receivers: self.receivers.clone(),
            observed,
            windows,
            operator,
            mask: self.mask(),
            smoothing: self.config.inversion.smoothing,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_two_layer_parameters() {
        let c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Full);
        assert_eq!(c.receivers.count, 25);
        assert_eq!(c.sources.count, 80);
        assert_eq!(c.time.t_final, 21.0);
        assert_eq!(c.time.dt, 0.01);
        assert_eq!(c.domain.spacing, 0.2);
        assert_eq!(c.sources.f0, 2.0);
        assert_eq!(c.inversion.epsilon, 1e-3);
        assert_eq!(c.inversion_grid().unwrap().len(), 1200);
    }

    #[test]
    fn full_crustal_root_has_1600_unknowns() {
        let c = ExperimentConfig::preset(PresetName::CrustalRoot, Scale::Full);
        assert_eq!(c.receivers.count, 40);
        assert_eq!(c.sources.count, 80);
        assert_eq!(c.inversion_grid().unwrap().len(), 1600);
    }

    #[test]
    fn desk_preset_validates() {
        for name in [PresetName::TwoLayer, PresetName::CrustalRoot] {
            let e = Experiment::build(ExperimentConfig::preset(name, Scale::Desk)).unwrap();
            assert_eq!(e.sources.len(), 8);
            assert_eq!(e.receivers.len(), 8);
            for s in &e.sources {
                assert!(s.z >= 0.75 && s.z <= e.config.model.initial.crust_bottom() - 0.75);
            }
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Desk);
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let bad = text.replace("schema_version = 1", "schema_version = 9");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn placement_is_seeded() {
        let c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Desk);
        assert_eq!(c.source_specs().unwrap(), c.source_specs().unwrap());
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(c.source_specs().unwrap(), d.source_specs().unwrap());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Desk);
        c.time.dt = 0.02;
        assert!(matches!(Experiment::build(c), Err(Error::Cfl { .. })));
        let mut c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Desk);
        c.domain.inversion_spacing = 0.33;
        assert!(Experiment::build(c).is_err());
        let mut c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Desk);
        c.receivers.positions = vec![[5.0, 0.0]];
        assert!(Experiment::build(c).is_err());
        assert!("moon".parse::<PresetName>().is_err());
    }
}
