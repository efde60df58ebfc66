//! Command-line driver: data generation, inversion runs, kernel dumps and
//! single-pair misfit comparison.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use w2fwi::experiment::{Experiment, ExperimentConfig, PresetName, Scale};
use w2fwi::inversion::{convergence_csv, invert, Problem};
use w2fwi::io;
use w2fwi::scaling::{MisfitKind, ScalingOperator};
use w2fwi::transport::w2_squared;
use w2fwi::wave::Trace;

#[derive(Parser, Debug)]
#[command(name = "w2fwi", version, about = "Velocity inversion with a quadratic Wasserstein misfit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate observed traces in the true model and write them with the window table.
    Generate(Common),
    /// Run the inversion and write the convergence log and model checkpoints.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Observed traces from `generate` (binary bundle); simulated when absent.
        #[arg(long)]
        observed: Option<PathBuf>,
    },
    /// Sensitivity kernel of one source in the initial model, and the
    /// transport map of one of its pairs.
    Kernel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        source: usize,
        /// Receiver whose map is written; defaults to the first accepted pair.
        #[arg(long)]
        receiver: Option<usize>,
        /// Use every pair over the whole record instead of phase windows.
        #[arg(long)]
        no_windows: bool,
    },
    /// Print the misfit of one trace pair under every operator.
    CompareTraces {
        #[command(flatten)]
        common: Common,
        /// Synthetic trace CSV; with `--observed-trace` skips simulation.
        #[arg(long, requires = "observed_trace")]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        observed_trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        source: usize,
        #[arg(long, default_value_t = 0)]
        receiver: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration file (TOML); replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "two-layer")]
    preset: String,
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long)]
    misfit: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-source work (0 uses every core).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => {
                let name: PresetName = self.preset.parse()?;
                let scale: Scale = self.scale.parse()?;
                ExperimentConfig::preset(name, scale)
            }
        };
        if let Some(m) = &self.misfit {
            cfg.inversion.misfit = m.parse::<MisfitKind>()?;
        }
        if let Some(e) = self.epsilon {
            cfg.inversion.epsilon = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn prepare_out(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).context("writing the resolved configuration")?;
    Ok(())
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let exp = Experiment::build(cfg.clone())?;
    prepare_out(&common.out, &cfg)?;
    let observed = exp.observed()?;
    let windows = exp.windows(&cfg.picking, &observed)?;
    let flat: Vec<Trace> = observed.iter().flatten().cloned().collect();
    io::write_traces_bin(&common.out.join("observed.bin"), &flat)?;
    io::write_model(&common.out.join("true_model.txt"), &exp.true_model)?;
    io::write_model(&common.out.join("initial_model.txt"), &exp.initial_model)?;
    write(&common.out.join("windows.csv"), io::windows_csv(&windows))?;
    let accepted = windows.iter().filter(|w| w.accepted()).count();
    println!(
        "wrote {} traces ({} sources x {} receivers), {accepted} accepted pairs, to {}",
        flat.len(),
        exp.sources.len(),
        exp.receivers.len(),
        common.out.display()
    );
    Ok(())
}

fn load_observed(exp: &Experiment, path: &Path) -> Result<Vec<Vec<Trace>>> {
    let flat = io::read_traces_bin(path).with_context(|| format!("reading observed traces {}", path.display()))?;
    let (ns, nr) = (exp.sources.len(), exp.receivers.len());
    if flat.len() != ns * nr {
        bail!("{} holds {} traces, the experiment needs {}", path.display(), flat.len(), ns * nr);
    }
    let mut rows = vec![Vec::with_capacity(nr); ns];
    for t in flat {
        if t.source >= ns || t.receiver != rows[t.source].len() || t.len() != exp.axis.steps() + 1 {
            bail!("trace ({}, {}) in {} does not match the experiment geometry", t.source, t.receiver, path.display());
        }
        rows[t.source].push(t);
    }
    Ok(rows)
}

fn run_invert(common: &Common, iterations: Option<usize>, observed: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let exp = Experiment::build(cfg.clone())?;
    prepare_out(&common.out, &cfg)?;
    let observed = match observed {
        Some(p) => load_observed(&exp, p)?,
        None => exp.observed()?,
    };
    let windows = exp.windows(&cfg.picking, &observed)?;
    write(&common.out.join("windows.csv"), io::windows_csv(&windows))?;
    let problem = exp.problem(observed, windows, cfg.operator()?);
    let iterations = iterations.unwrap_or(cfg.inversion.iterations);
    let every = cfg.inversion.checkpoint_every;
    let out = common.out.clone();
    let log = invert(
        &problem,
        &exp.initial_model,
        Some(&exp.true_model),
        &cfg.inversion.optimizer,
        iterations,
        |s| {
            println!(
                "k={:3} Xi={:.6e} RME={:.4} RMF={:.4} step={:.3e} pairs={} {} ({:.1} s)",
                s.k,
                s.misfit,
                s.rme.unwrap_or(f64::NAN),
                s.rmf,
                s.step,
                s.accepted_pairs,
                s.status,
                s.seconds
            );
            if every.is_some_and(|n| n > 0 && s.k % n == 0) {
                io::write_model(&out.join(format!("model_{:04}.txt", s.k)), &s.model)?;
            }
            Ok(())
        },
    )?;
    write(&common.out.join("convergence.csv"), convergence_csv(&log))?;
    let last = log.last().expect("log holds the initial state");
    io::write_model(&common.out.join("final_model.txt"), &last.model)?;
    println!("{} iterations, final status {}", last.k, last.status);
    Ok(())
}

/// The problem restricted to source `i`, renumbered as source 0.
fn single_source(problem: &Problem, i: usize) -> Problem {
    let mut p = problem.clone();
    p.sources = vec![problem.sources[i]];
    p.observed = vec![problem.observed[i]
        .iter()
        .map(|t| Trace { source: 0, ..t.clone() })
        .collect()];
    p.windows = problem
        .source_windows(i)
        .iter()
        .map(|w| {
            let mut w = w.clone();
            w.source = 0;
            w
        })
        .collect();
    p
}

fn run_kernel(common: &Common, source: usize, receiver: Option<usize>, no_windows: bool) -> Result<()> {
    let mut cfg = common.resolve()?;
    if no_windows {
        cfg.picking.enabled = false;
    }
    let exp = Experiment::build(cfg.clone())?;
    if source >= exp.sources.len() {
        bail!("source {source} does not exist (the experiment has {})", exp.sources.len());
    }
    prepare_out(&common.out, &cfg)?;
    let observed = exp.observed()?;
    let windows = exp.windows(&cfg.picking, &observed)?;
    let op = cfg.operator()?;
    let problem = single_source(&exp.problem(observed, windows, op), source);
    let (eval, kernels, grad) = problem.gradient(&exp.initial_model)?;
    let grid = exp.transfer.fine();
    let tag = format!("{}_s{source:03}", op.kind);
    io::write_grid(&common.out.join(format!("kernel_{tag}.txt")), grid, &kernels[0].values)?;
    write(
        &common.out.join(format!("kernel_{tag}.csv")),
        io::grid_csv(grid, &kernels[0].values, "kernel"),
    )?;
    io::write_grid(&common.out.join(format!("gradient_{tag}.txt")), exp.transfer.coarse(), &grad.coarse)?;
    write(&common.out.join(format!("windows_{tag}.csv")), io::windows_csv(&problem.windows))?;
    println!("source {source}: misfit {:.6e} over {} pairs", eval.total, eval.used_pairs());

    let pick = receiver.or_else(|| problem.windows.iter().find(|w| w.accepted()).map(|w| w.receiver));
    if let (Some(j), true) = (pick, op.kind.is_transport()) {
        let w = problem
            .windows
            .get(j)
            .with_context(|| format!("receiver {j} does not exist"))?;
        if !w.accepted() {
            bail!("pair ({source}, {j}) was rejected: {}", w.rejected.map(|r| r.to_string()).unwrap_or_default());
        }
        let synth = problem.synthetics(&exp.initial_model)?;
        let dt = exp.axis.dt;
        let f = op.apply(&w.apply(&synth[0][j].samples, dt), dt)?;
        let g = op.apply(&w.apply(&problem.observed[0][j].samples, dt), dt)?;
        let (w2, map) = w2_squared(&f, &g)?;
        write(&common.out.join(format!("map_{tag}_r{j:03}.csv")), io::map_csv(&map))?;
        println!("pair ({source}, {j}): W2^2 = {w2:.6e}");
    }
    Ok(())
}

fn compare(common: &Common, synthetic: Option<&Path>, observed: Option<&Path>, i: usize, j: usize) -> Result<()> {
    let cfg = common.resolve()?;
    let (dt, s, d) = match (synthetic, observed) {
        (Some(sp), Some(dp)) => {
            let s = io::read_trace_csv(sp).with_context(|| format!("reading {}", sp.display()))?;
            let d = io::read_trace_csv(dp).with_context(|| format!("reading {}", dp.display()))?;
            if s.dt != d.dt || s.len() != d.len() {
                bail!("the two traces have different time axes");
            }
            (s.dt, s.samples, d.samples)
        }
        _ => {
            let exp = Experiment::build(cfg.clone())?;
            if i >= exp.sources.len() || j >= exp.receivers.len() {
                bail!("pair ({i}, {j}) does not exist");
            }
            let observed = exp.observed()?;
            let windows = exp.windows(&cfg.picking, &observed)?;
            let w = &windows[i * exp.receivers.len() + j];
            let synth = exp.simulate(&exp.initial_model)?;
            let status = w.rejected.map(|r| format!("rejected: {r}")).unwrap_or_else(|| "accepted".into());
            println!("pair ({i}, {j}) window [{:.4}, {:.4}] s, {status}", w.t_lo, w.t_hi);
            let dt = exp.axis.dt;
            (dt, w.apply(&synth[i][j].samples, dt), w.apply(&observed[i][j].samples, dt))
        }
    };
    for kind in MisfitKind::ALL {
        let op = ScalingOperator::new(kind, cfg.inversion.epsilon)?;
        match op.misfit(&s, &d, dt) {
            Ok(v) => println!("{kind}: {v:.12e}"),
            Err(e) => println!("{kind}: undefined ({e})"),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Generate(c) => c,
        Command::Invert { common, .. } | Command::Kernel { common, .. } | Command::CompareTraces { common, .. } => common,
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Invert {
            common,
            iterations,
            observed,
        } => run_invert(common, *iterations, observed.as_deref()),
        Command::Kernel {
            common,
            source,
            receiver,
            no_windows,
        } => run_kernel(common, *source, *receiver, *no_windows),
        Command::CompareTraces {
            common,
            synthetic,
            observed_trace,
            source,
            receiver,
        } => compare(common, synthetic.as_deref(), observed_trace.as_deref(), *source, *receiver),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
