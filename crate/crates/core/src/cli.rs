//! Command-line front end: config resolution, sweeps and CSV output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{dr_scenario, simulate, ControlLaw, Scenario, ScenarioKind, SimulateOptions, Trajectory};
use crate::kernel::assemble_static;
use crate::montecarlo::{mc_simulate, AgentEnsemble};
use crate::reduced::{alpha_estimates, frontier_alpha, linear_factor, reduced_step, ReducedParams};
use crate::spectral::{gap, perturbation_shape, stability, Family, GapReport, LinearModel, SpectralError, FAMILY_TOLERANCE};
use crate::state_space::{ModelParams, ParamError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },
    #[error("invalid grid {spec:?}: {message}")]
    Grid { spec: String, message: String },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tcl-relax", version, about = "Quantized TCL ensembles: master equation, spectra and sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key=value config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n_in: Option<usize>,
    #[arg(long, global = true)]
    pub n_out: Option<usize>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub r: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Amplitude of the `small` scenario.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub agents: Option<usize>,
    /// Comma list or start:stop:step.
    #[arg(long, global = true)]
    pub grid_alpha: Option<String>,
    #[arg(long, global = true)]
    pub grid_r: Option<String>,
    #[arg(long, global = true)]
    pub grid_n_out: Option<String>,
    /// Modes per alpha in sweep-spectrum.
    #[arg(long, global = true)]
    pub modes: Option<usize>,
    /// Refinement levels.
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    /// Family classification tolerance.
    #[arg(long, global = true)]
    pub family_tol: Option<f64>,
    /// Initial on-fraction for the reduced map.
    #[arg(long, global = true)]
    pub n0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Master-equation trajectory `t,N_up,H1,C`.
    Trajectory,
    /// Relaxation gap over (alpha, r, n_out).
    SweepGap,
    /// Slowest relaxation constants over alpha.
    SweepSpectrum,
    /// Full-spectrum stability with reduced-model frontiers over (alpha, r).
    StabilityMap,
    /// Steady-state comfort over r.
    Comfort,
    /// Gap under successive grid refinement.
    Refine,
    /// Agent simulation next to the master equation.
    Montecarlo,
    /// Nonzero entries of the kernel components.
    DumpKernel,
    /// Reduced-model frontier values over r.
    Frontier,
    /// Iterates the reduced scalar map.
    Reduced,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Trajectory => "trajectory",
            Self::SweepGap => "sweep-gap",
            Self::SweepSpectrum => "sweep-spectrum",
            Self::StabilityMap => "stability-map",
            Self::Comfort => "comfort",
            Self::Refine => "refine",
            Self::Montecarlo => "montecarlo",
            Self::DumpKernel => "dump-kernel",
            Self::Frontier => "frontier",
            Self::Reduced => "reduced",
        }
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub n_in: usize,
    pub n_out: usize,
    pub epsilon: f64,
    pub r: f64,
    pub alpha: f64,
    pub steps: usize,
    pub scenario: ScenarioKind,
    pub delta: f64,
    pub seed: u64,
    pub agents: usize,
    pub grid_alpha: Vec<f64>,
    pub grid_r: Vec<f64>,
    pub grid_n_out: Option<Vec<usize>>,
    pub modes: usize,
    pub levels: usize,
    pub family_tol: f64,
    pub n0: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            n_in: 12,
            n_out: 18,
            epsilon: 0.05,
            r: 0.05,
            alpha: 10.0,
            steps: 500,
            scenario: ScenarioKind::AllOff,
            delta: 1e-3,
            seed: 0,
            agents: 10_000,
            grid_alpha: parse_grid("0:50:0.5").expect("default grid"),
            grid_r: parse_grid("0.02:0.4:0.02").expect("default grid"),
            grid_n_out: None,
            modes: 4,
            levels: 3,
            family_tol: FAMILY_TOLERANCE,
            n0: 0.45,
        }
    }
}

impl Settings {
    pub fn params(&self) -> Result<ModelParams, ParamError> {
        ModelParams::new(self.n_in, self.n_out, self.epsilon, self.r, self.alpha)
    }

    fn n_out_values(&self) -> Vec<usize> {
        self.grid_n_out.clone().unwrap_or_else(|| vec![self.n_out])
    }

    fn echo(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("n_in".into(), self.n_in.to_string()),
            ("n_out".into(), self.n_out.to_string()),
            ("epsilon".into(), self.epsilon.to_string()),
            ("r".into(), self.r.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("scenario".into(), self.scenario.to_string()),
            ("delta".into(), self.delta.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("agents".into(), self.agents.to_string()),
            ("grid.alpha".into(), join(&self.grid_alpha)),
            ("grid.r".into(), join(&self.grid_r)),
            (
                "grid.n_out".into(),
                self.n_out_values().iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("modes".into(), self.modes.to_string()),
            ("levels".into(), self.levels.to_string()),
            ("family_tol".into(), self.family_tol.to_string()),
            ("n0".into(), self.n0.to_string()),
        ]
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.trim().parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        let grid_err = |e: CliError| e.to_string();
        match key {
            "n_in" => self.n_in = num(key, value)?,
            "n_out" => self.n_out = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "r" => self.r = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "scenario" => self.scenario = value.trim().parse().map_err(|e: crate::dynamics::DynamicsError| e.to_string())?,
            "delta" => self.delta = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "agents" => self.agents = num(key, value)?,
            "grid.alpha" => self.grid_alpha = parse_grid(value).map_err(grid_err)?,
            "grid.r" => self.grid_r = parse_grid(value).map_err(grid_err)?,
            "grid.n_out" => {
                let values = parse_grid(value).map_err(grid_err)?;
                let ints: Vec<usize> = values.iter().map(|v| v.round() as usize).collect();
                if values.iter().zip(&ints).any(|(v, i)| (*v - *i as f64).abs() > 1e-9 || *v < 0.0) {
                    return Err(format!("grid.n_out must hold integers, got {value:?}"));
                }
                self.grid_n_out = Some(ints);
            }
            "modes" => self.modes = num(key, value)?,
            "levels" => self.levels = num(key, value)?,
            "family_tol" => self.family_tol = num(key, value)?,
            "n0" => self.n0 = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }
}

fn round_grid(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Parses `a,b,c` or an inclusive `start:stop:step` range into a strictly
/// increasing, nonempty sequence.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let err = |message: &str| CliError::Grid { spec: spec.to_string(), message: message.to_string() };
    let spec_t = spec.trim();
    let values: Vec<f64> = if spec_t.contains(':') {
        let parts: Vec<f64> = spec_t
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| err("range bounds must be numbers"))?;
        let [start, stop, step] = parts[..] else {
            return Err(err("range needs start:stop:step"));
        };
        if !(step > 0.0) || !start.is_finite() || !stop.is_finite() {
            return Err(err("step must be positive and bounds finite"));
        }
        if stop < start {
            return Err(err("stop is below start"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| round_grid(start + i as f64 * step)).collect()
    } else {
        spec_t
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| err("entries must be numbers"))?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(err("grid is empty or non-finite"));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(err("grid must be strictly increasing"));
    }
    Ok(values)
}

fn read_config(path: &Path, settings: &mut Settings) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fail = |message: String| CliError::Config { path: path.display().to_string(), line: i + 1, message };
        let (key, value) = line.split_once('=').ok_or_else(|| fail("expected key=value".into()))?;
        settings.apply(key.trim(), value).map_err(fail)?;
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        read_config(path, &mut s)?;
    }
    let usage = |m: String| CliError::Usage(m);
    let mut flag = |key: &str, value: Option<String>| -> Result<(), CliError> {
        match value {
            Some(v) => s.apply(key, &v).map_err(usage),
            None => Ok(()),
        }
    };
    let str_of = |v: Option<f64>| v.map(|x| x.to_string());
    flag("n_in", cli.n_in.map(|v| v.to_string()))?;
    flag("n_out", cli.n_out.map(|v| v.to_string()))?;
    flag("epsilon", str_of(cli.epsilon))?;
    flag("r", str_of(cli.r))?;
    flag("alpha", str_of(cli.alpha))?;
    flag("steps", cli.steps.map(|v| v.to_string()))?;
    flag("scenario", cli.scenario.clone())?;
    flag("delta", str_of(cli.delta))?;
    flag("seed", cli.seed.map(|v| v.to_string()))?;
    flag("agents", cli.agents.map(|v| v.to_string()))?;
    flag("grid.alpha", cli.grid_alpha.clone())?;
    flag("grid.r", cli.grid_r.clone())?;
    flag("grid.n_out", cli.grid_n_out.clone())?;
    flag("modes", cli.modes.map(|v| v.to_string()))?;
    flag("levels", cli.levels.map(|v| v.to_string()))?;
    flag("family_tol", str_of(cli.family_tol))?;
    flag("n0", str_of(cli.n0))?;
    Ok(s)
}

/// Result of a command: rows written and grid points that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Summary {
    pub rows: usize,
    pub failures: usize,
}

struct Output {
    path: String,
    writer: csv::Writer<Box<dyn Write>>,
    rows: usize,
}

impl Output {
    fn open(out: Option<&Path>, command: Command, argv: &[String], settings: &Settings, extra: &[(&str, String)]) -> Result<Self, CliError> {
        let path = out.map(|p| p.display().to_string()).unwrap_or_else(|| "<stdout>".into());
        let io_err = |source| CliError::Io { path: path.clone(), source };
        let mut sink: Box<dyn Write> = match out {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        let mut header = format!("# tcl-relax {VERSION} {}\n# command: {}\n", command.name(), argv.join(" "));
        for (k, v) in settings.echo() {
            header.push_str(&format!("# {k}={v}\n"));
        }
        for (k, v) in extra {
            header.push_str(&format!("# {k}={v}\n"));
        }
        sink.write_all(header.as_bytes()).map_err(io_err)?;
        Ok(Self { path, writer: csv::Writer::from_writer(sink), rows: 0 })
    }

    fn header(&mut self, cols: &[&str]) -> Result<(), CliError> {
        self.writer.write_record(cols)?;
        Ok(())
    }

    fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields)?;
        self.rows += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<usize, CliError> {
        let path = self.path.clone();
        self.writer.flush().map_err(|source| CliError::Io { path, source })?;
        Ok(self.rows)
    }
}

fn f(x: f64) -> String {
    x.to_string()
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &argv) {
        Ok(summary) => {
            if summary.failures > 0 {
                eprintln!("{} rows written, {} grid points failed", summary.rows, summary.failures);
                2
            } else {
                info!("{} rows written", summary.rows);
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<Summary, CliError> {
    let settings = resolve(cli)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Trajectory => cmd_trajectory(&settings, out, argv),
        Command::SweepGap => cmd_sweep_gap(&settings, out, argv),
        Command::SweepSpectrum => cmd_sweep_spectrum(&settings, out, argv),
        Command::StabilityMap => cmd_stability_map(&settings, out, argv),
        Command::Comfort => cmd_comfort(&settings, out, argv),
        Command::Refine => cmd_refine(&settings, out, argv),
        Command::Montecarlo => cmd_montecarlo(&settings, out, argv),
        Command::DumpKernel => cmd_dump_kernel(&settings, out, argv),
        Command::Frontier => cmd_frontier(&settings, out, argv),
        Command::Reduced => cmd_reduced(&settings, out, argv),
    }
}

/// Builds the scenario initial condition around the model's steady state.
pub fn initial_condition(model: &LinearModel, settings: &Settings) -> Result<crate::state_space::Distribution, CliError> {
    let scenario = match settings.scenario {
        ScenarioKind::AllOff => Scenario::AllOff,
        ScenarioKind::AllOn => Scenario::AllOn,
        ScenarioKind::Small => {
            let spec = model.spectrum(settings.alpha, settings.family_tol).map_err(numerical)?;
            let shape = perturbation_shape(&spec).ok_or_else(|| CliError::Numerical("no significant mode for the small scenario".into()))?;
            Scenario::Small { delta: settings.delta, shape }
        }
    };
    dr_scenario(&model.space, &scenario, &model.steady).map_err(numerical)
}

fn master_trajectory(settings: &Settings) -> Result<(LinearModel, Trajectory), CliError> {
    let params = settings.params()?;
    let model = LinearModel::new(params).map_err(numerical)?;
    let rho0 = initial_condition(&model, settings)?;
    let law = ControlLaw::from(&params);
    let traj = simulate(&rho0, settings.steps, &model.space, &model.components, &law, &model.steady, SimulateOptions { stride: 0 })
        .map_err(numerical)?;
    Ok((model, traj))
}

pub fn cmd_trajectory(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let (_, traj) = master_trajectory(settings)?;
    let mut o = Output::open(out, Command::Trajectory, argv, settings, &[])?;
    o.header(&["t", "N_up", "H1", "C"])?;
    if settings.steps > 0 {
        for t in 0..traj.len() {
            o.row(&[t.to_string(), f(traj.n_up[t]), f(traj.h1[t]), f(traj.comfort[t])])?;
        }
    }
    Ok(Summary { rows: o.finish()?, failures: 0 })
}

/// Evaluates `eval` at every admissible `(alpha, r, n_out)` point, building
/// one alpha-independent model per `(r, n_out)` and running in parallel.
/// Returns `(alpha, r, n_out, result)` in canonical order.
fn sweep<T: Send>(
    settings: &Settings,
    alphas: &[f64],
    rs: &[f64],
    n_outs: &[usize],
    eval: impl Fn(&LinearModel, f64) -> Result<T, SpectralError> + Sync,
) -> Vec<(f64, f64, usize, Result<T, String>)> {
    let groups: Vec<(f64, usize)> = rs.iter().flat_map(|&r| n_outs.iter().map(move |&n| (r, n))).collect();
    let mut rows: Vec<(f64, f64, usize, Result<T, String>)> = groups
        .par_iter()
        .flat_map_iter(|&(r, n_out)| {
            let admissible: Vec<f64> = alphas
                .iter()
                .copied()
                .filter(|&a| match ModelParams::new(settings.n_in, n_out, settings.epsilon, r, a) {
                    Ok(_) => true,
                    Err(e) => {
                        warn!("skipping alpha={a} r={r} n_out={n_out}: {e}");
                        false
                    }
                })
                .collect();
            let model = ModelParams::new(settings.n_in, n_out, settings.epsilon, r, 0.0)
                .map_err(SpectralError::from)
                .and_then(LinearModel::new);
            let results: Vec<_> = admissible
                .par_iter()
                .map(|&a| {
                    let res = match &model {
                        Ok(m) => eval(m, a).map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    };
                    if let Err(e) = &res {
                        warn!("alpha={a} r={r} n_out={n_out} failed: {e}");
                    }
                    (a, r, n_out, res)
                })
                .collect();
            results.into_iter()
        })
        .collect();
    rows.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)));
    rows
}

/// Gap at every grid point, in canonical order.
pub fn gap_sweep(settings: &Settings) -> Vec<(f64, f64, usize, Result<GapReport, String>)> {
    let tol = settings.family_tol;
    sweep(settings, &settings.grid_alpha, &settings.grid_r, &settings.n_out_values(), |m, a| gap(&m.spectrum(a, tol)?))
}

pub fn cmd_sweep_gap(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let rows = gap_sweep(settings);
    let mut o = Output::open(out, Command::SweepGap, argv, settings, &[])?;
    o.header(&["alpha", "r", "n_out", "gap", "regime"])?;
    let mut failures = 0;
    for (a, r, n, res) in rows {
        let (g, regime) = match res {
            Ok(rep) => (rep.gap, rep.regime.to_string()),
            Err(_) => {
                failures += 1;
                (f64::NAN, "error".into())
            }
        };
        o.row(&[f(a), f(r), n.to_string(), f(g), regime])?;
    }
    Ok(Summary { rows: o.finish()?, failures })
}

/// One relaxation constant row of `sweep-spectrum`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRow {
    pub index: usize,
    pub lambda: crate::spectral::C64,
    pub family: Family,
}

/// The `k` slowest non-stationary modes, ordered by `Re lambda`.
pub fn slowest_modes(model: &LinearModel, alpha: f64, k: usize, tol: f64) -> Result<Vec<ModeRow>, SpectralError> {
    let spec = model.spectrum(alpha, tol)?;
    let mut modes: Vec<usize> = (0..spec.len()).filter(|&i| spec.family[i] != Family::Stationary).collect();
    modes.sort_by(|&a, &b| {
        let (la, lb) = (spec.relaxation[a], spec.relaxation[b]);
        la.re.total_cmp(&lb.re).then(la.im.abs().total_cmp(&lb.im.abs())).then(lb.im.total_cmp(&la.im))
    });
    Ok(modes
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, i)| ModeRow { index: rank + 1, lambda: spec.relaxation[i], family: spec.family[i] })
        .collect())
}

pub fn cmd_sweep_spectrum(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let (k, tol) = (settings.modes, settings.family_tol);
    let rows = sweep(settings, &settings.grid_alpha, &[settings.r], &[settings.n_out], |m, a| slowest_modes(m, a, k, tol));
    let mut o = Output::open(out, Command::SweepSpectrum, argv, settings, &[])?;
    o.header(&["alpha", "index", "re_lambda", "im_lambda", "family"])?;
    let mut failures = 0;
    for (a, _, _, res) in rows {
        match res {
            Ok(modes) => {
                for m in modes {
                    o.row(&[f(a), m.index.to_string(), f(m.lambda.re), f(m.lambda.im), m.family.to_string()])?;
                }
            }
            Err(_) => {
                failures += 1;
                o.row(&[f(a), "NaN".into(), f(f64::NAN), f(f64::NAN), "error".into()])?;
            }
        }
    }
    Ok(Summary { rows: o.finish()?, failures })
}

pub fn cmd_stability_map(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let tol = settings.family_tol;
    let rows = sweep(settings, &settings.grid_alpha, &settings.grid_r, &[settings.n_out], |m, a| Ok(stability(&m.spectrum(a, tol)?)));
    let n = settings.n_in + settings.n_out;
    let mut o = Output::open(out, Command::StabilityMap, argv, settings, &[])?;
    o.header(&["alpha", "r", "regime", "mu", "frontier_alpha1", "frontier_alpha2"])?;
    let mut failures = 0;
    for (a, r, n_out, res) in rows {
        let regime = match res {
            Ok(rep) => rep.verdict.to_string(),
            Err(_) => {
                failures += 1;
                "error".into()
            }
        };
        let mu = linear_factor(&ReducedParams { n, n_out, r, alpha: a, epsilon: settings.epsilon }).mu;
        let (a1, _) = alpha_estimates(n, n_out, r);
        o.row(&[f(a), f(r), regime, f(mu), f(a1), f(frontier_alpha(n, n_out, r))])?;
    }
    Ok(Summary { rows: o.finish()?, failures })
}

pub fn cmd_comfort(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let rows = sweep(settings, &[0.0], &settings.grid_r, &[settings.n_out], |m, _| {
        Ok(crate::dynamics::comfort(&m.steady, &m.space))
    });
    let mut o = Output::open(out, Command::Comfort, argv, settings, &[])?;
    o.header(&["r", "C_steady"])?;
    let mut failures = 0;
    for (_, r, _, res) in rows {
        let c = res.unwrap_or_else(|_| {
            failures += 1;
            f64::NAN
        });
        o.row(&[f(r), f(c)])?;
    }
    Ok(Summary { rows: o.finish()?, failures })
}

/// One refinement level; relaxation quantities are multiplied by `2^level`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineLevel {
    pub level: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub r: f64,
    pub result: Result<GapReport, String>,
}

/// Doubles `n_in` and `n_out` and halves `r` per level, keeping `epsilon`.
pub fn refinement(base: ModelParams, levels: usize, tol: f64) -> Result<Vec<RefineLevel>, CliError> {
    if levels < 2 {
        return Err(CliError::Usage(format!("refine needs at least 2 levels, got {levels}")));
    }
    let specs: Vec<ModelParams> = (0..levels)
        .map(|k| {
            let s = 1usize << k;
            ModelParams::new(base.n_in * s, base.n_out * s, base.epsilon, base.r / s as f64, base.alpha)
        })
        .collect::<Result<_, _>>()?;
    Ok(specs
        .into_par_iter()
        .enumerate()
        .map(|(level, p)| {
            let scale = (1usize << level) as f64;
            let result = LinearModel::new(p)
                .and_then(|m| gap(&m.spectrum(p.alpha, tol)?))
                .map(|mut g| {
                    g.gap *= scale;
                    g.min_re_sf *= scale;
                    g.min_re_wf *= scale;
                    g
                })
                .map_err(|e| e.to_string());
            RefineLevel { level, n_in: p.n_in, n_out: p.n_out, r: p.r, result }
        })
        .collect())
}

pub fn cmd_refine(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let levels = refinement(settings.params()?, settings.levels, settings.family_tol)?;
    let mut o = Output::open(out, Command::Refine, argv, settings, &[])?;
    o.header(&["level", "n_in", "n_out", "r", "gap", "min_re_SF", "min_re_WF"])?;
    let mut failures = 0;
    for l in levels {
        let (g, sf, wf) = match &l.result {
            Ok(rep) => (rep.gap, rep.min_re_sf, rep.min_re_wf),
            Err(e) => {
                warn!("level {} failed: {e}", l.level);
                failures += 1;
                (f64::NAN, f64::NAN, f64::NAN)
            }
        };
        o.row(&[l.level.to_string(), l.n_in.to_string(), l.n_out.to_string(), f(l.r), f(g), f(sf), f(wf)])?;
    }
    Ok(Summary { rows: o.finish()?, failures })
}

pub fn cmd_montecarlo(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    if settings.agents == 0 {
        return Err(CliError::Usage("agents must be positive".into()));
    }
    let (model, me) = master_trajectory(settings)?;
    let rho0 = initial_condition(&model, settings)?;
    let law = ControlLaw::from(model.params());
    let ensemble = AgentEnsemble::sample(&rho0, settings.agents, settings.seed).map_err(numerical)?;
    let (_, mc) = mc_simulate(&ensemble, settings.steps, &model.space, &model.components, &law, &model.steady).map_err(numerical)?;
    let mut o = Output::open(out, Command::Montecarlo, argv, settings, &[("mc_seed", settings.seed.to_string())])?;
    o.header(&["t", "N_up", "H1", "C", "N_up_me", "H1_me", "C_me"])?;
    if settings.steps > 0 {
        for t in 0..mc.len() {
            o.row(&[
                t.to_string(),
                f(mc.n_up[t]),
                f(mc.h1[t]),
                f(mc.comfort[t]),
                f(me.n_up[t]),
                f(me.h1[t]),
                f(me.comfort[t]),
            ])?;
        }
    }
    Ok(Summary { rows: o.finish()?, failures: 0 })
}

pub fn cmd_dump_kernel(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let params = settings.params()?;
    let model = crate::state_space::make_space(params)?;
    let comps = crate::kernel::build_components(&model);
    let p = assemble_static(&comps, params.r).map_err(numerical)?;
    let mut matrices = BTreeMap::new();
    matrices.insert("p0", &comps.p0);
    matrices.insert("p_down", &comps.p_down);
    matrices.insert("p_up", &comps.p_up);
    matrices.insert("p_static", p.as_matrix());
    let mut o = Output::open(out, Command::DumpKernel, argv, settings, &[])?;
    o.header(&["matrix", "row", "col", "value"])?;
    for (name, m) in matrices {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    o.row(&[name.to_string(), i.to_string(), j.to_string(), f(m[(i, j)])])?;
                }
            }
        }
    }
    Ok(Summary { rows: o.finish()?, failures: 0 })
}

pub fn cmd_frontier(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let n = settings.n_in + settings.n_out;
    let mut o = Output::open(out, Command::Frontier, argv, settings, &[])?;
    o.header(&["r", "frontier_alpha1", "frontier_alpha2"])?;
    for &r in &settings.grid_r {
        let (a1, _) = alpha_estimates(n, settings.n_out, r);
        o.row(&[f(r), f(a1), f(frontier_alpha(n, settings.n_out, r))])?;
    }
    Ok(Summary { rows: o.finish()?, failures: 0 })
}

pub fn cmd_reduced(settings: &Settings, out: Option<&Path>, argv: &[String]) -> Result<Summary, CliError> {
    let params = settings.params()?;
    let p = ReducedParams::from(&params);
    if !(0.0..=1.0).contains(&settings.n0) {
        return Err(CliError::Usage(format!("n0 must lie in [0, 1], got {}", settings.n0)));
    }
    let mut o = Output::open(out, Command::Reduced, argv, settings, &[("mu", f(linear_factor(&p).mu))])?;
    o.header(&["t", "N_up", "clamped"])?;
    if settings.steps > 0 {
        let mut x = settings.n0;
        o.row(&["0".into(), f(x), "false".into()])?;
        for t in 1..=settings.steps {
            let s = reduced_step(x, &p);
            x = s.value;
            o.row(&[t.to_string(), f(x), s.clamped.to_string()])?;
        }
    }
    Ok(Summary { rows: o.finish()?, failures: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let r = parse_grid("0.02:0.4:0.02").unwrap();
        assert_eq!(r.len(), 20);
        assert_eq!(r[14], 0.3);
        assert_eq!(parse_grid("0:50:0.5").unwrap().len(), 101);
        assert_eq!(parse_grid(" 1, 2.5 ,4").unwrap(), vec![1.0, 2.5, 4.0]);
        assert_eq!(parse_grid("3").unwrap(), vec![3.0]);
        for bad in ["", "1,1", "2,1", "0:1", "0:1:0", "1:0:0.1", "a,b"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# comment\nn_in = 4\nr=0.2 # inline\ngrid.n_out=8,12\nscenario=all_on\n").unwrap();
        let cli = Cli::try_parse_from(["tcl-relax", "trajectory", "--config", cfg.to_str().unwrap(), "--r", "0.1"]).unwrap();
        let s = resolve(&cli).unwrap();
        assert_eq!(s.n_in, 4);
        assert_eq!(s.r, 0.1);
        assert_eq!(s.grid_n_out, Some(vec![8, 12]));
        assert_eq!(s.scenario, ScenarioKind::AllOn);
        assert_eq!(s.n_out, 18);
    }

    #[test]
    fn config_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "n_in=4\nbogus=1\n").unwrap();
        let cli = Cli::try_parse_from(["tcl-relax", "comfort", "--config", cfg.to_str().unwrap()]).unwrap();
        match resolve(&cli) {
            Err(CliError::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from(["tcl-relax", "trajectory", "--scenario", "sideways"]).unwrap();
        assert_eq!(resolve(&cli).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn refinement_level_zero_is_base_run() {
        let base = ModelParams::new(4, 8, 0.05, 0.1, 6.0).unwrap();
        let levels = refinement(base, 2, FAMILY_TOLERANCE).unwrap();
        let direct = gap(&LinearModel::new(base).unwrap().spectrum(6.0, FAMILY_TOLERANCE).unwrap()).unwrap();
        assert_eq!(levels[0].result.as_ref().unwrap(), &direct);
        assert_eq!((levels[1].n_in, levels[1].n_out, levels[1].r), (8, 16, 0.05));
        assert!(refinement(base, 1, FAMILY_TOLERANCE).is_err());
    }

    #[test]
    fn slowest_modes_are_ordered() {
        let m = LinearModel::new(ModelParams::new(12, 18, 0.05, 0.1, 0.0).unwrap()).unwrap();
        let rows = slowest_modes(&m, 10.0, 4, FAMILY_TOLERANCE).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.windows(2).all(|w| w[0].lambda.re <= w[1].lambda.re));
        assert_eq!(slowest_modes(&m, 10.0, 1, FAMILY_TOLERANCE).unwrap().len(), 1);
    }
}
