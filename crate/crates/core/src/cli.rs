//! The `gmfc` command line: TOML configs in, CSV/SVG artifacts out.
//!
//! Exit codes: 0 success (or verdict pass), 1 verdict fail, 2 configuration
//! error, 3 runtime failure, 4 exact cut norm requested above the cap,
//! 5 inconclusive verdict.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::controls::{InteractionControl, Phi, RegularControl, RelaxedInteractionControl};
use crate::dynamics::{
    simulate, write_cost_summary, write_costs, write_trajectories, Controls, Diffusion, InitSpec, ModelSpec, SimConfig,
};
use crate::error::Error;
use crate::experiments::{
    convergence_sweep, kernel_convergence_check, optimize_control, run_example1, run_example2, CemSpec, Example1Spec,
    Example2Spec, ExperimentReport, ParamFamily, SweepSpec,
};
use crate::kernels::{
    cut_norm, cut_norm_exact_with_cap, cut_norm_lower_bound, sample_from_graphon, AnalyticGraphon, CutMethod,
    CutOptions, MarkSpace, StepKernel, WeightedStepKernel, EXACT_ENUMERATION_CAP,
};
use crate::metrics::FlowMode;

#[derive(Debug, Parser)]
#[command(
    name = "gmfc",
    version,
    about = "Mean-field control with controllable interactions: simulation, cut norms and experiments"
)]
pub struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed override (otherwise the config `seed`, then 0)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism)
    #[arg(long, global = true, env = "GMFC_THREADS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the particle system and write trajectories and costs
    Simulate,
    /// Cut norm of a step kernel given as a matrix file or a sampled graphon
    Cutnorm(CutArgs),
    /// Run an experiment: example1, example2, converge, kernelconv, optimize
    Experiment {
        /// Experiment id
        id: String,
    },
}

#[derive(Debug, Args)]
pub struct CutArgs {
    /// Matrix file: a step-kernel CSV or a plain numeric CSV
    #[arg(long, conflicts_with = "graphon")]
    pub matrix: Option<PathBuf>,
    /// Graphon id (constant:c, product, threshold, sbm2:p:q, exp_decay:r)
    #[arg(long, requires = "n")]
    pub graphon: Option<String>,
    /// Grid size for --graphon
    #[arg(long)]
    pub n: Option<usize>,
    /// Exact enumeration only (exit 4 above the cap)
    #[arg(long, conflicts_with = "heuristic")]
    pub exact: bool,
    /// Alternating-maximization lower bound only
    #[arg(long)]
    pub heuristic: bool,
    /// Restarts of the lower-bound heuristic
    #[arg(long, default_value_t = 32)]
    pub restarts: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    AboveCap(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::AboveCap(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::AboveCap(m) => m,
        }
    }
}

fn config_err(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("config field `{field}`: {e}"))
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn missing(field: &str) -> CliError {
    CliError::Config(format!("missing config field `{field}`"))
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub model: Option<ModelCfg>,
    pub kernel: Option<KernelCfg>,
    pub controls: Option<ControlsCfg>,
    pub sim: Option<SimCfg>,
    pub init: Option<InitCfg>,
    pub example1: Option<Example1Cfg>,
    pub example2: Option<Example2Cfg>,
    pub sweep: Option<SweepCfg>,
    pub kernelconv: Option<KernelConvCfg>,
    pub optimize: Option<OptimizeCfg>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    /// example1 | example2 | brownian | linear | frozen
    pub id: String,
    pub d: Option<usize>,
    pub phi: Option<String>,
    pub sigma: Option<f64>,
    pub linear: Option<f64>,
    pub quadratic: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelCfg {
    /// graphon | matrix
    pub source: String,
    pub graphon_id: Option<String>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyCfg {
    pub family: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsCfg {
    pub gamma: Option<FamilyCfg>,
    pub alpha: Option<FamilyCfg>,
    pub relaxed: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCfg {
    pub n: Option<usize>,
    #[serde(rename = "T")]
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub reps: Option<usize>,
    pub store_stride: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitCfg {
    pub family: String,
    #[serde(default)]
    pub params: Vec<f64>,
    pub noise: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example1Cfg {
    pub random_pair_seed: Option<u64>,
    pub k_stderr: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example2Cfg {
    pub quad_points: Option<usize>,
    pub k_stderr: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfg {
    pub ns: Vec<usize>,
    pub ref_n: usize,
    pub mode: Option<String>,
    pub slack: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConvCfg {
    pub graphon_id: String,
    pub ns: Vec<usize>,
    /// identity | square | abs
    pub f: Option<String>,
    pub f_lipschitz: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeCfg {
    /// constant | phi_threshold | product_form
    pub family: String,
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
    pub population: Option<usize>,
    pub elite_frac: Option<f64>,
    pub budget: usize,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Everything a command needs, with defaults filled in.
struct Resolved {
    config: Config,
    model: ModelSpec,
    sim: SimConfig,
    init: InitSpec,
}

fn resolve_phi(model: &ModelCfg) -> Result<Phi, CliError> {
    Phi::from_id(model.phi.as_deref().unwrap_or("tanh")).map_err(|e| config_err("model.phi", e))
}

fn resolve_model(cfg: &mut Config) -> Result<ModelSpec, CliError> {
    let m = cfg.model.get_or_insert_with(|| ModelCfg {
        id: "example1".into(),
        ..ModelCfg::default()
    });
    let d = *m.d.get_or_insert(1);
    if d == 0 {
        return Err(config_err("model.d", "must be >= 1"));
    }
    let spec = match m.id.as_str() {
        "example1" => {
            let phi = resolve_phi(m)?;
            m.phi.get_or_insert_with(|| "tanh".into());
            if d != 1 {
                return Err(config_err("model.d", "example1 is one-dimensional"));
            }
            let mut spec = ModelSpec::example1(phi);
            if let Some(s) = m.sigma {
                spec.diffusion = Diffusion::Scalar(s);
                spec.theta = Some(s * s);
            }
            spec
        }
        "example2" => {
            let linear = *m.linear.get_or_insert(0.0);
            let quadratic = *m.quadratic.get_or_insert(1.0);
            let sigma = *m.sigma.get_or_insert(1.0);
            if d != 1 {
                return Err(config_err("model.d", "example2 is one-dimensional"));
            }
            ModelSpec::example2(linear, quadratic, sigma)
        }
        "brownian" => {
            let mut spec = ModelSpec::brownian(d);
            let s = *m.sigma.get_or_insert(1.0);
            spec.diffusion = Diffusion::Scalar(s);
            spec.theta = Some(s * s);
            spec
        }
        "linear" => {
            if d != 1 {
                return Err(config_err("model.d", "the linear model is one-dimensional"));
            }
            ModelSpec::linear(*m.sigma.get_or_insert(1.0))
        }
        "frozen" => ModelSpec::frozen(d),
        other => return Err(config_err("model.id", format!("unknown model `{other}`"))),
    };
    spec.validate().map_err(|e| config_err("model", e))?;
    Ok(spec)
}

fn resolve_sim(
    cfg: &mut Config,
    seed: Option<u64>,
    workers: Option<usize>,
    default_n: Option<usize>,
) -> Result<SimConfig, CliError> {
    let s = cfg.sim.get_or_insert_with(SimCfg::default);
    let n = match (s.n, default_n) {
        (Some(n), _) => n,
        (None, Some(n)) => n,
        (None, None) => return Err(missing("sim.n")),
    };
    s.n = Some(n);
    let t = *s.t_final.get_or_insert(1.0);
    let dt = *s.dt.get_or_insert(0.01);
    let reps = *s.reps.get_or_insert(16);
    let stride = *s.store_stride.get_or_insert(10);
    let seed = seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    let workers = workers.or(cfg.workers);
    let sim = SimConfig {
        n,
        t_final: t,
        dt,
        reps,
        seed,
        store_stride: stride,
        workers,
    };
    sim.validate().map_err(|e| {
        let field = match &e {
            Error::BadSpec(m) if m.starts_with("n ") => "sim.n",
            Error::BadSpec(m) if m.starts_with("reps") => "sim.reps",
            Error::BadSpec(m) if m.starts_with("store_stride") => "sim.store_stride",
            Error::BadSpec(m) if m.starts_with("workers") => "workers",
            _ => "sim.dt",
        };
        config_err(field, e)
    })?;
    Ok(sim)
}

fn resolve_init(cfg: &mut Config, d: usize) -> Result<InitSpec, CliError> {
    let i = cfg.init.get_or_insert_with(|| InitCfg {
        family: "dirac".into(),
        params: vec![0.0; d],
        noise: None,
    });
    let noise = *i.noise.get_or_insert(0.0);
    InitSpec::from_params(&i.family, &i.params, noise).map_err(|e| config_err("init", e))
}

fn resolve(cli: &Cli, default_n: Option<usize>) -> Result<Resolved, CliError> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let model = resolve_model(&mut config)?;
    let sim = resolve_sim(&mut config, cli.seed, cli.workers, default_n)?;
    let init = resolve_init(&mut config, model.d)?;
    Ok(Resolved {
        config,
        model,
        sim,
        init,
    })
}

fn resolve_kernel(cfg: &mut Config, n: usize) -> Result<StepKernel, CliError> {
    let k = cfg.kernel.get_or_insert_with(|| KernelCfg {
        source: "graphon".into(),
        graphon_id: None,
        path: None,
    });
    let kernel = match k.source.as_str() {
        "graphon" => {
            let id = k.graphon_id.get_or_insert_with(|| "constant:1".into()).clone();
            let g = AnalyticGraphon::from_id(&id).map_err(|e| config_err("kernel.graphon_id", e))?;
            sample_from_graphon(&g, n).map_err(runtime)?
        }
        "matrix" => {
            let path = k.path.as_ref().ok_or_else(|| missing("kernel.path"))?;
            StepKernel::load(path).map_err(|e| config_err("kernel.path", e))?
        }
        other => return Err(config_err("kernel.source", format!("unknown source `{other}`"))),
    };
    if kernel.n() != n {
        return Err(config_err(
            "kernel",
            format!("kernel has n = {} but sim.n = {n}", kernel.n()),
        ));
    }
    Ok(kernel)
}

fn resolve_graphon(cfg: &mut Config) -> Result<AnalyticGraphon, CliError> {
    let k = cfg.kernel.get_or_insert_with(|| KernelCfg {
        source: "graphon".into(),
        graphon_id: None,
        path: None,
    });
    if k.source != "graphon" {
        return Err(config_err(
            "kernel.source",
            "this command samples kernels from a graphon",
        ));
    }
    let id = k.graphon_id.get_or_insert_with(|| "constant:1".into()).clone();
    AnalyticGraphon::from_id(&id).map_err(|e| config_err("kernel.graphon_id", e))
}

fn default_gamma(model: &ModelSpec, cfg: &Config) -> FamilyCfg {
    let phi_model = cfg.model.as_ref().is_some_and(|m| m.id == "example1");
    if phi_model {
        FamilyCfg {
            family: "bang_bang_phi".into(),
            params: vec![],
        }
    } else {
        FamilyCfg {
            family: "constant".into(),
            params: vec![model.int_box.lo()],
        }
    }
}

fn resolve_controls(cfg: &mut Config, model: &ModelSpec) -> Result<Controls, CliError> {
    let phi = cfg
        .model
        .as_ref()
        .and_then(|m| m.phi.as_deref())
        .map(Phi::from_id)
        .transpose();
    let phi = phi.map_err(|e| config_err("model.phi", e))?;
    let default = default_gamma(model, cfg);
    let c = cfg.controls.get_or_insert_with(ControlsCfg::default);
    let relaxed = *c.relaxed.get_or_insert(false);
    let g = c.gamma.get_or_insert(default).clone();
    let d_reg = model.reg_box.dim();
    let a = c
        .alpha
        .get_or_insert_with(|| FamilyCfg {
            family: "constant".into(),
            params: vec![0.0; d_reg],
        })
        .clone();
    let alpha = RegularControl::from_params(&a.family, &a.params, model.reg_box.clone())
        .map_err(|e| config_err("controls.alpha", e))?;
    if relaxed {
        let gbar = RelaxedInteractionControl::from_params(&g.family, &g.params, model.int_box.clone())
            .map_err(|e| config_err("controls.gamma", e))?;
        Ok(Controls::Relaxed { gbar, alpha })
    } else {
        let gamma = InteractionControl::from_params(&g.family, &g.params, model.int_box.clone(), phi)
            .map_err(|e| config_err("controls.gamma", e))?;
        Ok(Controls::Closed { gamma, alpha })
    }
}

fn write_resolved(cfg: &Config, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(dir.join("config_resolved.toml"), text).map_err(|e| CliError::Runtime(e.to_string()))
}

fn create(path: PathBuf) -> Result<fs::File, CliError> {
    fs::File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_simulate(cli: &Cli, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let mut r = resolve(cli, None)?;
    let kernel = resolve_kernel(&mut r.config, r.sim.n)?;
    let controls = resolve_controls(&mut r.config, &r.model)?;
    let out = simulate(&r.model, &controls, &kernel, &r.init, &r.sim).map_err(|e| match e {
        Error::BadSpec(m) => CliError::Config(format!("config field `controls`: {m}")),
        e => runtime(e),
    })?;
    let dir = &cli.out;
    write_resolved(&r.config, dir)?;
    write_trajectories(&out, create(dir.join("trajectories.csv"))?).map_err(runtime)?;
    write_costs(&out, create(dir.join("costs.csv"))?).map_err(runtime)?;
    write_cost_summary(&out, create(dir.join("cost_summary.csv"))?).map_err(runtime)?;
    let s = crate::dynamics::evaluate_cost(&out.trajectories);
    let _ = writeln!(stdout, "J_mean={} J_stderr={} reps={}", s.mean, s.stderr, s.count);
    Ok(0)
}

/// Reads a step-kernel CSV, or a plain CSV of numbers as a scalar kernel.
fn load_matrix(path: &Path) -> Result<StepKernel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('#') {
        return StepKernel::read_csv(text.as_bytes()).map_err(|e| CliError::Config(e.to_string()));
    }
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::Config(format!("matrix entry `{c}`: {e}")))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let (lo, hi) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if rows.is_empty() || !lo.is_finite() || !hi.is_finite() {
        return Err(CliError::Config("matrix is empty or non-finite".into()));
    }
    let space = MarkSpace::interval(lo, hi).map_err(|e| CliError::Config(e.to_string()))?;
    StepKernel::from_scalar_matrix(&rows, space).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_cutnorm(cli: &Cli, args: &CutArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let kernel = match (&args.matrix, &args.graphon) {
        (Some(p), _) => load_matrix(p)?,
        (None, Some(id)) => {
            let g = AnalyticGraphon::from_id(id).map_err(|e| CliError::Config(e.to_string()))?;
            let n = args.n.ok_or_else(|| CliError::Config("--graphon needs --n".into()))?;
            sample_from_graphon(&g, n).map_err(|e| CliError::Config(e.to_string()))?
        }
        (None, None) => return Err(CliError::Config("give --matrix PATH or --graphon ID --n N".into())),
    };
    if args.restarts == 0 {
        return Err(CliError::Config("--restarts must be >= 1".into()));
    }
    let m: WeightedStepKernel = kernel.compose(&|x: &[f64]| x[0]);
    let seed = cli.seed.unwrap_or(0);
    let (value, method) = if args.exact {
        match cut_norm_exact_with_cap(&m, EXACT_ENUMERATION_CAP) {
            Ok(v) => (v, CutMethod::Exact),
            Err(e @ Error::SizeCapExceeded { .. }) => return Err(CliError::AboveCap(e.to_string())),
            Err(e) => return Err(runtime(e)),
        }
    } else if args.heuristic {
        (cut_norm_lower_bound(&m, args.restarts, seed), CutMethod::LowerBound)
    } else {
        let c = cut_norm(
            &m,
            CutOptions {
                restarts: args.restarts,
                seed,
                ..CutOptions::default()
            },
        );
        (c.value, c.method)
    };
    let _ = writeln!(stdout, "cutnorm={value} method={method}");
    Ok(0)
}

type TestMap = fn(&[f64]) -> f64;

fn id_map(f: &str) -> Result<(TestMap, f64), CliError> {
    match f {
        "identity" => Ok((|x| x[0], 1.0)),
        "abs" => Ok((|x| x[0].abs(), 1.0)),
        // Lipschitz on the unit interval
        "square" => Ok((|x| x[0] * x[0], 2.0)),
        other => Err(config_err("kernelconv.f", format!("unknown test map `{other}`"))),
    }
}

fn cmd_experiment(cli: &Cli, id: &str, stdout: &mut dyn Write) -> Result<i32, CliError> {
    const IDS: [&str; 5] = ["example1", "example2", "converge", "kernelconv", "optimize"];
    if !IDS.contains(&id) {
        return Err(CliError::Config(format!(
            "unknown experiment id `{id}` (known: {})",
            IDS.join(", ")
        )));
    }
    let default_n = match id {
        "example1" => 200,
        _ => 100,
    };
    let mut r = resolve(cli, Some(default_n))?;
    let report: ExperimentReport = match id {
        "example1" => {
            if r.model.name != "example1" {
                return Err(config_err("model.id", "example1 needs the example1 model"));
            }
            let m = r.config.model.as_ref().expect("resolved");
            let phi = resolve_phi(m)?;
            let graphon = resolve_graphon(&mut r.config)?;
            let e = r.config.example1.get_or_insert_with(Example1Cfg::default);
            let spec = Example1Spec {
                graphon,
                random_pair_seed: *e.random_pair_seed.get_or_insert(1),
                k_stderr: *e.k_stderr.get_or_insert(3.0),
                ..Example1Spec::new(phi, r.init.clone())
            };
            run_example1(&spec, &r.sim).map_err(runtime)?
        }
        "example2" => {
            if r.model.name != "example2" {
                return Err(config_err("model.id", "example2 needs the example2 model"));
            }
            let graphon = resolve_graphon(&mut r.config)?;
            let c = r.config.controls.get_or_insert_with(ControlsCfg::default);
            let g = c
                .gamma
                .get_or_insert_with(|| FamilyCfg {
                    family: "echo_v".into(),
                    params: vec![],
                })
                .clone();
            let gbar = RelaxedInteractionControl::from_params(&g.family, &g.params, r.model.int_box.clone())
                .map_err(|e| config_err("controls.gamma", e))?;
            let e = r.config.example2.get_or_insert_with(Example2Cfg::default);
            let spec = Example2Spec {
                init: r.init.clone(),
                graphon,
                quad_points: *e.quad_points.get_or_insert(16),
                k_stderr: *e.k_stderr.get_or_insert(3.0),
                ..Example2Spec::new(r.model.clone(), gbar)
            };
            match run_example2(&spec, &r.sim) {
                Err(Error::ConcavityNotDeclared) => {
                    return Err(config_err("model.quadratic", Error::ConcavityNotDeclared))
                }
                other => other.map_err(runtime)?,
            }
        }
        "converge" => {
            let graphon = resolve_graphon(&mut r.config)?;
            let controls = resolve_controls(&mut r.config, &r.model)?;
            let Controls::Closed { gamma, alpha } = controls else {
                return Err(config_err("controls.relaxed", "the sweep needs a closed-loop control"));
            };
            let s = r.config.sweep.clone().ok_or_else(|| missing("sweep"))?;
            let mode = s.mode.as_deref().unwrap_or("label_stratified");
            let mode: FlowMode = mode.parse().map_err(|e| config_err("sweep.mode", e))?;
            let spec = SweepSpec {
                model: r.model.clone(),
                gamma,
                alpha,
                graphon,
                init: r.init.clone(),
                ns: s.ns.clone(),
                ref_n: s.ref_n,
                mode,
                slack: s.slack.unwrap_or(2.0),
            };
            if let Some(sw) = r.config.sweep.as_mut() {
                sw.mode = Some(mode.to_string());
                sw.slack = Some(spec.slack);
            }
            convergence_sweep(&spec, &r.sim).map_err(|e| match e {
                Error::BadSpec(m) => config_err("sweep", m),
                e => runtime(e),
            })?
        }
        "kernelconv" => {
            let k = r.config.kernelconv.as_mut().ok_or_else(|| missing("kernelconv"))?;
            let g = AnalyticGraphon::from_id(&k.graphon_id).map_err(|e| config_err("kernelconv.graphon_id", e))?;
            let (f, lip) = id_map(k.f.get_or_insert_with(|| "identity".into()))?;
            let lip = *k.f_lipschitz.get_or_insert(lip);
            let ns = k.ns.clone();
            kernel_convergence_check(&g, &ns, &f, Some(lip)).map_err(|e| config_err("kernelconv.ns", e))?
        }
        "optimize" => {
            let kernel = resolve_kernel(&mut r.config, r.sim.n)?;
            let o = r.config.optimize.as_mut().ok_or_else(|| missing("optimize"))?;
            let family = match o.family.as_str() {
                "constant" => ParamFamily::Constant,
                "product_form" => ParamFamily::ProductForm,
                "phi_threshold" => {
                    let m = r.config.model.as_ref().expect("resolved");
                    ParamFamily::PhiThreshold(resolve_phi(m)?)
                }
                other => return Err(config_err("optimize.family", format!("unknown family `{other}`"))),
            };
            let spec = CemSpec {
                family,
                init_mean: o.init_mean.clone(),
                init_std: o.init_std.clone(),
                population: *o.population.get_or_insert(16),
                elite_frac: *o.elite_frac.get_or_insert(0.25),
                budget: o.budget,
            };
            let res = optimize_control(&r.model, &spec, &kernel, &r.init, &r.sim).map_err(|e| match e {
                e @ (Error::BudgetTooSmall { .. } | Error::DimensionMismatch { .. }) => config_err("optimize", e),
                Error::BadSpec(m) => config_err("optimize", m),
                e => runtime(e),
            })?;
            let _ = writeln!(
                stdout,
                "best_params={}",
                res.report.parameters.last().map_or("", |p| p.1.as_str())
            );
            res.report
        }
        _ => unreachable!("ids checked above"),
    };
    let dir = cli.out.join(id);
    write_resolved(&r.config, &dir)?;
    report.write_to_dir(&dir).map_err(runtime)?;
    let _ = writeln!(stdout, "experiment={id} verdict={}", report.verdict);
    for c in &report.criteria {
        let _ = writeln!(stdout, "criterion={} outcome={}", c.name, c.outcome);
    }
    Ok(report.verdict.exit_code())
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if cli.workers == Some(0) {
        let _ = writeln!(stderr, "error: --workers must be >= 1");
        return 2;
    }
    let result = match &cli.command {
        Command::Simulate => cmd_simulate(cli, stdout),
        Command::Cutnorm(args) => cmd_cutnorm(cli, args, stdout),
        Command::Experiment { id } => cmd_experiment(cli, id, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}
