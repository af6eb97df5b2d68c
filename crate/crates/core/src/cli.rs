//! Command-line front end. Every run writes its outputs and a
//! `run_manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{bernoulli_approx_study, loglog_slope, monotonicity_check, network_monotonicity, write_approx_csv};
use crate::experiments::{
    peak_load_ratio, run_approximation_study, run_bench, shortest_path_baseline, write_csv, ApproxConfig,
    ExperimentConfig, RunManifest,
};
use crate::forb::{solve_gne, write_trace_csv, ForbError, ForbOptions, ForbResult};
use crate::game::{Game, Layout, RecoveryOptions};
use crate::network::LatencyParams;
use crate::receding::{
    self, closed_loop_run, terminal_cost_gain, ClosedLoopConfig, KappaOptions, RecedingCosts, RecedingError,
};
use crate::scenario::{ScenarioConfig, ScenarioError};

#[derive(Debug, Parser)]
#[command(name = "mdp-routing", version, about = "Equilibrium routing of vehicle fleets on congested road networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every stochastic step; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Solver tolerance on the KKT residual.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Solver iteration limit.
    #[arg(long = "max-iters", global = true)]
    pub max_iters: Option<usize>,
    /// Where outputs and the manifest go.
    #[arg(long = "output-dir", global = true, env = "MDPROUTE_OUTPUT_DIR", default_value = "out")]
    pub output_dir: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, env = "MDPROUTE_THREADS")]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the capacity-constrained equilibrium of a scenario.
    SolveGne {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run receding-horizon routing in closed loop.
    Receding {
        #[arg(long)]
        config: PathBuf,
    },
    /// Route every agent along its free-flow shortest path.
    Baseline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check the monotonicity condition on the congestion offset.
    Analyze {
        /// Latency exponent.
        #[arg(long, required_unless_present = "config")]
        xi: Option<f64>,
        /// Number of agents.
        #[arg(long = "N", visible_alias = "n-agents", required_unless_present = "config")]
        n_agents: Option<usize>,
        /// Offset to test against the threshold.
        #[arg(long)]
        zeta: Option<f64>,
        /// Check every edge of a scenario instead.
        #[arg(long, conflicts_with_all = ["xi", "n_agents"])]
        config: Option<PathBuf>,
    },
    /// Sampled travel times against the expected-occupancy surrogate.
    ApproxStudy {
        /// Scenario to solve first; without it only the Bernoulli study runs.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vehicles per agent, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100, 1000])]
        vehicles: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        /// Trials per sample size in the Bernoulli study.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Congestion, approximation and receding-horizon benchmarks.
    Bench {
        /// Experiment configuration; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the number of open-loop scenarios.
        #[arg(long)]
        scenarios: Option<usize>,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad or unreadable configuration: exit 2.
    Config(String),
    /// The solver stopped at its iteration limit: exit 1.
    NotConverged(String),
    /// Anything else: exit 1.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NotConverged(_) | CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
            CliError::Run(m) => write!(f, "{m}"),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Game(g) => CliError::Config(g.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let g = &cli.global;
    let dir = &g.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    match &cli.command {
        Command::SolveGne { config } => solve_gne_cmd(g, config),
        Command::Receding { config } => receding_cmd(g, config),
        Command::Baseline { config } => baseline_cmd(g, config),
        Command::Analyze {
            xi,
            n_agents,
            zeta,
            config,
        } => analyze_cmd(g, *xi, *n_agents, *zeta, config.as_deref()),
        Command::ApproxStudy {
            config,
            vehicles,
            replicates,
            trials,
        } => approx_cmd(g, config.as_deref(), vehicles, *replicates, *trials),
        Command::Bench { config, scenarios } => bench_cmd(g, config.as_deref(), *scenarios),
    }
}

fn forb_options(g: &GlobalArgs) -> ForbOptions {
    let mut o = ForbOptions::default();
    if let Some(t) = g.tol {
        o.tol = t;
    }
    if let Some(m) = g.max_iters {
        o.max_iters = m;
    }
    o
}

fn load_scenario(g: &GlobalArgs, path: &Path) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Writes through a buffered file, mapping errors to run failures.
fn write_file<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<(), Box<dyn std::error::Error>>,
{
    let file = std::fs::File::create(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct OmegaRow {
    agent: usize,
    block: &'static str,
    step: usize,
    /// Edge index for `mass`, node for `rho`.
    index: usize,
    value: f64,
}

#[derive(Serialize)]
struct LambdaRow {
    step: usize,
    edge: usize,
    source: usize,
    target: usize,
    value: f64,
}

fn omega_rows(lay: &Layout, omegas: &[Vec<f64>]) -> Vec<OmegaRow> {
    let mut rows = Vec::new();
    for (agent, w) in omegas.iter().enumerate() {
        for t in 0..lay.horizon {
            for (index, &value) in lay.mass_block(w, t).iter().enumerate() {
                rows.push(OmegaRow { agent, block: "mass", step: t, index, value });
            }
        }
        for t in 0..=lay.horizon {
            for (index, &value) in lay.rho_block(w, t).iter().enumerate() {
                rows.push(OmegaRow { agent, block: "rho", step: t, index, value });
            }
        }
    }
    rows
}

fn solve_gne_cmd(g: &GlobalArgs, config: &Path) -> Result<(), CliError> {
    let cfg = load_scenario(g, config)?;
    let net = Arc::new(cfg.network()?);
    let game = cfg.game(Arc::clone(&net))?;
    let opts = forb_options(g);
    let (result, converged): (ForbResult, bool) = match solve_gne(&game, &opts) {
        Ok(r) => (r, true),
        Err(ForbError::MaxIterExceeded(best)) => (*best, false),
        Err(e) => return Err(run_err(e)),
    };
    let dir = &g.output_dir;
    let lay = game.layout();
    write_csv(&dir.join("omega.csv"), &omega_rows(&lay, &result.omegas)).map_err(run_err)?;
    let lambda: Vec<LambdaRow> = result
        .lambda
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let edge = k % lay.n_edges;
            let e = net.edge(edge);
            LambdaRow { step: k / lay.n_edges, edge, source: e.source, target: e.target, value }
        })
        .collect();
    write_csv(&dir.join("lambda.csv"), &lambda).map_err(run_err)?;
    write_file(&dir.join("trace.csv"), |w| Ok(write_trace_csv(w, &result.trace)?))?;

    let mut manifest = RunManifest::new("solve-gne", cfg.seed, &cfg).map_err(run_err)?;
    manifest.outputs = vec!["omega.csv".into(), "lambda.csv".into(), "trace.csv".into()];
    manifest.summary = serde_json::json!({
        "config_path": path_str(config),
        "tol": opts.tol,
        "max_iters": opts.max_iters,
        "converged": converged,
        "kkt_residual": result.kkt.residual(),
        "iterations": result.iterations,
        "capacity_violation": game.coupling_violation(&result.omegas),
        "alpha": result.steps.alpha,
        "beta": result.steps.beta,
    });
    manifest.write(dir).map_err(run_err)?;
    println!(
        "KKT residual {:.3e} after {} iterations ({})",
        result.kkt.residual(),
        result.iterations,
        if converged { "converged" } else { "iteration limit" }
    );
    if converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("KKT residual {:.3e} above {:.1e}", result.kkt.residual(), opts.tol)))
    }
}

fn receding_cmd(g: &GlobalArgs, config: &Path) -> Result<(), CliError> {
    let cfg = load_scenario(g, config)?;
    let section = cfg.receding.clone().ok_or(ScenarioError::NoReceding)?;
    let net = Arc::new(cfg.network()?);
    let n = cfg.agents.len();
    let gamma = terminal_cost_gain(&net, n, section.stage_lipschitz).map_err(|e| CliError::Config(e.to_string()))?;
    let initial: Vec<Vec<f64>> = cfg
        .agents
        .iter()
        .map(|a| {
            let mut r = vec![0.0; net.n_nodes()];
            if a.start < r.len() {
                r[a.start] = 1.0;
            }
            r
        })
        .collect();
    let dests: Vec<_> = cfg.agents.iter().map(|a| a.destination).collect();
    let run_cfg = ClosedLoopConfig {
        kappa: KappaOptions {
            horizon: section.horizon,
            costs: RecedingCosts { gamma, stage_weight: section.stage_weight },
            forb: forb_options(g),
            recovery: RecoveryOptions::default(),
            accept_unconverged: section.accept_unconverged,
        },
        steps: section.steps,
        vehicles: section.vehicles,
        seed: cfg.seed,
        mode: section.mode,
        warm_start: true,
    };
    let trace = closed_loop_run(Arc::clone(&net), &initial, &dests, &run_cfg).map_err(|e| match e {
        RecedingError::Forb(ForbError::MaxIterExceeded(_)) => CliError::NotConverged(e.to_string()),
        RecedingError::Forb(_) | RecedingError::Game(_) | RecedingError::NonStochasticColumn { .. } => run_err(e),
        other => CliError::Config(other.to_string()),
    })?;
    let dir = &g.output_dir;
    write_file(&dir.join("receding_trace.csv"), |w| Ok(receding::write_trace_csv(w, &trace)?))?;
    let unconverged = trace.steps.iter().filter(|s| !s.converged).count();
    let mut manifest = RunManifest::new("receding", cfg.seed, &cfg).map_err(run_err)?;
    manifest.outputs = vec!["receding_trace.csv".into()];
    manifest.summary = serde_json::json!({
        "config_path": path_str(config),
        "gamma": gamma,
        "total_cost": trace.total_cost(),
        "state_norms": trace.state_norms(),
        "unconverged_steps": unconverged,
    });
    manifest.write(dir).map_err(run_err)?;
    let total: f64 = trace.total_cost().iter().sum();
    println!("total realized cost {total:.6} over {} steps", trace.steps.len());
    if unconverged > 0 {
        return Err(CliError::NotConverged(format!("{unconverged} steps used an unconverged equilibrium")));
    }
    Ok(())
}

#[derive(Serialize)]
struct BaselineRow {
    edge: usize,
    source: usize,
    target: usize,
    peak_load_ratio: f64,
}

fn baseline_cmd(g: &GlobalArgs, config: &Path) -> Result<(), CliError> {
    let cfg = load_scenario(g, config)?;
    let net = Arc::new(cfg.network()?);
    let base = shortest_path_baseline(&net, &cfg.pairs(), cfg.horizon).map_err(|e| CliError::Config(e.to_string()))?;
    let ratios = peak_load_ratio(&net, cfg.horizon, &base.sigma);
    let rows: Vec<BaselineRow> = ratios
        .iter()
        .enumerate()
        .map(|(edge, &r)| {
            let e = net.edge(edge);
            BaselineRow { edge, source: e.source, target: e.target, peak_load_ratio: r }
        })
        .collect();
    let dir = &g.output_dir;
    let lay = Layout { n_nodes: net.n_nodes(), n_edges: net.n_edges(), horizon: cfg.horizon };
    write_csv(&dir.join("baseline.csv"), &rows).map_err(run_err)?;
    write_csv(&dir.join("baseline_omega.csv"), &omega_rows(&lay, &base.omegas)).map_err(run_err)?;
    let game = cfg.game(net)?;
    let costs: Vec<f64> = (0..game.n_agents()).map(|i| game.cost(i, &base.omegas[i], &base.sigma)).collect();
    let mut manifest = RunManifest::new("baseline", cfg.seed, &cfg).map_err(run_err)?;
    manifest.outputs = vec!["baseline.csv".into(), "baseline_omega.csv".into()];
    manifest.summary = serde_json::json!({
        "config_path": path_str(config),
        "agent_costs": costs,
        "max_peak_load_ratio": ratios.iter().cloned().fold(0.0, f64::max),
    });
    manifest.write(dir).map_err(run_err)?;
    println!("baseline peak load ratio {:.4}", ratios.iter().cloned().fold(0.0, f64::max));
    Ok(())
}

fn analyze_cmd(
    g: &GlobalArgs,
    xi: Option<f64>,
    n_agents: Option<usize>,
    zeta: Option<f64>,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let dir = &g.output_dir;
    if let Some(path) = config {
        let cfg = load_scenario(g, path)?;
        let game = cfg.game(Arc::new(cfg.network()?))?;
        let rows = network_monotonicity(&game);
        write_file(&dir.join("monotonicity.csv"), |w| Ok(crate::analysis::write_monotonicity_csv(w, &rows)?))?;
        let failing = rows.iter().filter(|r| !r.entry.satisfied).count();
        let mut manifest = RunManifest::new("analyze", cfg.seed, &cfg).map_err(run_err)?;
        manifest.outputs = vec!["monotonicity.csv".into()];
        manifest.summary = serde_json::json!({ "config_path": path_str(path), "edges_failing": failing });
        manifest.write(dir).map_err(run_err)?;
        println!("{} of {} edges satisfy the monotonicity condition", rows.len() - failing, rows.len());
        return Ok(());
    }
    let (xi, n) = match (xi, n_agents) {
        (Some(x), Some(n)) if n > 0 && x.is_finite() => (x, n),
        _ => return Err(CliError::Config("analyze needs --xi and a positive --N".into())),
    };
    // without --zeta, judge the default offset 1/N
    let zeta = zeta.unwrap_or(1.0 / n as f64);
    let entry = monotonicity_check(xi, zeta, n);
    println!("threshold zeta >= {}", entry.threshold);
    println!(
        "zeta = {} {} (margin {:+})",
        entry.zeta,
        if entry.satisfied { "satisfies the condition" } else { "violates the condition" },
        entry.margin
    );
    #[derive(Serialize)]
    struct AnalyzeArgs {
        xi: f64,
        n_agents: usize,
        zeta: f64,
    }
    let mut manifest = RunManifest::new("analyze", g.seed.unwrap_or(0), &AnalyzeArgs { xi, n_agents: n, zeta })
        .map_err(run_err)?;
    manifest.summary = serde_json::to_value(entry).map_err(run_err)?;
    manifest.write(dir).map_err(run_err)?;
    Ok(())
}

fn approx_cmd(
    g: &GlobalArgs,
    config: Option<&Path>,
    vehicles: &[usize],
    replicates: usize,
    trials: usize,
) -> Result<(), CliError> {
    let dir = &g.output_dir;
    let seed = g.seed.unwrap_or(0);
    let mut outputs = vec!["approx_bernoulli.csv".to_string()];
    // Bernoulli study on an affine edge: the error is exactly l'^2 p(1-p)/n
    let latency = LatencyParams::Affine { tau: 1.0, k: 2.0 }.normalize();
    let n_list = [100u64, 1_000, 10_000];
    let rows = bernoulli_approx_study(&latency, 0.3, &n_list, trials, seed);
    write_file(&dir.join("approx_bernoulli.csv"), |w| Ok(write_approx_csv(w, &rows)?))?;
    let slope = loglog_slope(
        &n_list.iter().map(|&n| n as f64).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.mse).collect::<Vec<_>>(),
    );
    println!("MSE log-log slope {slope:.3}");
    let mut summary = serde_json::json!({ "mse_slope": slope });
    let mut cfg_value = serde_json::json!({ "vehicles": vehicles, "replicates": replicates, "trials": trials });

    if let Some(path) = config {
        let cfg = load_scenario(g, path)?;
        let seed = g.seed.unwrap_or(cfg.seed);
        let game: Game = cfg.game(Arc::new(cfg.network()?))?;
        let opts = forb_options(g);
        let (result, converged) = match solve_gne(&game, &opts) {
            Ok(r) => (r, true),
            Err(ForbError::MaxIterExceeded(best)) => (*best, false),
            Err(e) => return Err(run_err(e)),
        };
        let study = ApproxConfig { vehicles: vehicles.to_vec(), replicates };
        let rows = run_approximation_study(&game, &result.omegas, &study, seed).map_err(run_err)?;
        write_csv(&dir.join("approx_vs_V.csv"), &rows).map_err(run_err)?;
        outputs.push("approx_vs_V.csv".into());
        for r in &rows {
            println!("V = {:>6}: mean |error| {:.3e}", r.vehicles, r.mean_abs_error);
        }
        summary["equilibrium_kkt"] = result.kkt.residual().into();
        summary["equilibrium_converged"] = converged.into();
        cfg_value["scenario"] = serde_json::to_value(&cfg).map_err(run_err)?;
        cfg_value["config_path"] = path_str(path).into();
    }
    let mut manifest = RunManifest::new("approx-study", seed, &cfg_value).map_err(run_err)?;
    manifest.outputs = outputs;
    manifest.summary = summary;
    manifest.write(dir).map_err(run_err)?;
    Ok(())
}

fn bench_cmd(g: &GlobalArgs, config: Option<&Path>, scenarios: Option<usize>) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.tol {
        cfg.open_loop.tol = t;
        cfg.receding.tol = t;
    }
    if let Some(m) = g.max_iters {
        cfg.open_loop.max_iters = m;
        cfg.receding.max_iters = m;
    }
    if let Some(s) = scenarios {
        cfg.open_loop.scenarios = s;
    }
    let report = run_bench(&cfg, &g.output_dir).map_err(|e| match e {
        crate::experiments::ExperimentError::Network(_) => CliError::Config(e.to_string()),
        other => run_err(other),
    })?;
    let ol = &report.open_loop;
    println!(
        "per-edge median spread: equilibrium {:.4}, shortest path {:.4}; peak sigma/capacity {:.4}",
        ol.gne_spread, ol.baseline_spread, ol.gne_max_ratio
    );
    let flagged = ol.scenarios.iter().filter(|o| o.status != "converged").count();
    if flagged > 0 {
        println!("{flagged} of {} scenarios stopped at the iteration limit (see congestion_scenarios.csv)", ol.scenarios.len());
    }
    Ok(())
}
