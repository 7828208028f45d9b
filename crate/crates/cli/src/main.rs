mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ergomfg::ergodic::{lambda_quadratic_oracle, solve_ergodic, ErgodicSolution};
use ergomfg::experiments::{run_sweep, RateReport, RateRow};
use ergomfg::mfg::solve_mfg;
use ergomfg::viscous::viscous_mfg_sweep;
use serde::Serialize;

use config::{parse_config, ConfigError, RunConfig};
use output::OutputDir;

/// Mean field games on the flat torus: finite-horizon and ergodic solvers.
#[derive(Debug, Parser)]
#[command(name = "ergomfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-horizon solve: solution JSON and residual CSV.
    SolveMfg { config: PathBuf },
    /// Ergodic solve: prints the ergodic constant and its closed-form gap.
    SolveErgodic { config: PathBuf },
    /// Horizon sweep against the ergodic solution; exits 3 unless every verdict holds.
    LongTime { config: PathBuf },
    /// Randomized weak-coercivity audit of the configured coupling.
    CheckCoercivity {
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Viscous solves for decreasing diffusion against the first-order solution.
    ViscousCompare {
        config: PathBuf,
        /// Strictly decreasing, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
    },
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] ergomfg::Error),
    #[error(transparent)]
    Io(#[from] anyhow::Error),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Config(_) => "config",
            Failure::Solver(e) if matches!(e.root(), ergomfg::Error::NonConvergence { .. }) => "non_convergence",
            Failure::Solver(_) => "solver",
            Failure::Io(_) => "io",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Solver(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report(Failure::Usage(e.kind().to_string()));
        }
    };
    if let Err(f) = configure_threads() {
        return report(f);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let doc = serde_json::json!({ "error": f.kind(), "message": f.to_string() });
    eprintln!("{doc}");
    ExitCode::from(f.exit_code())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ERGOMFG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("ERGOMFG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn load(path: &Path) -> Result<(RunConfig, OutputDir), Failure> {
    let cfg = parse_config(path)?;
    log::info!("config {}", serde_json::to_string(&cfg).expect("config serialises"));
    let out = OutputDir::create(&cfg.output_dir, &cfg.hash()).map_err(anyhow::Error::from)?;
    Ok((cfg, out))
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::SolveMfg { config } => solve_mfg_cmd(&config),
        Command::SolveErgodic { config } => solve_ergodic_cmd(&config),
        Command::LongTime { config } => long_time_cmd(&config),
        Command::CheckCoercivity { config, samples } => coercivity_cmd(&config, samples),
        Command::ViscousCompare { config, eps } => viscous_cmd(&config, &eps),
    }
}

#[derive(Serialize)]
struct ResidualRow {
    iteration: usize,
    residual: f64,
    response_gap: Option<f64>,
}

fn residual_rows(residuals: &[f64], gaps: &[f64]) -> Vec<ResidualRow> {
    residuals
        .iter()
        .enumerate()
        .map(|(i, &residual)| ResidualRow {
            iteration: i + 1,
            residual,
            response_gap: gaps.get(i).copied(),
        })
        .collect()
}

#[derive(Serialize)]
struct MfgDocument {
    iterations: usize,
    final_residual: f64,
    lip_x: f64,
    lip_t: f64,
    times: Vec<f64>,
    value: Vec<Vec<f64>>,
    density: Vec<Vec<f64>>,
}

fn solve_mfg_cmd(path: &Path) -> Result<u8, Failure> {
    let (cfg, out) = load(path)?;
    let problem = cfg.problem(cfg.horizon()?)?;
    match solve_mfg(&problem, &cfg.fixed_point()) {
        Ok(sol) => {
            out.write_csv("residuals.csv", &residual_rows(&sol.residual_history, &sol.response_gap_history))?;
            let lip = sol.hj.lipschitz_report();
            let doc = MfgDocument {
                iterations: sol.iterations,
                final_residual: sol.final_residual(),
                lip_x: lip.lip_x,
                lip_t: lip.lip_t,
                times: sol.path.times().to_vec(),
                value: sol.hj.u.iter().map(|u| u.values().to_vec()).collect(),
                density: sol.path.measures().iter().map(|m| m.density().to_vec()).collect(),
            };
            out.write_json("mfg_solution.json", &cfg, &doc)?;
            println!("converged in {} iterations, residual {:.3e}", sol.iterations, sol.final_residual());
            Ok(0)
        }
        Err(e) => {
            if let ergomfg::Error::NonConvergence { history, .. } = e.root() {
                out.write_csv("residuals.csv", &residual_rows(history, &[]))?;
            }
            Err(e.into())
        }
    }
}

#[derive(Serialize)]
struct ErgodicDocument<'a> {
    lambda: f64,
    oracle_lambda: Option<f64>,
    oracle_gap: Option<f64>,
    u_bar: &'a [f64],
    m_bar: &'a [f64],
    coupling_field: &'a [f64],
    diagnostics: &'a ergomfg::ergodic::ErgodicDiagnostics,
}

fn oracle_gap(cfg: &RunConfig, sol: &ErgodicSolution) -> Result<Option<(f64, f64)>, Failure> {
    let spec = cfg.hamiltonian_spec()?;
    if !spec.is_quadratic() {
        return Ok(None);
    }
    let oracle = lambda_quadratic_oracle(spec.potential(), &sol.coupling_field)?;
    Ok(Some((oracle.lambda, (sol.lambda - oracle.lambda).abs())))
}

fn solve_ergodic_cmd(path: &Path) -> Result<u8, Failure> {
    let (cfg, out) = load(path)?;
    let sol = solve_ergodic(&cfg.hamiltonian_spec()?, &cfg.coupling_spec()?, &cfg.ergodic())?;
    let oracle = oracle_gap(&cfg, &sol)?;
    let doc = ErgodicDocument {
        lambda: sol.lambda,
        oracle_lambda: oracle.map(|o| o.0),
        oracle_gap: oracle.map(|o| o.1),
        u_bar: sol.u_bar.values(),
        m_bar: sol.m_bar.density(),
        coupling_field: sol.coupling_field.values(),
        diagnostics: &sol.diagnostics,
    };
    out.write_json("ergodic.json", &cfg, &doc)?;
    println!("lambda = {:.6}", sol.lambda);
    match oracle {
        Some((l, gap)) => println!("oracle lambda = {l:.6}, gap = {gap:.3e}"),
        None => println!("oracle lambda = n/a (non-quadratic Hamiltonian)"),
    }
    println!("outer iterations = {}", sol.diagnostics.outer_iterations);
    Ok(0)
}

fn write_rates(out: &OutputDir, cfg: &RunConfig, report: &RateReport) -> Result<(), Failure> {
    out.write_csv("rates.csv", &report.rows)?;
    out.write_json("rates.json", cfg, report)?;
    let log_points = |f: fn(&RateRow) -> f64| -> Vec<(f64, f64)> {
        report.rows.iter().map(|r| (r.horizon.ln(), f(r).ln())).collect()
    };
    out.write_columns("e_u.dat", ("log_T", "log_e_u"), &log_points(|r| r.e_u))?;
    out.write_columns("e_f.dat", ("log_T", "log_e_F"), &log_points(|r| r.e_f))?;
    Ok(())
}

fn long_time_cmd(path: &Path) -> Result<u8, Failure> {
    let (cfg, out) = load(path)?;
    let horizons = cfg.horizons()?;
    let erg = solve_ergodic(&cfg.hamiltonian_spec()?, &cfg.coupling_spec()?, &cfg.ergodic())?;
    println!("lambda = {:.6}", erg.lambda);
    let template = cfg.problem(horizons[0])?;
    match run_sweep(&template, &horizons, cfg.time.dt, &erg, &cfg.fixed_point()) {
        Ok(report) => {
            write_rates(&out, &cfg, &report)?;
            for r in &report.rows {
                println!(
                    "T = {}: e_u = {:.3e}, e_F = {:.3e}, energy = {:.3e}, lip_x = {:.4}",
                    r.horizon, r.e_u, r.e_f, r.energy, r.lip_x
                );
            }
            println!("slope_u = {:.3}, slope_F = {:.3}", report.slope_u, report.slope_f);
            println!("verdicts {}", serde_json::to_string(&report.verdicts).expect("serialises"));
            Ok(if report.verdicts.all() { 0 } else { 3 })
        }
        Err(failure) => {
            out.write_csv("rates_partial.csv", &failure.completed)?;
            log::error!("sweep stopped at T = {}", failure.horizon);
            Err(failure.source.into())
        }
    }
}

#[derive(Serialize)]
struct CoercivityRow {
    samples: usize,
    seed: u64,
    min_ratio: f64,
    min_lhs: f64,
    c_bar: f64,
    failures: usize,
}

fn coercivity_cmd(path: &Path, samples: usize) -> Result<u8, Failure> {
    if samples == 0 {
        return Err(Failure::Usage("--samples must be positive".into()));
    }
    let (cfg, out) = load(path)?;
    let audit = cfg.coupling_spec()?.coercivity_audit(samples, cfg.seed)?;
    out.write_csv(
        "coercivity.csv",
        &[CoercivityRow {
            samples,
            seed: cfg.seed,
            min_ratio: audit.min_ratio,
            min_lhs: audit.min_lhs,
            c_bar: audit.c_bar,
            failures: audit.failures,
        }],
    )?;
    println!(
        "min ratio = {:.6e}, c_bar = {:.6e}, min lhs = {:.3e}, failures = {}/{samples}",
        audit.min_ratio, audit.c_bar, audit.min_lhs, audit.failures
    );
    Ok(if audit.passes() { 0 } else { 3 })
}

pub const GAP_SLACK: f64 = 1.1;

fn viscous_cmd(path: &Path, eps: &[f64]) -> Result<u8, Failure> {
    if eps.windows(2).any(|w| w[1] >= w[0]) || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Failure::Usage("--eps must be positive and strictly decreasing".into()));
    }
    let (cfg, out) = load(path)?;
    let sweep = viscous_mfg_sweep(&cfg.problem(cfg.horizon()?)?, eps, &cfg.fixed_point())?;
    out.write_csv("viscous.csv", &sweep.rows)?;
    for r in &sweep.rows {
        println!("eps = {}: sup gap u = {:.4e}, d1 gap m = {:.4e}", r.epsilon, r.sup_gap_u, r.d1_gap_m);
    }
    Ok(if sweep.is_monotone(GAP_SLACK) { 0 } else { 3 })
}
