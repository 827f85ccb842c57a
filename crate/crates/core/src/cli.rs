//! The `adl` command-line front end.
//!
//! Subcommands: `design`, `fit`, `bias`, `simulate`, `asymvar`. Exit codes
//! are a stable contract: 0 success, 2 usage or configuration errors, 3
//! verification failure, 4 degenerate data, 5 numerical failure. All outputs
//! embed the resolved configuration and are byte-identical for a fixed seed
//! regardless of thread count.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix3;
use serde_json::json;

use crate::asymptotics::{asymptotic_variance, MixtureLawSampler};
use crate::config::{parse_grid_spec, OutputFormat, RunConfig};
use crate::design::{
    apportion, d_optimal_emax, d_optimality_gap, render_design, render_exact_design,
};
use crate::error::{Error, Result};
use crate::estimation::{
    fit_mle, group_rows, parse_dataset_csv, residual_variance, stage1_bias_coefficient,
    stage1_bias_theta2, MleResult, PooledPoint,
};
use crate::model::{DoseInterval, Emax, ModelParams, Theta2Bounds};
use crate::numfmt;
use crate::simulation::{
    efficiency_curve, render_curve_csv, render_scenario_csv, run_paired, CurveRow, ScenarioReport,
};

/// Verification threshold for `design --verify-grid`.
const VERIFY_GAP_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "adl",
    version,
    about = "Two-stage adaptive D-optimal design and estimation for the Emax model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Master seed for all random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = automatic); ADL_THREADS is the fallback.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for output files.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Stdout format.
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the locally D-optimal Emax design and write a design file.
    Design(DesignArgs),
    /// Fit the Emax model to a dataset CSV by profiled least squares.
    Fit(FitArgs),
    /// Evaluate the first-order bias of the first-stage half-effect-dose
    /// estimate.
    Bias(BiasArgs),
    /// Run the paired fixed-versus-adaptive Monte Carlo study.
    Simulate(SimulateArgs),
    /// Estimate the limit-law asymptotic variance by Monte Carlo.
    Asymvar(AsymvarArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// Guessed half-effect dose.
    #[arg(long)]
    theta2: f64,
    /// Lower dose bound.
    #[arg(long)]
    a: f64,
    /// Upper dose bound.
    #[arg(long)]
    b: f64,
    /// Apportion the design to this many subjects (writes an exact design).
    #[arg(long)]
    n: Option<usize>,
    /// Cross-check against a brute-force grid search of this size.
    #[arg(long, value_name = "N")]
    verify_grid: Option<usize>,
    /// Placebo response used in the verification model.
    #[arg(long, default_value_t = 0.0)]
    theta0: f64,
    /// Maximum effect used in the verification model.
    #[arg(long, default_value_t = 1.0)]
    theta1: f64,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (columns stage,dose,replicate,y).
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    /// Error standard deviation (echoed in reports; the fit itself is
    /// variance-free).
    #[arg(long)]
    sigma: f64,
    /// Include the profiled RSS trace in JSON output.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 0.015)]
    theta2_min: f64,
    #[arg(long, default_value_t = 1500.0)]
    theta2_max: f64,
}

#[derive(Args)]
struct BiasArgs {
    /// True parameters as 'theta0,theta1,theta2'.
    #[arg(long, value_name = "T0,T1,T2")]
    theta: String,
    /// Guess used to build the first-stage design.
    #[arg(long)]
    theta2_guess: f64,
    #[arg(long)]
    sigma: f64,
    /// First-stage sample size (multiple of 3).
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    a: f64,
    #[arg(long)]
    b: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration file (key = value lines).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Also sweep theta2_guess over 'start:stop:count(log|lin)'.
    #[arg(long, value_name = "SPEC")]
    curve: Option<String>,
    /// Override the configured replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Exclude boundary-flagged fits from the summaries.
    #[arg(long)]
    drop_boundary: bool,
}

#[derive(Args)]
struct AsymvarArgs {
    /// Run configuration file (key = value lines).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Number of Monte Carlo draws.
    #[arg(long)]
    draws: usize,
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let globals = Globals {
        seed: cli.seed,
        threads: cli.threads,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    match cli.command {
        Command::Design(args) => cmd_design(args, &globals),
        Command::Fit(args) => cmd_fit(args, &globals),
        Command::Bias(args) => cmd_bias(args, &globals),
        Command::Simulate(args) => cmd_simulate(args, &globals),
        Command::Asymvar(args) => cmd_asymvar(args, &globals),
    }
}

struct Globals {
    seed: Option<u64>,
    threads: Option<usize>,
    out_dir: Option<PathBuf>,
    format: Option<OutputFormat>,
}

impl Globals {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(fmt) = self.format {
            cfg.format = fmt;
        }
        cfg.threads = self.resolve_threads(cfg.threads);
    }

    fn resolve_threads(&self, configured: usize) -> usize {
        if let Some(t) = self.threads {
            return t;
        }
        if let Ok(env) = std::env::var("ADL_THREADS") {
            if let Ok(t) = env.parse() {
                return t;
            }
        }
        configured
    }

    fn format(&self) -> OutputFormat {
        self.format.unwrap_or(OutputFormat::Csv)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
        pool.install(f)
    }
}

fn write_file(dir: &PathBuf, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn cmd_design(args: DesignArgs, globals: &Globals) -> Result<()> {
    let interval = DoseInterval::new(args.a, args.b)?;
    let design = d_optimal_emax(args.theta2, &interval)?;

    let mut provenance = format!(
        "# adl design\n# theta2 = {}\n# a = {}\n# b = {}\n",
        numfmt::machine(args.theta2),
        numfmt::machine(args.a),
        numfmt::machine(args.b)
    );
    let body = match args.n {
        Some(n) => {
            provenance.push_str(&format!("# n = {n}\n"));
            render_exact_design(&apportion(&design, n))
        }
        None => render_design(&design),
    };
    let path = write_file(&globals.out_dir(), "design.txt", &format!("{provenance}{body}"))?;

    match globals.format() {
        OutputFormat::Json => {
            let mut doc = json!({
                "theta2": args.theta2,
                "a": args.a,
                "b": args.b,
                "points": design.points(),
                "weights": design.weights(),
                "file": path.display().to_string(),
            });
            if let Some(n) = args.n {
                let exact = apportion(&design, n);
                doc["n"] = json!(n);
                doc["counts"] = json!(exact.counts());
            }
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
        }
        OutputFormat::Csv => {
            println!("{:>14} {:>14}", "dose", "weight");
            for (&x, &w) in design.points().iter().zip(design.weights()) {
                println!("{:>14} {:>14}", numfmt::human(x), numfmt::human(w));
            }
            if let Some(n) = args.n {
                let exact = apportion(&design, n);
                println!("counts (n = {n}): {:?}", exact.counts());
            }
            println!("wrote {}", path.display());
        }
    }

    if let Some(grid) = args.verify_grid {
        let theta = ModelParams::new(args.theta0, args.theta1, args.theta2)?;
        let gap = d_optimality_gap(&theta, &interval, grid, &Emax)?;
        println!("max log-det gap over {grid}-point grid: {}", numfmt::human(gap));
        if gap > VERIFY_GAP_LIMIT {
            return Err(Error::Verification(format!(
                "brute-force search beat the closed form by {gap:e} in log det"
            )));
        }
    }
    Ok(())
}

fn cmd_fit(args: FitArgs, globals: &Globals) -> Result<()> {
    if !(args.sigma.is_finite() && args.sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {}", args.sigma)));
    }
    let bounds = Theta2Bounds::new(args.theta2_min, args.theta2_max)?;
    let text = fs::read_to_string(&args.data)?;
    let rows = parse_dataset_csv(&text)?;
    let (stage1, stage2) = group_rows(&rows)?;

    let mut points: Vec<PooledPoint> = stage1.pooled();
    if let Some(s2) = &stage2 {
        points.extend(s2.pooled());
    }
    let want_trace = args.trace;
    let fit: MleResult = fit_mle(&points, &bounds, want_trace)?;

    let mut stages = vec![&stage1];
    if let Some(s2) = &stage2 {
        stages.push(s2);
    }
    let sigma_hat = residual_variance(&stages, &fit.theta_hat, &Emax)?.map(f64::sqrt);

    match globals.format() {
        OutputFormat::Json => {
            let mut doc = json!({
                "data": args.data.display().to_string(),
                "sigma": args.sigma,
                "theta_hat": {
                    "theta0": fit.theta_hat.theta0,
                    "theta1": fit.theta_hat.theta1,
                    "theta2": fit.theta_hat.theta2,
                },
                "rss": fit.rss,
                "converged": fit.converged,
                "boundary": fit.boundary,
                "sigma_hat": sigma_hat,
            });
            if let Some(trace) = &fit.profile_trace {
                doc["profile_trace"] = json!(trace);
            }
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
        }
        OutputFormat::Csv => {
            println!("theta0_hat = {}", numfmt::human(fit.theta_hat.theta0));
            println!("theta1_hat = {}", numfmt::human(fit.theta_hat.theta1));
            println!("theta2_hat = {}", numfmt::human(fit.theta_hat.theta2));
            println!("rss        = {}", numfmt::human(fit.rss));
            println!("converged  = {}", fit.converged);
            println!("boundary   = {}", fit.boundary);
            if let Some(s) = sigma_hat {
                println!("sigma_hat  = {} (residual diagnostic)", numfmt::human(s));
            }
        }
    }
    Ok(())
}

fn parse_theta_triple(spec: &str) -> Result<ModelParams> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!(
            "--theta expects 'theta0,theta1,theta2', got '{spec}'"
        )));
    }
    let vals: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::invalid(format!("bad theta component '{p}'")))
        })
        .collect::<Result<_>>()?;
    ModelParams::new(vals[0], vals[1], vals[2])
}

fn cmd_bias(args: BiasArgs, globals: &Globals) -> Result<()> {
    let theta = parse_theta_triple(&args.theta)?;
    let interval = DoseInterval::new(args.a, args.b)?;
    let b2 = stage1_bias_coefficient(&theta, args.theta2_guess, &interval, args.sigma)?;
    let bias = stage1_bias_theta2(&theta, args.theta2_guess, &interval, args.sigma, args.n1)?;
    match globals.format() {
        OutputFormat::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "theta": [theta.theta0, theta.theta1, theta.theta2],
                    "theta2_guess": args.theta2_guess,
                    "sigma": args.sigma,
                    "n1": args.n1,
                    "a": args.a,
                    "b": args.b,
                    "b2": b2,
                    "bias": bias,
                }))
                .unwrap()
            );
        }
        OutputFormat::Csv => {
            println!("b2   = {}", numfmt::human(b2));
            println!("bias = {} (b2 / n1, n1 = {})", numfmt::human(bias), args.n1);
        }
    }
    Ok(())
}

fn simulate_provenance(cfg: &RunConfig, args: &SimulateArgs) -> Vec<(String, String)> {
    let mut prov = vec![("command".to_string(), "simulate".to_string())];
    prov.extend(cfg.echo());
    prov.push(("drop_boundary".to_string(), args.drop_boundary.to_string()));
    if let Some(spec) = &args.curve {
        prov.push(("curve".to_string(), spec.clone()));
    }
    prov
}

fn cmd_simulate(args: SimulateArgs, globals: &Globals) -> Result<()> {
    let mut cfg = RunConfig::from_file_text(&fs::read_to_string(&args.config)?)?;
    globals.apply(&mut cfg);
    if let Some(reps) = args.replications {
        cfg.replications = reps;
    }
    let scenario = cfg.to_scenario()?;
    let grid = args.curve.as_deref().map(parse_grid_spec).transpose()?;
    if let Some(grid) = &grid {
        for &g in grid {
            if !cfg.bounds()?.contains(g) {
                return Err(Error::invalid(format!(
                    "curve grid value {g} outside the theta2 box"
                )));
            }
        }
    }

    let drop_boundary = args.drop_boundary;
    let (report, curve): (ScenarioReport, Option<Vec<CurveRow>>) =
        with_pool(cfg.threads, || {
            let report = run_paired(&scenario, drop_boundary)?;
            let curve = grid
                .as_deref()
                .map(|g| efficiency_curve(&scenario, g, drop_boundary))
                .transpose()?;
            Ok((report, curve))
        })?;

    let provenance = simulate_provenance(&cfg, &args);
    let scenario_path = write_file(
        &cfg.out_dir,
        "scenario.csv",
        &render_scenario_csv(std::slice::from_ref(&report), &provenance),
    )?;
    let mut written = vec![scenario_path.display().to_string()];
    if let Some(rows) = &curve {
        let p = write_file(&cfg.out_dir, "curve.csv", &render_curve_csv(rows, &provenance))?;
        written.push(p.display().to_string());
    }
    let summary = json!({
        "config": echo_map(&provenance),
        "scenario": report,
        "curve": curve,
    });
    let p = write_file(
        &cfg.out_dir,
        "summary.json",
        &format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()),
    )?;
    written.push(p.display().to_string());

    match cfg.format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&summary).unwrap()),
        OutputFormat::Csv => {
            println!(
                "{:>10} {:>10} {:>8} {:>14} {:>14} {:>10} {:>10}",
                "theta2_t", "theta2_0", "sigma", "mse_fixed", "mse_adaptive", "rel_eff", "se"
            );
            println!(
                "{:>10} {:>10} {:>8} {:>14} {:>14} {:>10} {:>10}",
                numfmt::human(scenario.theta_true.theta2),
                numfmt::human(scenario.theta2_guess),
                numfmt::human(scenario.sigma),
                numfmt::human(report.fixed.mse_total),
                numfmt::human(report.adaptive.mse_total),
                numfmt::human(report.rel_eff),
                numfmt::human(report.rel_eff_se),
            );
            println!(
                "boundary rate: fixed {} adaptive {}",
                numfmt::human(report.fixed.boundary_rate),
                numfmt::human(report.adaptive.boundary_rate)
            );
            if let Some(rows) = &curve {
                println!();
                println!("{:>12} {:>10} {:>10}", "theta2_guess", "rel_eff", "se");
                for r in rows {
                    println!(
                        "{:>12} {:>10} {:>10}",
                        numfmt::human(r.theta2_guess),
                        numfmt::human(r.rel_eff),
                        numfmt::human(r.mc_stderr)
                    );
                }
            }
            for w in &written {
                println!("wrote {w}");
            }
        }
    }
    Ok(())
}

fn echo_map(entries: &[(String, String)]) -> serde_json::Map<String, serde_json::Value> {
    entries
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
        .collect()
}

fn matrix_rows(m: &Matrix3<f64>) -> Vec<Vec<f64>> {
    (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
}

fn print_matrix(label: &str, m: &Matrix3<f64>) {
    println!("{label}:");
    for i in 0..3 {
        println!(
            "  {:>14} {:>14} {:>14}",
            numfmt::human(m[(i, 0)]),
            numfmt::human(m[(i, 1)]),
            numfmt::human(m[(i, 2)])
        );
    }
}

fn cmd_asymvar(args: AsymvarArgs, globals: &Globals) -> Result<()> {
    if args.draws == 0 {
        return Err(Error::invalid("--draws must be at least 1"));
    }
    let mut cfg = RunConfig::from_file_text(&fs::read_to_string(&args.config)?)?;
    globals.apply(&mut cfg);

    let interval = cfg.dose_interval()?;
    let stage1 = apportion(&d_optimal_emax(cfg.theta2_guess, &interval)?, cfg.n1);
    let mut sampler = MixtureLawSampler::new(cfg.theta_true()?, cfg.sigma, stage1, interval)?;
    sampler.bounds = cfg.bounds()?;
    sampler.stage1_sigma = cfg.sigma1;

    let seed = cfg.seed;
    let draws = args.draws;
    let av = with_pool(cfg.threads, || asymptotic_variance(&sampler, draws, seed))?;

    let gap = av.jensen_gap();
    let gap_sym = (gap + gap.transpose()) * 0.5;
    let min_eig = gap_sym.symmetric_eigen().eigenvalues.min();

    match cfg.format {
        OutputFormat::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "config": echo_map(&cfg.echo()),
                    "draws": av.n_rep,
                    "singular_draws": av.singular_draws,
                    "mean_inverse": matrix_rows(&av.mean_inverse),
                    "standard_error": matrix_rows(&av.standard_error),
                    "plugin_inverse": matrix_rows(&av.plugin_inverse),
                    "jensen_gap_min_eigenvalue": min_eig,
                }))
                .unwrap()
            );
        }
        OutputFormat::Csv => {
            println!("draws = {}, singular resamples = {}", av.n_rep, av.singular_draws);
            print_matrix("asymptotic variance sigma^2 E[M^-1]", &av.mean_inverse);
            print_matrix("monte carlo standard error", &av.standard_error);
            print_matrix("plug-in variance sigma^2 (E[M])^-1", &av.plugin_inverse);
            println!(
                "min eigenvalue of E[M^-1] - (E[M])^-1: {}",
                numfmt::human(min_eig)
            );
        }
    }
    Ok(())
}
