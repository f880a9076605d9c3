//! `irgnm` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration or data errors, 3 when a
//! solver aborts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irgnm::diagnostics::{self, ProbeOperator};
use irgnm::simulation::{self, ReplicationResult, SummaryTable};
use irgnm::{generate_sample, IvProblem};
use log::info;

use crate::config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver aborted: {m}"),
        }
    }
}

impl From<irgnm::Error> for CliError {
    fn from(e: irgnm::Error) -> Self {
        use irgnm::Error as E;
        match e {
            E::Numerical(_) | E::TooManyInvalid { .. } => CliError::Solver(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "irgnm", version, about = "Gauss-Newton estimation for nonparametric IV integral equations")]
struct Cli {
    /// Only report errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// More logging (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo study: replications.csv, summary.csv, histograms.csv.
    Simulate(Common),
    /// Estimate from a y,x,z data file: phi_hat.csv and diagnostics.csv.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// CSV with header y,x,z.
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw one sample from the simulation design into data.csv.
    Sample(Common),
    /// Synthetic convergence-rate experiments: rate_fit.csv.
    Rates(Common),
    /// Variance, concentration, Lipschitz, source-condition and error
    /// decomposition probes.
    Diagnose(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replications per design point.
    #[arg(long)]
    reps: Option<usize>,
    /// Sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Grid nodes per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            out: self.out.clone(),
            seed: self.seed,
            reps: self.reps,
            n: self.n,
            grid: self.grid,
            threads: self.threads,
        });
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irgnm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(c) => with_setup(&c, cmd_simulate),
        Command::Reconstruct { common, data } => with_setup(&common, |cfg| cmd_reconstruct(cfg, &data)),
        Command::Sample(c) => with_setup(&c, cmd_sample),
        Command::Rates(c) => with_setup(&c, cmd_rates),
        Command::Diagnose(c) => with_setup(&c, cmd_diagnose),
    }
}

fn with_setup(common: &Common, f: impl FnOnce(&RunConfig) -> Result<(), CliError> + Send) -> Result<(), CliError> {
    let cfg = common.load()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("threads: {e}")))?
        .install(|| f(&cfg))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    info!("writing {}", path.display());
    Ok(BufWriter::new(file))
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let scn = cfg.scenario()?;
    let mcs = cfg.monte_carlo()?;
    let mut results: Vec<ReplicationResult> = Vec::new();
    for mc in &mcs {
        info!("n = {}: {} replications", mc.n, mc.reps);
        let outcome = irgnm::run_monte_carlo(&scn, mc)?;
        for (rep, msg) in &outcome.failures {
            log::warn!("n = {}, replication {rep} dropped: {msg}", mc.n);
        }
        results.extend(outcome.results);
    }
    let table = SummaryTable::from_results(&results);
    let w = create(&cfg.out, "replications.csv")?;
    simulation::write_replications(w, &results)?;
    let w = create(&cfg.out, "summary.csv")?;
    simulation::write_summary(w, &table)?;
    let w = create(&cfg.out, "histograms.csv")?;
    simulation::write_histograms(w, &results, cfg.simulation.histogram_bins, cfg.simulation.histogram_max)?;
    for row in &table.rows {
        println!(
            "n={:<5} {:<3} mean={:.4} q25={:.4} q50={:.4} q75={:.4} q90={:.4}",
            row.n,
            row.method.name(),
            row.mean,
            row.q25,
            row.q50,
            row.q75,
            row.q90
        );
    }
    Ok(())
}

fn cmd_reconstruct(cfg: &RunConfig, data: &Path) -> Result<(), CliError> {
    let scn = cfg.scenario()?;
    let settings = cfg.pipeline()?;
    let file = File::open(data).map_err(|e| CliError::Config(format!("cannot read data {}: {e}", data.display())))?;
    let sample = simulation::read_sample(std::io::BufReader::new(file))
        .map_err(|e| CliError::Config(format!("{}: {e}", data.display())))?;
    let rec = irgnm::reconstruct(&scn, &sample, &settings)?;
    let w = create(&cfg.out, "phi_hat.csv")?;
    simulation::write_estimates(w, &rec)?;
    let w = create(&cfg.out, "diagnostics.csv")?;
    simulation::write_path_diagnostics(w, &rec)?;
    println!(
        "n={} h={:.4} ind step {} of {} ce step {} of {}",
        sample.len(),
        rec.bandwidth,
        rec.ind_selection.index,
        rec.ind_run.last_index(),
        rec.ce_selection.index,
        rec.ce_run.last_index()
    );
    Ok(())
}

fn cmd_sample(cfg: &RunConfig) -> Result<(), CliError> {
    let scn = cfg.scenario()?;
    let n = *cfg
        .simulation
        .n
        .first()
        .ok_or_else(|| CliError::Config("simulation.n must list a sample size".into()))?;
    let sample = generate_sample(&scn, n, cfg.seed)?;
    let w = create(&cfg.out, "data.csv")?;
    simulation::write_sample(w, &sample)?;
    Ok(())
}

fn cmd_rates(cfg: &RunConfig) -> Result<(), CliError> {
    let designs = cfg.rate_designs()?;
    let fits = designs
        .iter()
        .map(diagnostics::synthetic_rate_experiment)
        .collect::<irgnm::Result<Vec<_>>>()?;
    let w = create(&cfg.out, "rate_fit.csv")?;
    diagnostics::write_rate_fits(w, &fits)?;
    for f in &fits {
        println!(
            "mu={} slope={:.4} (se {:.4}) predicted={:.4}",
            f.mu, f.fit.slope, f.fit.slope_se, f.predicted
        );
    }
    Ok(())
}

fn cmd_diagnose(cfg: &RunConfig) -> Result<(), CliError> {
    let scn = cfg.scenario()?;
    let ops = cfg.probe_operators()?;
    let settings = cfg.pipeline()?;

    let variance = ops
        .iter()
        .map(|&op| Ok(diagnostics::variance_scaling_probe(&scn, &cfg.variance_design(op)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    diagnostics::write_variance_scaling(create(&cfg.out, "variance_scaling.csv")?, &variance)?;
    for v in &variance {
        println!(
            "{}: n-slope {:.3} (se {:.3}), h-slope {:.3} (se {:.3})",
            v.operator.name(),
            v.n_fit.slope,
            v.n_fit.slope_se,
            v.h_fit.slope,
            v.h_fit.slope_se
        );
    }

    let op = ops.first().copied().unwrap_or(ProbeOperator::Ind);
    let conc = diagnostics::concentration_probe(&scn, &cfg.concentration_design(op)?)?;
    diagnostics::write_concentration(create(&cfg.out, "concentration.csv")?, &conc)?;
    println!("{}: concentration c = {:.3}", op.name(), conc.c_fit);

    let grid = scn.grid(cfg.diagnose.grid)?;
    let fields = simulation::exact_fields(&scn, grid)?;
    let truth = scn.phi_true_fn(grid.gx);
    let ind = IvProblem::ind(&fields, &truth, settings.w_mean)?;
    let lip = diagnostics::lipschitz_probe(
        &ind,
        &truth,
        cfg.diagnose.lipschitz_radius,
        cfg.diagnose.lipschitz_pairs,
        cfg.seed,
    )?;
    diagnostics::write_lipschitz(create(&cfg.out, "lipschitz.csv")?, &lip)?;
    println!("lipschitz: empirical {:.4e}, analytic bound {:.4e}", lip.empirical, lip.analytic);

    let phi0 = irgnm::GridFn::constant(grid.gx, fields.mean_y)?;
    match diagnostics::fit_problem_source_condition(&ind, &truth, &phi0) {
        Ok(fit) => {
            diagnostics::write_source_fit(create(&cfg.out, "source_fit.csv")?, &fit)?;
            println!("source condition: mu_hat {:.3}, rho_hat {:.3e}", fit.mu_hat, fit.rho_hat);
        }
        Err(e) => log::warn!("source-condition fit skipped: {e}"),
    }

    let design = cfg
        .rate_designs()?
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Config("rates.mu must list an exponent".into()))?;
    let sp = design.noisy_problem(design.deltas[0], cfg.seed)?;
    let icfg = design.irgnm_config();
    let run = irgnm::run_irgnm(&sp, &icfg)?;
    let path = diagnostics::decomposition_path(&sp, sp.oracle(), &run, &icfg)?;
    diagnostics::write_decomposition(create(&cfg.out, "decomposition.csv")?, &path)?;
    Ok(())
}
