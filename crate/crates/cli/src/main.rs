use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imaudit::changepoint::ScanMethod;
use imaudit::pipeline::output::{
    assignments_csv, audit_report_csv, audit_curves_csv, counts_csv, dendrogram_json, fpca_json, indices_csv,
    interpolated_csv, rates_csv, scores_csv, write_artifact,
};
use imaudit::pipeline::{
    apply_merges, audit_round, cluster_scores, ingest, interpolate, rate_table, run_fpca, run_full, AuditOutcome,
    DistrictCounts, InterpolatedTable, PipelineConfig, PipelineError, Stage,
};
use imaudit::simulate::{format_table, Scenario, StudyPlan, StudyResult};

/// Audit annual count series for boundary-interpolation errors, then cluster
/// the corrected rate curves.
#[derive(Debug, Parser)]
#[command(name = "imaudit", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Boundary-consistent counts: interpolated_counts.csv.
    Interpolate,
    /// Ranked changepoint audit: audit_report.csv, audit_curves.csv.
    Audit,
    /// Apply configured merges and re-audit: merged_counts.csv plus both audit rounds.
    Merge,
    /// Infant mortality rates after merges: rates.csv.
    Rates,
    /// Functional PCA of the rate curves: fpca_model.json, fpca_scores.csv.
    Fpca,
    /// Cluster fPCA scores: cluster_assignments.csv, cluster_indices.csv, dendrogram.json.
    Cluster,
    /// Monte Carlo study of detection accuracy and power.
    Simulate(SimulateArgs),
    /// Every stage, with a manifest of digests.
    Run,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    scenario: u8,
    /// Change times, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [25usize, 150])]
    tau: Vec<usize>,
    /// Change factors, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.8, 1.2, 1.5])]
    factor: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Null replications used to calibrate the threshold.
    #[arg(long, default_value_t = 1000)]
    calibration_reps: usize,
    /// 1: level change; 2: level or trend change.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    method: u8,
    /// Series length.
    #[arg(long, default_value_t = 200)]
    length: usize,
}

#[derive(Debug)]
enum CliError {
    Pipeline(PipelineError),
    Usage(String),
    Simulate(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "[config] {m}"),
            CliError::Simulate(m) => write!(f, "[simulate] {m}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    if let Command::Simulate(args) = &cli.command {
        return simulate(args, cli.seed.unwrap_or(0), cli.out.as_deref());
    }
    let config = load_config(cli)?;
    match cli.command {
        Command::Interpolate => {
            let table = interpolated(&config)?;
            emit(&config, &[("interpolated_counts.csv", interpolated_csv(&table)?)])
        }
        Command::Audit => {
            let table = interpolated(&config)?;
            let first = audit_round(&config, &table.districts, 1)?;
            print_ranking(&first);
            let audits = [first];
            emit(
                &config,
                &[
                    ("audit_report.csv", audit_report_csv(&audits)?),
                    ("audit_curves.csv", audit_curves_csv(&audits)?),
                ],
            )
        }
        Command::Merge => {
            let table = interpolated(&config)?;
            let first = audit_round(&config, &table.districts, 1)?;
            let merged = apply_merges(table.districts, &config.merges)?;
            let second = audit_round(&config, &merged, 2)?;
            print_ranking(&second);
            let audits = [first, second];
            emit(
                &config,
                &[
                    ("merged_counts.csv", counts_csv(&merged)?),
                    ("audit_report.csv", audit_report_csv(&audits)?),
                    ("audit_curves.csv", audit_curves_csv(&audits)?),
                ],
            )
        }
        Command::Rates => {
            let merged = merged(&config)?;
            emit(&config, &[("rates.csv", rates_csv(&merged)?)])
        }
        Command::Fpca => {
            let merged = merged(&config)?;
            let (model, skipped) = run_fpca(&rate_table(&merged), &config.fpca, config.period())?;
            report_skipped(&skipped);
            let explained: f64 = model.variance_explained.iter().sum();
            println!("{} curves, {} components explain {:.1}%", model.scores.len(), model.components(), 100.0 * explained);
            emit(&config, &[("fpca_model.json", fpca_json(&model)?), ("fpca_scores.csv", scores_csv(&model)?)])
        }
        Command::Cluster => {
            let merged = merged(&config)?;
            let (model, skipped) = run_fpca(&rate_table(&merged), &config.fpca, config.period())?;
            report_skipped(&skipped);
            let clusters = cluster_scores(&model, &config.cluster, config.seed)?;
            println!("{} curves in {} clusters", clusters.district_ids.len(), clusters.assignment.k);
            emit(
                &config,
                &[
                    ("cluster_assignments.csv", assignments_csv(&clusters)?),
                    ("cluster_indices.csv", indices_csv(&clusters)?),
                    ("dendrogram.json", dendrogram_json(&clusters)?),
                ],
            )
        }
        Command::Run => {
            let summary = run_full(&config)?;
            if let Some(first) = summary.audits.first() {
                print_ranking(first);
            }
            println!(
                "wrote {} artifacts and manifest.json to {}",
                summary.manifest.artifacts.len(),
                summary.out_dir.display()
            );
            Ok(())
        }
        Command::Simulate(_) => unreachable!("handled above"),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = absolute(out)?;
    }
    Ok(config)
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| PipelineError::io(Stage::Output, ".", e))?;
    Ok(cwd.join(path))
}

fn interpolated(config: &PipelineConfig) -> Result<InterpolatedTable, CliError> {
    let data = ingest(config)?;
    Ok(interpolate(&data, config.inputs.epoch_policy, config.period())?)
}

fn merged(config: &PipelineConfig) -> Result<Vec<DistrictCounts>, CliError> {
    let table = interpolated(config)?;
    Ok(apply_merges(table.districts, &config.merges)?)
}

fn emit(config: &PipelineConfig, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    let dir = config.resolve(&config.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(Stage::Output, &dir, e))?;
    for (name, bytes) in files {
        write_artifact(&dir, name, bytes)?;
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn print_ranking(outcome: &AuditOutcome) {
    let report = &outcome.report;
    println!("audit round {}: {} districts ranked", outcome.round, report.entries.len());
    for (rank, e) in report.entries.iter().take(10).enumerate() {
        let near = e.nearest_change.map_or_else(|| "-".to_string(), |y| y.to_string());
        let flag = match e.exceeds_threshold {
            Some(true) => " *",
            _ => "",
        };
        println!("{:>4}  {:<16} tau {:>5}  T {:>10.3}  nearest change {near}{flag}", rank + 1, e.district_id, e.tau_hat, e.t_max);
    }
    if let Some(t) = report.threshold {
        println!("threshold {t:.3} (* exceeds)");
    }
    for (district, err) in &outcome.failures {
        log::warn!("audit round {}: {district} not scanned: {err}", outcome.round);
    }
}

fn report_skipped(skipped: &[(String, String)]) {
    for (district, reason) in skipped {
        log::warn!("curve {district} left out of fPCA: {reason}");
    }
}

fn simulate(args: &SimulateArgs, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let scenario = Scenario::from_id(args.scenario).ok_or_else(|| CliError::Simulate("unknown scenario".into()))?;
    let method = ScanMethod::from_number(args.method).ok_or_else(|| CliError::Simulate("unknown method".into()))?;
    if let Some(&tau) = args.tau.iter().find(|&&t| t == 0 || t >= args.length) {
        return Err(CliError::Simulate(format!("tau {tau} outside (0, {})", args.length)));
    }
    let mut plan = StudyPlan::table(scenario, method, args.reps, seed);
    plan.taus = args.tau.clone();
    plan.factors = args.factor.clone();
    plan.n = args.length;
    plan.calibration_reps = args.calibration_reps;
    let (calibration, result) = plan.run().map_err(CliError::Simulate)?;

    let csv = study_csv(&result).map_err(|e| CliError::Simulate(e.to_string()))?;
    let table = format!(
        "scenario {} method {} ({} replications, threshold {:.3})\n{}",
        scenario.id(),
        method.number(),
        args.reps,
        calibration.threshold,
        format_table(&result)
    );
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(Stage::Output, dir, e))?;
            let name = format!("simulation_s{}_m{}.csv", scenario.id(), method.number());
            write_artifact(dir, &name, &csv)?;
            print!("{table}");
            println!("wrote {}", dir.join(name).display());
        }
        None => {
            std::io::stdout()
                .write_all(&csv)
                .map_err(|e| PipelineError::io(Stage::Output, "stdout", e))?;
            eprint!("{table}");
        }
    }
    Ok(())
}

fn study_csv(result: &StudyResult) -> csv::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for cell in &result.cells {
        w.serialize(cell)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}
