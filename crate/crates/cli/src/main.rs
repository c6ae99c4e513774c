use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsel::data::{synth_generate, write_csv, SynthParams};
use fedsel::sim::{
    run_experiment_logged, serialize_report, sweep, write_event_log, ReportFormat, RunOptions,
};
use fedsel::{Error, Result};

mod input;
mod summarize;

#[derive(Parser)]
#[command(name = "fedsel", version, about = "Federated model selection experiments on streaming devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic non-IID dataset as CSV.
    GenData(GenDataArgs),
    /// Run every selected strategy once.
    Run(RunArgs),
    /// Run the grid block of the config.
    Sweep(RunArgs),
    /// Build comparison tables from report files.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of devices.
    #[arg(long)]
    k: usize,
    /// Samples per device.
    #[arg(long)]
    t: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian target noise.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    heterogeneity: f64,
    /// Output CSV; a `.stats.json` sidecar is written next to it.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long, default_value = "out")]
    output_dir: PathBuf,
    /// `key=value`, repeatable. `grid.<list>=[...]` sets a grid list.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Comma separated strategy names.
    #[arg(long)]
    strategies: Option<String>,
    /// `at=<t>,kind=<kind>,mag=<m>`.
    #[arg(long)]
    drift: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files or directories holding them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long, default_value = "summary")]
    output_dir: PathBuf,
    /// Also write whitespace separated `.dat` files.
    #[arg(long)]
    gnuplot: bool,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn gen_data(args: &GenDataArgs) -> Result<ExitCode> {
    for (flag, ok) in [
        ("--k", args.k > 0),
        ("--t", args.t > 0),
        ("--d", args.d > 0),
        ("--noise", args.noise >= 0.0 && args.noise.is_finite()),
        ("--heterogeneity", args.heterogeneity >= 0.0 && args.heterogeneity.is_finite()),
    ] {
        if !ok {
            return Err(Error::Config(format!("{flag} must be positive")));
        }
    }
    let params = SynthParams {
        devices: args.k,
        steps: args.t,
        d: args.d,
        noise_sigma: args.noise,
        heterogeneity: args.heterogeneity,
        seed: args.seed,
        ..Default::default()
    };
    let data = synth_generate(&params)?;
    if let Some(dir) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv(&data.streams, &args.output)?;
    let stats = serde_json::json!({ "K": args.k, "T": args.t, "d": args.d, "seed": args.seed, "params": params });
    let sidecar = args.output.with_extension("stats.json");
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&sidecar, text).map_err(|e| Error::Io { path: sidecar.clone(), source: e })?;
    log::info!("wrote {} rows to {}", args.k * args.t, args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn load(args: &RunArgs) -> Result<input::Loaded> {
    input::load(
        &args.config,
        &input::LoadOptions {
            overrides: &args.overrides,
            strategies: args.strategies.as_deref(),
            drift: args.drift.as_deref(),
        },
    )
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let loaded = load(args)?;
    let opts = RunOptions { workers: args.workers, evaluate_checkpoints: true };
    let (report, events) = run_experiment_logged(&loaded.cfg, &loaded.data, &loaded.strategies, opts)?;
    create_dir(&args.output_dir)?;
    serialize_report(&report, ReportFormat::Json, &args.output_dir.join("report.json"))?;
    serialize_report(&report, ReportFormat::Csv, &args.output_dir.join("report.csv"))?;
    write_event_log(&events, &args.output_dir.join("events.jsonl"))?;
    summarize::print_summary(&report);
    Ok(ExitCode::SUCCESS)
}

fn run_sweep(args: &RunArgs) -> Result<ExitCode> {
    let loaded = load(args)?;
    let grid = loaded
        .grid
        .ok_or_else(|| Error::Config("sweep needs a grid block in the config".into()))?;
    let opts = RunOptions { workers: args.workers, evaluate_checkpoints: true };
    let entries = sweep(&loaded.cfg, &grid, &loaded.data, &loaded.strategies, opts)?;

    let reports_dir = args.output_dir.join("reports");
    create_dir(&reports_dir)?;
    let index_path = args.output_dir.join("index.csv");
    let csv_err = |source| Error::Csv { path: index_path.clone(), source };
    let mut index = csv::Writer::from_path(&index_path).map_err(csv_err)?;
    index
        .write_record(["run", "U", "M", "s_interval", "beta", "status", "file", "error"])
        .map_err(csv_err)?;
    let mut failed = 0;
    for (i, entry) in entries.iter().enumerate() {
        let p = |k: &str| entry.params.get(k).map(|v| v.to_string()).unwrap_or_default();
        let (status, file, error) = match &entry.outcome {
            Ok(report) => {
                let name = format!("run_{i:04}.json");
                serialize_report(report, ReportFormat::Json, &reports_dir.join(&name))?;
                ("ok", format!("reports/{name}"), String::new())
            }
            Err(e) => {
                failed += 1;
                log::error!("{e}");
                ("failed", String::new(), e.clone())
            }
        };
        index
            .write_record([i.to_string(), p("U"), p("M"), p("s_interval"), p("beta"), status.into(), file, error])
            .map_err(csv_err)?;
    }
    index.flush().map_err(|e| Error::Io { path: index_path.clone(), source: e })?;
    println!("{} runs, {} failed, index at {}", entries.len(), failed, index_path.display());
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let files = summarize::collect_inputs(&args.inputs)?;
    let reports = summarize::load_reports(&files)?;
    create_dir(&args.output_dir)?;
    for path in summarize::write_tables(&reports, &args.output_dir, args.gnuplot)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
