//! `efl`: batch driver for energy-field analysis.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use energy_field::{DwtDepth, OutputFormat, RunConfig, SynthKind};

#[derive(Parser, Debug)]
#[command(name = "efl", version, about = "Energy-field analysis of softmax attention heads")]
struct Cli {
    /// Worker threads (defaults to EFL_WORKERS, then the number of CPUs).
    #[arg(long, global = true, env = "EFL_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analyze every head in a manifest and write per-head and aggregate reports.
    Analyze(AnalyzeArgs),
    /// Run the invariant checks and print per-check counts.
    Verify(VerifyArgs),
    /// Generate synthetic heads as dumps plus a manifest.
    Synth(SynthArgs),
    /// Read key-norm records as NDJSON and emit mu_K alerts.
    Monitor(MonitorArgs),
    /// Emit CSV tables for plotting.
    Plotdata(PlotdataArgs),
}

#[derive(Args, Debug, Clone)]
struct AnalysisOpts {
    /// Largest autocovariance lag reported.
    #[arg(long, default_value_t = 4096)]
    tau_max: usize,
    /// Wavelet depth: auto, full, or a level count.
    #[arg(long, default_value = "auto")]
    dwt_depth: DwtDepth,
    /// Ranks at which fidelity is evaluated.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    fidelity_rs: Vec<usize>,
    #[arg(long, default_value_t = 5.0)]
    mu_k_threshold: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: AnalysisOpts,
    #[arg(long, value_delimiter = ',', default_value = "json")]
    format: Vec<OutputFormat>,
    #[arg(long, hide = true)]
    inject_rowsum_bug: bool,
}

#[derive(Args, Debug)]
struct SynthSelection {
    #[arg(long, default_value = "gaussian")]
    kind: SynthKind,
    /// Context length L.
    #[arg(long = "len")]
    len: Option<usize>,
    #[arg(long = "d-h")]
    d_h: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of heads, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    sink_strength: Option<f64>,
    #[arg(long)]
    concentration_factor: Option<f64>,
    #[arg(long)]
    target_rank: Option<usize>,
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    target_position: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Manifest to verify; when absent, synthetic heads are generated.
    #[arg(long, conflicts_with = "len")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthSelection,
    #[command(flatten)]
    opts: AnalysisOpts,
    /// Negative control: corrupts row sums before checking.
    #[arg(long, hide = true)]
    inject_rowsum_bug: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    synth: SynthSelection,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "f64")]
    dtype: energy_field::Dtype,
}

#[derive(Args, Debug)]
struct MonitorArgs {
    /// NDJSON input; `-` or absent reads stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Alert output; absent writes stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    mu_k_threshold: f64,
}

#[derive(Args, Debug)]
struct PlotdataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Manifest index of the head to plot.
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "field_contour,wavelet_spectrum,bridge_endpoints,fidelity_curves,mu_k_vs_size"
    )]
    which: Vec<commands::PlotKind>,
    #[command(flatten)]
    opts: AnalysisOpts,
}

impl AnalysisOpts {
    fn config(&self, workers: Option<usize>) -> RunConfig {
        RunConfig {
            tau_max: self.tau_max,
            dwt_depth: self.dwt_depth,
            fidelity_rs: self.fidelity_rs.clone(),
            mu_k_threshold: self.mu_k_threshold,
            workers,
            ..RunConfig::default()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors share the I/O-and-schema code; 2 is reserved for
            // invariant violations.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a, cli.workers),
        Command::Verify(a) => commands::verify(a, cli.workers),
        Command::Synth(a) => commands::synth(a),
        Command::Monitor(a) => commands::monitor(a),
        Command::Plotdata(a) => commands::plotdata(a, cli.workers),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
