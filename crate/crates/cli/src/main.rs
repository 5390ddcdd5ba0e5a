use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

/// Device spectrum correction: estimate, apply and verify per-frequency
/// gains between recording devices.
#[derive(Debug, Parser)]
#[command(name = "speccor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate correction coefficients for every non-reference device.
    Estimate(EstimateArgs),
    /// Apply coefficients to a WAV file in the STFT domain.
    Apply(ApplyArgs),
    /// Design a linear-phase least-squares FIR filter from coefficients.
    DesignFir(DesignFirArgs),
    /// Run a WAV file through a FIR filter.
    Filter(FilterArgs),
    /// Generate a simulated multi-device dataset with known responses.
    Simulate(SimulateArgs),
    /// Extract log-mel features, optionally corrected and standardized.
    Features(FeaturesArgs),
    /// Score estimated coefficients against simulator ground truth.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct StftArgs {
    #[arg(long, default_value_t = 2048)]
    n_fft: usize,
    #[arg(long, default_value_t = 512)]
    hop: usize,
    #[arg(long, default_value = "hann")]
    window: String,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Device to map onto, or `none` for reference-free coefficients.
    #[arg(long)]
    reference_device: String,
    /// Pair recordings through the manifest's group column.
    #[arg(long)]
    aligned: bool,
    #[command(flatten)]
    stft: StftArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Encoding {
    Float32,
    Pcm16,
}

impl From<Encoding> for speccor_core::WavEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Float32 => Self::Float32,
            Encoding::Pcm16 => Self::Pcm16,
        }
    }
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    coeffs: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hop for resynthesis; defaults to a quarter of the coefficients' n_fft.
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long, value_enum, default_value_t = Encoding::Float32)]
    encoding: Encoding,
}

#[derive(Debug, Args)]
pub struct DesignFirArgs {
    #[arg(long)]
    coeffs: PathBuf,
    #[arg(long, default_value_t = speccor_core::fir::DEFAULT_NUM_TAPS)]
    taps: usize,
    #[arg(long, default_value_t = speccor_core::fir::DEFAULT_CLAMP_DB)]
    clamp_db: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    filter: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep the filter's group delay instead of trimming it.
    #[arg(long)]
    no_delay_compensation: bool,
    #[arg(long, value_enum, default_value_t = Encoding::Float32)]
    encoding: Encoding,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Standardize {
    Global,
    PerDevice,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of coefficient files; each device uses the file whose
    /// source is that device.
    #[arg(long)]
    coeffs_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    standardize: Option<Standardize>,
    #[command(flatten)]
    stft: StftArgs,
    #[arg(long, default_value_t = speccor_core::features::DEFAULT_N_MELS)]
    n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    f_min: f64,
    /// Upper mel edge; defaults to Nyquist.
    #[arg(long)]
    f_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    sim_dir: PathBuf,
    #[arg(long)]
    coeffs_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    tolerance_db: f64,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SPECCOR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid SPECCOR_THREADS '{raw}': expected a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("SPECCOR_THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Estimate(a) => commands::estimate(&a),
        Command::Apply(a) => commands::apply(&a),
        Command::DesignFir(a) => commands::design_fir(&a),
        Command::Filter(a) => commands::filter(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Features(a) => commands::features(&a),
        Command::Verify(a) => commands::verify(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("speccor: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
