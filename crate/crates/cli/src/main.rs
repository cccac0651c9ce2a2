mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flatdecode::attention::AttentionMode;
use flatdecode::dispatch::KernelChoice;
use flatdecode::softmax::SyntheticDist;

#[derive(Parser, Debug)]
#[command(name = "flatdecode", version, about = "Decode-phase attention and flat GEMM kernels on the CPU")]
struct Cli {
    /// Worker threads for the kernels.
    #[arg(long, global = true, env = "FLATDECODE_WORKERS")]
    workers: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a unified scaling factor and safe band to a logit sample.
    Calibrate(CalibrateArgs),
    /// Time the three GEMM kernels and write a dispatch table.
    Profile(ProfileArgs),
    /// Run the property suites against their oracles.
    Verify(VerifyArgs),
    /// Run one toy transformer layer decode step and check it.
    Decode(DecodeArgs),
    /// Tile-width sweeps and attention timings.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true))]
struct CalibrateArgs {
    /// Text file of whitespace-separated logits.
    #[arg(long, group = "source")]
    samples: Option<PathBuf>,
    /// `normal:<mean>:<std>` or `uniform:<lo>:<hi>`.
    #[arg(long, group = "source")]
    synthetic: Option<SyntheticDist>,
    /// Draws taken from --synthetic.
    #[arg(long, default_value_t = 1_000_000)]
    count: usize,
    #[arg(long, default_value_t = 0.9999)]
    coverage: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the calibration line.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("which").required(true))]
struct ProfileArgs {
    /// Profile the four GEMM shapes of a model preset.
    #[arg(long, group = "which")]
    model: Option<String>,
    /// Comma-separated `N:K` shapes.
    #[arg(long, group = "which", value_delimiter = ',', value_parser = parse_nk)]
    shapes: Vec<(usize, usize)>,
    /// Divide the model dimensions by this factor.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Comma-separated batch sizes to time.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256")]
    m_sweep: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 2)]
    retries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dispatch table to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-point key=value records here.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Out-of-band rows added to the recomputation suite.
    #[arg(long, default_value_t = 0)]
    inject_faults: usize,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, default_value = "llama2-7b")]
    model: String,
    /// Divide hidden size, heads, FFN size and sequence length by this factor.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Tokens in the KV cache including the new one.
    #[arg(long, default_value_t = 1024)]
    seq: usize,
    /// Calibration file; fitted to this step's logits when absent.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Dispatch table; a quick profile of the layer's shapes runs when absent.
    #[arg(long, conflicts_with = "kernel")]
    table: Option<PathBuf>,
    /// Send every GEMM to one kernel instead of dispatching.
    #[arg(long)]
    kernel: Option<KernelChoice>,
    #[arg(long, default_value = "async")]
    mode: AttentionMode,
    /// KV-cache partitions per head.
    #[arg(long, default_value_t = 8)]
    partitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write key=value records here instead of stdout.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Gemm,
    Attn,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// gemm: `M:N:K`, attn: `batch:seq_len:head_dim`. Comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_triple)]
    shapes: Vec<(usize, usize, usize)>,
    /// B_N values for the gemm suite; powers of two up to N when absent.
    #[arg(long, value_delimiter = ',')]
    b_n: Vec<usize>,
    /// KV-cache partitions for the attn suite.
    #[arg(long, default_value_t = 8)]
    partitions: usize,
    #[arg(long, default_value_t = 7)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write key=value records here instead of stdout.
    #[arg(long)]
    records: Option<PathBuf>,
}

fn parse_nk(s: &str) -> Result<(usize, usize), String> {
    match s.split(':').map(str::parse::<usize>).collect::<Result<Vec<_>, _>>().as_deref() {
        Ok(&[n, k]) if n > 0 && k > 0 => Ok((n, k)),
        _ => Err(format!("expected N:K with positive integers, got {s:?}")),
    }
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), String> {
    match s.split(':').map(str::parse::<usize>).collect::<Result<Vec<_>, _>>().as_deref() {
        Ok(&[a, b, c]) if a > 0 && b > 0 && c > 0 => Ok((a, b, c)),
        _ => Err(format!("expected three positive integers a:b:c, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let workers = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        Some(w) => {
            // the library reads the same variable when it needs a count
            std::env::set_var("FLATDECODE_WORKERS", w.to_string());
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
            w
        }
        None => rayon::current_num_threads(),
    };

    let res = match &cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Profile(a) => commands::profile(a, workers),
        Command::Verify(a) => commands::verify(a),
        Command::Decode(a) => commands::decode(a, workers),
        Command::Bench(a) => commands::bench(a, workers),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
