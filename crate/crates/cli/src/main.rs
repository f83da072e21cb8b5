use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qcompress::bench::{run_bench, BenchConfig, Variant};
use qcompress::pipeline::{
    compress_archive, verify_report, CompressOptions, CompressionReport, PipelineConfig,
};
use qcompress::synth::{generate_archive, LayerSpec};
use qcompress::{Error, TensorArchive};
use serde::Serialize;

mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const MISMATCH: u8 = 4;
}

#[derive(Parser)]
#[command(
    name = "qcompress",
    version,
    about = "Compress dense weight tensors and measure the result"
)]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// More progress detail on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the compression pipeline over an archive.
    Compress(CompressArgs),
    /// List the tensors in an archive.
    Inspect { archive: PathBuf },
    /// Re-derive a report from the original and compressed archives.
    Verify {
        original: PathBuf,
        compressed: PathBuf,
        report: PathBuf,
    },
    /// Time dense, masked and factored matrix-vector products.
    Bench(BenchArgs),
    /// Write a seeded synthetic archive.
    Gen(GenArgs),
}

#[derive(Args)]
struct CompressArgs {
    input: PathBuf,
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Report path; defaults to `<output>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Layers compressed in parallel (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record per-layer wall time in the report (makes it non-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Sizes as MxNxR; repeatable.
    #[arg(long = "size", default_value = "2048x2048x128")]
    sizes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "dense,masked,factored")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Pruned fraction for the masked variant.
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write results as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// NAME=DxDx..[@RANK]; repeatable.
    #[arg(long = "layer")]
    layers: Vec<String>,
}

struct Failure {
    code: u8,
    message: String,
}

type CmdResult = Result<(), Failure>;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

/// Exit code for an error raised outside verification.
fn code_for(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_)
        | Error::UnknownLayers(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_) => exit::CONFIG,
        Error::Archive(_) | Error::Io(_) | Error::Json(_) => exit::IO,
        Error::Mismatch { .. } => exit::MISMATCH,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::Layer { .. } => exit::INTERNAL,
    }
}

fn from_err(err: Error) -> Failure {
    fail(code_for(&err), err.to_string())
}

fn with_path(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let code = code_for(&e);
        fail(code, format!("{}: {e}", path.display()))
    }
}

fn load_archive(path: &Path) -> Result<TensorArchive, Failure> {
    TensorArchive::load(path).map_err(with_path(path))
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| fail(exit::IO, format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn default_report_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn cmd_compress(cli: &Cli, args: &CompressArgs) -> CmdResult {
    let archive = load_archive(&args.input)?;
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| fail(exit::CONFIG, format!("{}: {e}", args.config.display())))?;
    let config = PipelineConfig::from_json(&text).map_err(from_err)?;
    let opts = CompressOptions {
        seed_override: args.seed,
        jobs: args.jobs,
        record_timings: args.timings,
    };
    if cli.verbose > 0 {
        eprintln!(
            "compressing {} layer(s) of {} with {} job(s)",
            config.layers.len(),
            args.input.display(),
            args.jobs
        );
    }
    let (out, report) = compress_archive(&archive, &config, &opts).map_err(from_err)?;
    out.save(&args.output).map_err(with_path(&args.output))?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| default_report_path(&args.output));
    write_file(&report_path, report.to_json().as_bytes())?;
    if cli.json {
        print_json(&report);
    } else {
        println!("{report}");
        println!(
            "wrote {} and {}",
            args.output.display(),
            report_path.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectRow {
    name: String,
    shape: Vec<usize>,
    params: usize,
    frobenius_norm: f64,
    sparsity: f64,
}

fn cmd_inspect(cli: &Cli, path: &Path) -> CmdResult {
    let archive = load_archive(path)?;
    let rows: Vec<InspectRow> = archive
        .entries()
        .iter()
        .map(|(name, t)| InspectRow {
            name: name.clone(),
            shape: t.shape().to_vec(),
            params: t.numel(),
            frobenius_norm: t.frobenius_norm(),
            sparsity: t.count_zeros() as f64 / t.numel() as f64,
        })
        .collect();
    if cli.json {
        print_json(&rows);
        return Ok(());
    }
    println!(
        "{:<28} {:<18} {:>10} {:>12} {:>9}",
        "name", "shape", "params", "frobenius", "sparsity"
    );
    for r in &rows {
        let shape = r
            .shape
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{:<28} {:<18} {:>10} {:>12.4} {:>9.4}",
            r.name, shape, r.params, r.frobenius_norm, r.sparsity
        );
    }
    println!(
        "{} tensor(s), {} parameter(s)",
        rows.len(),
        rows.iter().map(|r| r.params).sum::<usize>()
    );
    Ok(())
}

fn cmd_verify(cli: &Cli, original: &Path, compressed: &Path, report_path: &Path) -> CmdResult {
    let original_archive = load_archive(original)?;
    let compressed_archive = load_archive(compressed)?;
    let text = std::fs::read_to_string(report_path)
        .map_err(|e| fail(exit::IO, format!("{}: {e}", report_path.display())))?;
    let report = CompressionReport::from_json(&text).map_err(with_path(report_path))?;
    verify_report(&original_archive, &compressed_archive, &report).map_err(|e| {
        let code = match e.root() {
            Error::Archive(_) | Error::Io(_) | Error::Json(_) => exit::IO,
            _ => exit::MISMATCH,
        };
        fail(code, format!("verification failed: {e}"))
    })?;
    if cli.json {
        print_json(&serde_json::json!({"verified": true, "total_ratio": report.total_ratio}));
    } else {
        println!(
            "ok: {} layer(s), total ratio {:.2}×",
            report.per_layer.len(),
            report.total_ratio
        );
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<usize> = s.split('x').filter_map(|p| p.parse().ok()).collect();
    match parts.as_slice() {
        &[m, n, r] if s.split('x').count() == 3 => Ok((m, n, r)),
        _ => Err(fail(exit::CONFIG, format!("size {s:?}: expected MxNxR"))),
    }
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> CmdResult {
    let cfg = BenchConfig {
        sizes: args
            .sizes
            .iter()
            .map(|s| parse_size(s))
            .collect::<Result<_, _>>()?,
        variants: args
            .variants
            .iter()
            .map(|v| Variant::parse(v.trim()))
            .collect::<Result<_, _>>()
            .map_err(from_err)?,
        reps: args.reps,
        warmup: args.warmup,
        sparsity: args.sparsity,
        seed: args.seed,
    };
    let results = run_bench(&cfg).map_err(from_err)?;
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&results).expect("serializable");
        write_file(out, text.as_bytes())?;
    }
    if cli.json {
        print_json(&results);
        return Ok(());
    }
    println!(
        "{:<9} {:>6} {:>6} {:>5} {:>12} {:>12} {:>12} {:>12} {:>8}",
        "variant", "m", "n", "r", "flops", "median ns", "p10 ns", "p90 ns", "speedup"
    );
    for r in &results {
        println!(
            "{:<9} {:>6} {:>6} {:>5} {:>12} {:>12} {:>12} {:>12} {:>7.2}×",
            r.variant.to_string(),
            r.m,
            r.n,
            r.r,
            r.flops_model,
            r.median_ns,
            r.p10_ns,
            r.p90_ns,
            r.speedup_vs_dense
        );
    }
    Ok(())
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> CmdResult {
    let specs = args
        .layers
        .iter()
        .map(|s| LayerSpec::parse(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(from_err)?;
    let archive = generate_archive(&specs, args.seed).map_err(from_err)?;
    archive
        .save(&args.output)
        .map_err(with_path(&args.output))?;
    if cli.json {
        print_json(&serde_json::json!({"output": args.output, "tensors": archive.len()}));
    } else {
        println!(
            "wrote {} tensor(s) to {}",
            archive.len(),
            args.output.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compress(args) => cmd_compress(&cli, args),
        Command::Inspect { archive } => cmd_inspect(&cli, archive),
        Command::Verify {
            original,
            compressed,
            report,
        } => cmd_verify(&cli, original, compressed, report),
        Command::Bench(args) => cmd_bench(&cli, args),
        Command::Gen(args) => cmd_gen(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            if cli.json {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": f.message, "exit_code": f.code})
                );
            } else {
                eprintln!("qcompress: error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
