use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hidiff_cli::commands::{analyze, bench_attn, bench_unet, gen_weights, sample_cmd, thread_count};
use hidiff_cli::{Options, Run, RunConfig};

#[derive(Parser)]
#[command(name = "hidiff", version, about = "Resolution-aware U-Net and shifted-window attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic weights.
    GenWeights(Flags),
    /// Time global against windowed self-attention.
    BenchAttn(Flags),
    /// Per-operator latency of every plan the switch schedule uses.
    BenchUnet(Flags),
    /// Run the DDIM sampler with plan switching.
    Sample(Flags),
    /// Attention distance, duplication scores and feature maps.
    Analyze(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Weights file (default: <out>/weights.hidw).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output directory (default: the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-step block feature maps while sampling.
    #[arg(long)]
    dump_features: bool,
    /// Let benchmarks use all worker threads instead of one.
    #[arg(long)]
    parallel: bool,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(command: Command) -> hidiff_core::Result<String> {
    let (Command::GenWeights(f)
    | Command::BenchAttn(f)
    | Command::BenchUnet(f)
    | Command::Sample(f)
    | Command::Analyze(f)) = &command;
    let cfg = RunConfig::load(&f.config)?;
    let run = Run::new(
        cfg,
        Options {
            weights: f.weights.clone(),
            out: f.out.clone(),
            seed: f.seed,
            dump_features: f.dump_features,
            parallel: f.parallel,
        },
    );
    // a global pool sized by HIDIFF_THREADS bounds any work not run in an explicit pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(thread_count(true)).build_global();
    Ok(match command {
        Command::GenWeights(_) => format!("wrote {}", gen_weights(&run)?.display()),
        Command::BenchAttn(_) => format!("wrote {}", bench_attn(&run)?.display()),
        Command::BenchUnet(_) => {
            let paths = bench_unet(&run)?;
            let names: Vec<_> = paths.iter().map(|p| p.display().to_string()).collect();
            format!("wrote {}", names.join(", "))
        }
        Command::Sample(_) => {
            let meta = sample_cmd(&run)?;
            format!("sampled {} steps into {}", meta.steps, run.out.join(&meta.image).display())
        }
        Command::Analyze(_) => format!("wrote {} files", analyze(&run)?.files.len()),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("usage_error: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
