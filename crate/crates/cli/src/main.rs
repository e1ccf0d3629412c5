use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kernelvis::commands::{
    bench_frames, checkpoint_config, cmd_ablate, cmd_bench, cmd_eval, cmd_generate, cmd_infer, cmd_train, format_ablation,
    format_report, load_model, AblationGrid, InferOptions, RESULTS_FILE,
};
use kernelvis::config::RunConfig;
use kernelvis::rle::GT_FILE;
use kernelvis::Error;

const THREADS_VAR: &str = "KERNELVIS_THREADS";

#[derive(Parser)]
#[command(name = "kernelvis", version, about = "Query-based video instance segmentation on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint directory.
    Train {
        config: PathBuf,
        out: PathBuf,
    },
    /// Track a clip directory and write a result manifest.
    Infer {
        checkpoint: PathBuf,
        input: PathBuf,
        out: PathBuf,
        /// Config to use instead of the one stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Keyframe interval; 1 decodes every frame.
        #[arg(long = "reuse-T")]
        reuse_t: Option<usize>,
        /// Also write one grayscale image per tracked instance.
        #[arg(long)]
        masks: bool,
    },
    /// Score a result manifest against ground truth.
    Eval {
        results: PathBuf,
        /// A ground-truth manifest or a clip directory containing one.
        gt: PathBuf,
    },
    /// Per-frame FLOPs and wall time on a synthetic clip.
    Bench {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        /// One or more keyframe intervals, comma separated.
        #[arg(long = "reuse-T", value_delimiter = ',', default_value = "1")]
        reuse_t: Vec<usize>,
    },
    /// Train and evaluate every variant in a grid file.
    Ablate {
        grid: PathBuf,
        /// Keep each variant's checkpoint under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export synthetic clips with ground truth.
    Gen {
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidConfig(_) => 2,
        Error::Checkpoint(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn load_config(path: &Path) -> kernelvis::Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Config { line, msg } => Error::Config { line, msg: format!("{}: {msg}", path.display()) },
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_checkpoint(
    checkpoint: &Path,
    config: Option<&Path>,
) -> kernelvis::Result<(RunConfig, kernelvis::model::Network, kernelvis::ParamStore)> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => checkpoint_config(checkpoint, None)?,
    };
    let (net, store) = load_model(&cfg, checkpoint)?;
    Ok((cfg, net, store))
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(e.to_string()))
}

fn run(cli: Cli) -> kernelvis::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let report = cmd_train(&cfg, &out)?;
            let last = report.log.last().map_or(f64::NAN, |l| l.loss);
            println!("iterations={} final_loss={last} checkpoint={}", report.log.len(), out.display());
        }
        Command::Infer { checkpoint, input, out, config, threshold, reuse_t, masks } => {
            let (cfg, net, store) = load_checkpoint(&checkpoint, config.as_deref())?;
            let opts = InferOptions { threshold, reuse_interval: reuse_t, render_masks: masks };
            let results = cmd_infer(&cfg, &net, &store, &input, &out, &opts)?;
            let instances: usize = results.iter().map(|r| r.instances.len()).sum();
            println!("frames={} instances={instances} results={}", results.len(), out.join(RESULTS_FILE).display());
        }
        Command::Eval { results, gt } => {
            let gt = if gt.is_dir() { gt.join(GT_FILE) } else { gt };
            print!("{}", format_report(&cmd_eval(&results, &gt)?));
        }
        Command::Bench { checkpoint, config, size, frames, reuse_t } => {
            let (cfg, net, store) = load_checkpoint(&checkpoint, config.as_deref())?;
            let clip = bench_frames(&cfg, size, frames)?;
            for t in reuse_t {
                print!("{}", cmd_bench(&net, &store, &clip, t)?.format());
            }
        }
        Command::Ablate { grid, out } => {
            let text = std::fs::read_to_string(&grid)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", grid.display()))))?;
            let grid = AblationGrid::parse(&text)?;
            let rows = cmd_ablate(&grid, out.as_deref(), |m| eprintln!("{m}"))?;
            print!("{}", format_ablation(&rows));
        }
        Command::Gen { out, config, clips, seed } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            cmd_generate(&cfg, &out, clips, seed)?;
            println!("clips={clips} out={}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
