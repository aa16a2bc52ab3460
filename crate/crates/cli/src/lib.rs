//! Command-line surface over `iterdet::pipeline`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use iterdet::pipeline::{self, parse_iterations, parse_mode, RunConfig};
use iterdet::Error;

#[derive(Debug, Parser)]
#[command(name = "iterdet", version, about = "Iterative history-aware detection on synthetic crowded scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scene, init and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/ and val/ splits and print crowding statistics.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for generation; output does not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the detector and write a checkpoint plus a loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory containing train/.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs (overrides the config).
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Evaluate on val/ and write report.json, report.txt and CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Iteration counts: "2", "1,2" or "1..3".
        #[arg(long)]
        iterations: Option<String>,
        /// standard | one-per-iter
        #[arg(long)]
        mode: Option<String>,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect on one PNG and write an SVG overlay colored by iteration.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        iterations: Option<u32>,
        #[arg(long)]
        mode: Option<String>,
        /// SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit status for an error: 2 config, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 4,
        Error::Data { .. } | Error::Io { .. } | Error::Shape { .. } | Error::Metric(_) => 3,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_iteration_flags(cfg: &mut RunConfig, iterations: Option<u32>, mode: Option<&str>) -> Result<(), Error> {
    if let Some(m) = iterations {
        cfg.iter.max_iterations = m;
    }
    if let Some(mode) = mode {
        cfg.iter.mode = parse_mode(mode)?;
    }
    cfg.validate()
}

/// Runs one command, returning what it prints on success.
pub fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::GenData { common, out, jobs } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or(cfg.paths.data_dir.clone());
            let stats = pipeline::gen_data(&cfg, &out, jobs)?;
            Ok(stats.to_text())
        }
        Command::Train { common, data, out, resume, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = data.unwrap_or(cfg.paths.data_dir.clone());
            let out = out.unwrap_or(cfg.paths.checkpoint.clone());
            let losses = pipeline::train(&cfg, &data, &out, resume.as_deref())?;
            let last = losses.last().map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
            Ok(format!(
                "trained {} epoch(s), final loss {last}\ncheckpoint {}\nloss log {}\n",
                losses.len(),
                out.display(),
                pipeline::loss_csv_path(&out).display()
            ))
        }
        Command::Eval { common, checkpoint, data, iterations, mode, out } => {
            let mut cfg = load_config(&common)?;
            let list = iterations.as_deref().map(parse_iterations).transpose()?.unwrap_or_default();
            apply_iteration_flags(&mut cfg, list.iter().copied().max(), mode.as_deref())?;
            let ckpt = checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
            let data = data.unwrap_or(cfg.paths.data_dir.clone());
            let out = out.unwrap_or(cfg.paths.eval_dir.clone());
            let table = pipeline::evaluate(&cfg, &ckpt, &data, &out, &list)?;
            Ok(table.to_text())
        }
        Command::Viz { common, checkpoint, image, iterations, mode, out } => {
            let mut cfg = load_config(&common)?;
            apply_iteration_flags(&mut cfg, iterations, mode.as_deref())?;
            let ckpt = checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
            let result = pipeline::viz(&cfg, &ckpt, &image, &out)?;
            Ok(format!(
                "{} box(es) over {} pass(es), per pass {:?}\nwrote {}\n",
                result.boxes.len(),
                result.iterations_run,
                result.per_iteration_counts,
                out.display()
            ))
        }
    }
}
