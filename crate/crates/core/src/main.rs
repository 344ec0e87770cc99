use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mrdis::config::RunConfig;
use mrdis::disambig::SoftLoss;
use mrdis::{pipeline, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "mrdis",
    version,
    about = "Multi-resolution CNN training with label disambiguation"
)]
struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long = "soft-loss", global = true)]
    soft_loss: Option<SoftLoss>,
    /// Comma-separated image sizes, e.g. 32,48.
    #[arg(long, global = true, value_delimiter = ',')]
    resolutions: Option<Vec<usize>>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train/val/test splits into the data directory.
    GenData,
    /// Train every roster resolution (or one) on the train split.
    Train {
        #[arg(long)]
        resolution: Option<usize>,
        /// Train on super categories from this partition.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Validation confusion matrix of a checkpoint.
    Confusion {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Merge confusable classes of a confusion matrix into a partition.
    Merge {
        #[arg(long)]
        confusion: PathBuf,
    },
    /// Train with an auxiliary head on a knowledge network's soft labels.
    Distill {
        #[arg(long)]
        knowledge: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or existing score dumps on a split.
    Eval {
        #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
        checkpoint: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        dump: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Spread super-category scores back over the original classes.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Average score dumps and evaluate the result.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        dump: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Convert a directory of class subdirectories of PNGs into a split file.
    ImportPng {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.tau {
        cfg.tau = t;
    }
    if let Some(l) = cli.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = cli.soft_loss {
        cfg.soft_loss = s;
    }
    if let Some(r) = &cli.resolutions {
        cfg.resolutions = r.clone();
        if cfg.networks.len() != r.len() {
            cfg.networks.clear();
        }
        if cfg.fusion_weights.len() != r.len() {
            cfg.fusion_weights.clear();
        }
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn roster(cfg: &RunConfig, one: Option<usize>) -> Vec<usize> {
    one.map(|r| vec![r]).unwrap_or_else(|| cfg.resolutions.clone())
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            cfg.validate()?;
            let paths = pipeline::gen_data(&cfg)?;
            print(json!({ "written": paths }));
        }
        Command::Train { resolution, partition } => {
            if partition.is_some() {
                cfg.partition = partition;
            }
            cfg.validate()?;
            for size in roster(&cfg, resolution) {
                let a = pipeline::train(&cfg, size)?;
                print(json!({ "checkpoint": a.checkpoint, "log": a.log }));
            }
        }
        Command::Confusion { checkpoint, split } => {
            let (path, _) = pipeline::confusion(&cfg, &checkpoint, &split)?;
            print(json!({ "confusion": path }));
        }
        Command::Merge { confusion } => {
            cfg.validate()?;
            let (path, p) = pipeline::merge(&cfg, &confusion)?;
            print(json!({ "partition": path, "groups": p.groups }));
        }
        Command::Distill {
            knowledge,
            resolution,
            partition,
        } => {
            if partition.is_some() {
                cfg.partition = partition;
            }
            if knowledge.is_some() {
                cfg.knowledge = knowledge;
            }
            cfg.validate()?;
            let k = cfg
                .knowledge
                .clone()
                .ok_or_else(|| Error::InvalidArgument("distill needs a knowledge checkpoint".into()))?;
            for size in roster(&cfg, resolution) {
                let a = pipeline::distill(&cfg, size, &k)?;
                print(json!({ "checkpoint": a.checkpoint, "log": a.log }));
            }
        }
        Command::Eval {
            checkpoint,
            dump,
            split,
            partition,
        } => {
            let partition = partition.or_else(|| cfg.partition.clone());
            if let Some(ck) = checkpoint {
                let (path, r) = pipeline::eval_checkpoint(&cfg, &ck, &split, partition.as_deref())?;
                print(json!({ "dump": path, "top1_error": r.top1_error, "top5_error": r.top5_error }));
            }
            for d in dump {
                let r = pipeline::eval_dump(&cfg, &d, &split, partition.as_deref())?;
                print(json!({ "dump": d, "top1_error": r.top1_error, "top5_error": r.top5_error }));
            }
        }
        Command::Fuse {
            dump,
            weights,
            split,
            partition,
        } => {
            let weights = weights.or_else(|| (!cfg.fusion_weights.is_empty()).then(|| cfg.fusion_weights.clone()));
            let (path, r) = pipeline::fuse(&cfg, &dump, weights.as_deref(), &split, partition.as_deref())?;
            print(json!({ "dump": path, "top1_error": r.top1_error, "top5_error": r.top5_error }));
        }
        Command::ImportPng { dir, size, split } => {
            let (path, classes) = pipeline::import_png(&cfg, Path::new(&dir), size, &split)?;
            print(json!({ "dataset": path, "classes": classes }));
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MRDIS_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidArgument(format!("MRDIS_THREADS must be a positive integer, got {v:?}"))
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        return fail(e.kind(), e.to_string());
    }
    ExitCode::SUCCESS
}
