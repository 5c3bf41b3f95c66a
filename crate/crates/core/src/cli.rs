//! Command-line entry points. Exit codes: 0 on success, 1 on usage or
//! configuration errors, 2 on data errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff_optim::{read_checkpoint, write_checkpoint};
use crate::config::Config;
use crate::dataio::{generate, load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::evalkit::{ground_truth, map_at, run_ablation, AblationVariant};
use crate::gradcheck::{gradient_suite, SuiteConfig};
use crate::localization::{infer_dataset, read_detections, write_detections};
use crate::pipeline::{train, write_loss_log, FtclModel};

#[derive(Parser, Debug)]
#[command(name = "ftcl", version, about = "Fine-grained temporal contrastive learning for weakly-supervised action localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic benchmark (train/test manifests and feature files).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train on a manifest and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Localize actions in every video of a manifest (JSON lines output).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against a manifest's ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metrics JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional metrics CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate loss-ablation variants over several seeds.
    Ablate {
        /// Training manifest; a synthetic benchmark is generated when absent.
        #[arg(long, requires = "test")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_fsd,no_lcs,backbone_only")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare analytic gradients of all losses with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::Generate { out, n_train, n_test } => {
            if let Some(n) = n_train {
                cfg.synthetic.n_train = n;
            }
            if let Some(n) = n_test {
                cfg.synthetic.n_test = n;
            }
            let data = generate(&cfg.synthetic)?;
            let train_path = save_dataset(&out, "train", &data.train)?;
            let test_path = save_dataset(&out, "test", &data.test)?;
            println!("{}\n{}", train_path.display(), test_path.display());
        }
        Command::Train {
            manifest,
            checkpoint,
            loss_log,
            lr,
            epochs,
        } => {
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let data = load_dataset(&manifest)?;
            let out = train(&data, &cfg.train)?;
            write_checkpoint(&checkpoint, &out.store)?;
            if let Some(p) = loss_log {
                write_loss_log(&p, &out.log)?;
            }
            if let Some(last) = out.log.last() {
                println!("epochs {} final loss {}", out.log.len(), last.loss.total);
            }
        }
        Command::Infer {
            checkpoint,
            manifest,
            out,
        } => {
            let store = read_checkpoint(&checkpoint)?;
            let model = FtclModel::from_store(&store)?;
            let data = load_dataset(&manifest)?;
            let dets = infer_dataset(&data, &model.backbone, &store, &cfg.infer)?;
            write_detections(&out, &dets)?;
            println!("{} detections", dets.len());
        }
        Command::Eval {
            detections,
            manifest,
            out,
            csv,
        } => {
            let dets = read_detections(&detections)?;
            let data = load_dataset(&manifest)?;
            let gts = ground_truth(&data, cfg.eval.snippet_frames);
            let report = map_at(&dets, &gts, data.n_classes, &cfg.eval)?;
            report.write(&out, csv.as_deref())?;
            println!("avg mAP {}", report.avg_all);
        }
        Command::Ablate {
            train: train_path,
            test,
            out,
            variants,
            seeds,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let variants = variants
                .iter()
                .map(|v| AblationVariant::parse(v.trim()))
                .collect::<Result<Vec<_>>>()?;
            let (train_set, test_set) = match (train_path, test) {
                (Some(a), Some(b)) => (load_dataset(&a)?, load_dataset(&b)?),
                _ => {
                    let data = generate(&cfg.synthetic)?;
                    (data.train, data.test)
                }
            };
            let report = run_ablation(&train_set, &test_set, &cfg.train, &cfg.infer, &cfg.eval, &variants, &seeds)?;
            let csv = report.to_csv();
            write_text(&out, &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck { instances } => {
            let report = gradient_suite(&SuiteConfig {
                instances,
                seed: cli.common.seed.unwrap_or(0),
                gamma: cfg.train.gamma,
                tau: cfg.train.tau,
                ..SuiteConfig::default()
            })?;
            println!("{}", report.summary());
            if !report.passed() {
                return Err(Error::Data("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
