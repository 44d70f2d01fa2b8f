use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mergetrain::pipeline::{
    cmd_evaluate, cmd_inspect_pseudo, cmd_reproduce, cmd_synth, cmd_train, cmd_train_proxy, RunConfig,
};
use mergetrain::training::Mode;
use mergetrain::Error;

/// Detector training on merged datasets with proxy-gated pseudo-labels.
#[derive(Parser)]
#[command(name = "mergetrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the merged benchmark, test set and proxy crops.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the proxy classifier on the crops of a synth directory.
    TrainProxy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one detector arm.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        proxy: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score detector checkpoints on the test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        checkpoints: Vec<PathBuf>,
    },
    /// Draw audited pseudo-labels and ground truths over training images.
    InspectPseudo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Audit file or directory of per-epoch audit files.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Full experiment: data, proxy, all arms, comparison.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> mergetrain::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

enum Failure {
    Run(Error),
    Ordering,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { common } => {
            let s = cmd_synth(&load(&common)?)?;
            println!(
                "missing rate {:.4} ({} of {} instances unlabelled) over {} merged images",
                s.missing_rate,
                s.full_annotations - s.merged_annotations,
                s.full_annotations,
                s.merged_images
            );
            println!("test images {}, proxy crops {}", s.test_images, s.proxy_crops);
        }
        Command::TrainProxy { common, data } => {
            let mut cfg = load(&common)?;
            set(&mut cfg.paths.data, data);
            let log = cmd_train_proxy(&cfg)?;
            match log.holdout_accuracy {
                Some(a) => println!("held-out accuracy {a:.4}"),
                None => println!("no held-out split"),
            }
            for (k, a) in log.per_class_accuracy.iter().enumerate() {
                match a {
                    Some(a) => println!("  class {}: {a:.4}", k + 1),
                    None => println!("  class {}: -", k + 1),
                }
            }
        }
        Command::Train {
            common,
            mode,
            data,
            proxy,
            resume,
        } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.proxy, proxy);
            set(&mut cfg.paths.resume, resume);
            let s = cmd_train(&cfg)?;
            if let Some(m) = s.metrics.last() {
                println!("{} epoch {}: total loss {:.4}", s.mode, m.epoch, m.total);
            }
            println!("checkpoint at epoch {}", s.epochs);
        }
        Command::Evaluate {
            common,
            data,
            checkpoints,
        } => {
            let mut cfg = load(&common)?;
            set(&mut cfg.paths.data, data);
            if !checkpoints.is_empty() {
                cfg.paths.checkpoints = checkpoints;
            }
            print!("{}", cmd_evaluate(&cfg)?.comparison.render_text());
        }
        Command::InspectPseudo { common, data, audit } => {
            let mut cfg = load(&common)?;
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.audit, audit);
            let s = cmd_inspect_pseudo(&cfg)?;
            println!("{} pseudo-labels, {} overlays", s.pseudo_labels, s.overlays.len());
        }
        Command::Reproduce { common } => {
            let o = cmd_reproduce(&load(&common)?)?;
            print!("{}", o.comparison.render_text());
            println!(
                "missing rate {:.4}; ours - baseline {:+.2}; upper - ours {:+.2}",
                o.data.missing_rate, o.gain, o.upper_gap
            );
            if !o.passed {
                return Err(Failure::Ordering);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Ordering) => {
            eprintln!("error: ordering check failed");
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
