use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfnet_core::episodes::write_folder;
use mfnet_core::metrics::Protocol;
use mfnet_core::trainer::report::{plot_log, read_log, summarize};
use mfnet_core::trainer::{
    evaluate, load_config, load_model, open_dataset, predict_files, train, EvalReport,
};
use mfnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mfnet", version, about = "Multi-way few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; writes checkpoints and a JSONL log to `output_dir`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` using config field names, e.g. `pml.lambda=0.2`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on test-split episodes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        /// Machine-readable report (JSON).
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Segment one query image given a support directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One subdirectory per class with `<stem>.png` and `<stem>_mask.png`.
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Summarize a training log and optionally plot it (`.svg` or `.png`).
    Report {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Evaluation summary written by `eval --summary`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset to disk in folder layout.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Miou,
    MiouStar,
    Both,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::Miou => vec![Protocol::Miou],
            ProtocolArg::MiouStar => vec![Protocol::MiouStar],
            ProtocolArg::Both => vec![Protocol::Miou, Protocol::MiouStar],
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let out = train(&cfg)?;
            let last = out.records.last().map_or(f64::NAN, |r| r.loss);
            println!("checkpoint: {}", out.checkpoint.display());
            println!("log: {}", out.log.display());
            println!("iterations: {} final loss: {last:.5}", out.records.len());
            println!("parameter hash: {}", out.params_hash);
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            runs,
            protocol,
            summary,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let model = load_model(&checkpoint, &cfg)?;
            let ds = open_dataset(&cfg)?;
            let report = evaluate(
                &cfg,
                &model,
                &ds,
                episodes.unwrap_or(cfg.eval.episodes),
                runs.unwrap_or(cfg.eval.runs),
            )?;
            print!("{}", report.render(&protocol.protocols()));
            if let Some(p) = summary {
                write_json(&p, &report)?;
            }
        }
        Command::Predict {
            checkpoint,
            support,
            query,
            out,
            overlay,
        } => {
            let ck = mfnet_core::trainer::load_checkpoint(&checkpoint)?;
            let model = load_model(&checkpoint, &ck.config)?;
            let mask = predict_files(&model, &support, &query, &out, overlay.as_deref())?;
            let n = model.cfg.n_way;
            let counts: Vec<String> = (0..=n as u8).map(|l| format!("{l}:{}", mask.count(l))).collect();
            println!("wrote {} ({}x{}) label counts {}", out.display(), mask.width, mask.height, counts.join(" "));
        }
        Command::Report { log, plot, summary } => {
            if log.is_none() && summary.is_none() {
                return Err(Error::Config("report needs --log and/or --summary".into()));
            }
            if let Some(log) = log {
                let records = read_log(&log)?;
                let s = summarize(&records)?;
                println!(
                    "{} iterations over {} epochs; loss {:.5} -> {:.5} (min {:.5}); final seg {:.5} pml {:.5}; {:.1} triplets/iter",
                    s.iterations,
                    s.epochs,
                    s.first_loss,
                    s.final_loss,
                    s.min_loss,
                    s.final_l_seg,
                    s.final_l_pml,
                    s.mean_triplets
                );
                if let Some(p) = plot {
                    plot_log(&records, &p)?;
                    println!("plot: {}", p.display());
                }
            }
            if let Some(path) = summary {
                let text = fs::read_to_string(&path)?;
                let report: EvalReport = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                print!("{}", report.render(&[Protocol::Miou, Protocol::MiouStar]));
            }
        }
        Command::Synth {
            config,
            out,
            overrides,
        } => {
            let mut overrides = overrides;
            overrides.insert(0, "dataset.kind=synthetic".into());
            if config.is_none() && !overrides.iter().any(|o| o.starts_with("preset")) {
                overrides.insert(0, "preset=desk".into());
            }
            let cfg = load_config(config.as_deref(), &overrides)?;
            let ds = open_dataset(&cfg)?;
            write_folder(&ds, &out, cfg.dataset.num_folds)?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
