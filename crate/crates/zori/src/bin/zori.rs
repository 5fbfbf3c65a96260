use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zori::commands::{self, PredictPaths};
use zori::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "zori", version, about = "Zero-shot remote-sensing instance segmentation head")]
struct Cli {
    /// Run-config JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value` (dotted keys, repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set split=<value>`.
    #[arg(long, global = true)]
    split: Option<String>,
    /// Shorthand for `--set workers=<n>`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank text-embedding channels and keep the top k.
    SelectChannels {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a cosine classifier, refined when a selection is given.
    BuildClassifier {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split backbone channels into frozen and trainable groups.
    PartitionChannels {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the identity adapter state here.
        #[arg(long)]
        adapter_out: Option<PathBuf>,
    },
    /// Build the seen-class cache bank.
    BuildCache {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify proposals and write detections as JSON lines.
    Predict {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Directory of `<image_id>.zemb` feature maps.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the bank completed with unseen pseudo-samples.
        #[arg(long)]
        bank_out: Option<PathBuf>,
    },
    /// Score detections against ground truth.
    Evaluate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Report JSON; the text table goes next to it with a .txt extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seen-only training file and the test files.
    SplitDataset {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides;
    if let Some(s) = cli.split {
        overrides.push(format!("split={}", serde_json::Value::String(s)));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::SelectChannels { embeddings, out } => {
            commands::select_channels(&cfg, &embeddings, &out)?;
        }
        Command::BuildClassifier { embeddings, selection, out } => {
            commands::build_classifier(&cfg, &embeddings, selection.as_deref(), &out)?;
        }
        Command::PartitionChannels { features, out, adapter_out } => {
            commands::partition(&cfg, &features, &out, adapter_out.as_deref())?;
        }
        Command::BuildCache { instances, classifier, out } => {
            commands::build_cache(&cfg, &instances, &classifier, &out)?;
        }
        Command::Predict { classifier, bank, features, proposals, out, bank_out } => {
            let paths = PredictPaths {
                classifier: &classifier,
                bank: &bank,
                features: &features,
                proposals: &proposals,
                out: &out,
                bank_out: bank_out.as_deref(),
            };
            commands::predict(&cfg, &paths)?;
        }
        Command::Evaluate { detections, annotations, out } => {
            let report = commands::evaluate_files(&cfg, &detections, &annotations, &out)?;
            print!("{}", zori::formats::report_table(&report));
        }
        Command::SplitDataset { annotations, out_dir } => {
            for p in commands::split_dataset(&cfg, &annotations, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Synth { out_dir } => commands::synth(&cfg, &out_dir)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
