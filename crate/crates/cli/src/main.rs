//! `csmae`: train cross-sensor masked autoencoders, extract embeddings, and
//! evaluate sensor-agnostic retrieval, all from sectioned TOML configs with
//! dotted-key overrides.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csmae_core::Error;

#[derive(Parser)]
#[command(name = "csmae", version, about = "Cross-sensor masked-autoencoder training and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; all defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set masking.mode=disjoint. Repeatable;
    /// wins over file values.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic paired dataset and write it with its manifest.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the rasters and manifest.tsv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model; writes metrics.txt, checkpoint.bin, and epoch snapshots.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for training artifacts.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Resume from an existing checkpoint file.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Extract features for a dataset split with a trained checkpoint.
    Embed {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to load the model from.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset split to embed: train, validation, test, or all.
        #[arg(long, default_value = "all")]
        split: String,
        /// Output directory for embeddings.tsv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Rank archive candidates for one query and print the retrieval order.
    Retrieve {
        /// Embeddings file to search.
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// Image id of the query.
        #[arg(long, value_name = "ID")]
        query_id: String,
        /// Task: s1->s1, s2->s2, s1->s2, or s2->s1.
        #[arg(long)]
        task: String,
        /// Number of candidates to return.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Score all four retrieval tasks and write report.txt.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Embeddings file covering queries and archive.
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// Manifest supplying labels and split tags.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Which split queries come from: train, validation, test, or all.
        #[arg(long, default_value = "all")]
        query_split: String,
        /// Which split the archive comes from.
        #[arg(long, default_value = "all")]
        archive_split: String,
        /// Retrieval depth.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Output directory for report.txt.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the configured model's parameter breakdown.
    ParamCount {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Infeasible(_) => 2,
        Error::Data(_) | Error::Geometry(_) | Error::Shape(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData { config, out } => commands::synth_data(&config, &out),
        Command::Train { config, out, resume } => {
            commands::train(&config, &out, resume.as_deref())
        }
        Command::Embed { config, checkpoint, split, out } => {
            commands::embed(&config, &checkpoint, &split, &out)
        }
        Command::Retrieve { embeddings, query_id, task, k } => {
            commands::retrieve(&embeddings, &query_id, &task, k)
        }
        Command::Evaluate {
            config,
            embeddings,
            manifest,
            query_split,
            archive_split,
            k,
            out,
        } => commands::evaluate(
            &config,
            &embeddings,
            &manifest,
            &query_split,
            &archive_split,
            k,
            &out,
        ),
        Command::ParamCount { config } => commands::param_count(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One machine-parsable line, whatever the underlying message held.
            let line: Vec<String> =
                err.to_string().split_whitespace().map(str::to_string).collect();
            eprintln!("csmae: {}", line.join(" "));
            ExitCode::from(exit_code(&err))
        }
    }
}
