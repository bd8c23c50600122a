//! `domino-prune`: analyze channel dependencies, dump saliencies, run
//! pruning campaigns, summarize traces, and self-verify.
//!
//! Exit codes: 0 success, 1 verification-check failure, 2 usage/IO/
//! validation error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "domino-prune", version, about = "Structured channel pruning with dataflow-aware saliency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model manifest path.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Tensor blob path.
    #[arg(long)]
    blob: std::path::PathBuf,
    /// Default group-slot mapping for convs without an explicit one.
    #[arg(long, value_parser = ["interleaved", "blocked"], default_value = "interleaved")]
    group_mapping: String,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset source.
    #[arg(long, value_parser = ["cifar10", "synth"], default_value = "synth")]
    dataset: String,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<std::path::PathBuf>,
    /// Truncate the training split to the first N samples (synth: generate
    /// N training samples and N/2 test samples).
    #[arg(long)]
    subset: Option<usize>,
    /// Seed for synthetic data generation.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Dump every coparent equivalence class with its prune set as JSON lines.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Dump per-channel saliencies as CSV (layer,channel,raw,count,score).
    Saliency {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Scoring variant.
        #[arg(long, value_parser = ["channel", "domino-o", "domino-io"], default_value = "channel")]
        variant: String,
        /// Base metric (optionally suffixed -avg).
        #[arg(long, default_value = "l1")]
        metric: String,
        /// Apply -avg scaling to the metric.
        #[arg(long)]
        avg: bool,
    },
    /// Run pruning campaigns and write one trace CSV per (variant, metric, seed).
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated scoring variants.
        #[arg(long, default_value = "channel,domino-o,domino-io")]
        variant: String,
        /// Comma-separated base metrics (optionally suffixed -avg).
        #[arg(long, default_value = "l1")]
        metric: String,
        /// Apply -avg scaling to every listed metric.
        #[arg(long)]
        avg: bool,
        /// Stop when accuracy drops this many percentage points.
        #[arg(long, default_value_t = 5.0)]
        stop_drop: f64,
        /// Comma-separated campaign seeds.
        #[arg(long, default_value = "1,2,3,4")]
        seeds: String,
        /// Output directory for trace CSVs.
        #[arg(long)]
        out: std::path::PathBuf,
        /// Evaluate accuracy every N iterations.
        #[arg(long, default_value_t = 1)]
        eval_every: usize,
        /// Allow pruning the classifier layer's output channels.
        #[arg(long)]
        include_classifier: bool,
    },
    /// Summarize a directory of trace CSVs into condition and improvement tables.
    Report {
        /// Directory of trace CSVs.
        #[arg(long)]
        traces: std::path::PathBuf,
        /// Optional output directory for summary.csv / improvement.csv
        /// (printed to stdout regardless).
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Run self-checks: prune-set oracle equivalence, gradient validation,
    /// zero propagation.
    Verify {
        /// Number of random graphs for the oracle-equivalence check.
        #[arg(long, default_value_t = 200)]
        graphs: usize,
        /// Deliberately corrupt an internal path to confirm the checks can
        /// catch it (the run is then expected to fail).
        #[arg(long, value_parser = ["wrong-group-slot"])]
        inject_fault: Option<String>,
    },
    /// Generate (optionally train) a fixture model and save it.
    MakeFixture {
        /// Fixture name.
        #[arg(long, value_parser = [
            "tiny-linear", "linear-toy", "resblock-toy", "spine-toy",
            "grouped-toy", "grouped-micro", "flatten-toy",
        ])]
        name: String,
        /// Weight-initialization seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Train the fixture on synthetic data before saving.
        #[arg(long)]
        train: bool,
        /// Seed for the synthetic training data.
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        /// Output directory (writes <name>.manifest and <name>.blob).
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze { model } => commands::analyze(&model),
        Command::Saliency {
            model,
            data,
            variant,
            metric,
            avg,
        } => commands::saliency(&model, &data, &variant, &metric, avg),
        Command::Prune {
            model,
            data,
            variant,
            metric,
            avg,
            stop_drop,
            seeds,
            out,
            eval_every,
            include_classifier,
        } => commands::prune(
            &model,
            &data,
            &variant,
            &metric,
            avg,
            stop_drop,
            &seeds,
            &out,
            eval_every,
            include_classifier,
        ),
        Command::Report { traces, out } => commands::report(&traces, out.as_deref()),
        Command::Verify {
            graphs,
            inject_fault,
        } => return commands::verify(graphs, inject_fault.as_deref()),
        Command::MakeFixture {
            name,
            seed,
            train,
            data_seed,
            out,
        } => commands::make_fixture(&name, seed, train, data_seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
