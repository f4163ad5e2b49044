//! `protorect`: prototype-rectified few-shot evaluation over embedding
//! files.
//!
//! Subcommands: `eval` runs the episodic benchmark, `synth` writes a
//! synthetic feature file, `theory` emits the predicted accuracy curve
//! against the pseudo-label budget, `train` fits the cosine classifier.
//!
//! On failure the process exits nonzero after printing a single
//! `error: <category>: <detail>` line to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protorect_core::featurestore::{FeatureFormat, FeatureSet};
use protorect_core::harness::{
    emit_report, emit_theory, run_eval, run_theory, write_report, OutputFormat, RunConfig,
    TheoryConfig,
};
use protorect_core::rectify::Mode;
use protorect_core::trainer::{train, training_accuracy, ClassifierParams, Hyper};
use protorect_core::Result;

#[derive(Parser)]
#[command(
    name = "protorect",
    version,
    about = "Prototype rectification for few-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one or more pipeline modes over sampled episodes.
    Eval(EvalArgs),
    /// Generate a synthetic feature file.
    Synth(SynthArgs),
    /// Fit and emit the theoretical accuracy curve over the pseudo-label budget.
    Theory(TheoryArgs),
    /// Train the linear-adapter cosine classifier on a feature file.
    Train(TrainArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Feature file to evaluate.
    #[arg(long)]
    features: PathBuf,
    /// Encoding of the feature file.
    #[arg(long, default_value = "binary")]
    feature_format: FeatureFormat,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    /// Pipeline modes, comma separated (cspn|bdc|bdi|bd).
    #[arg(long, value_delimiter = ',', default_value = "bd")]
    mode: Vec<Mode>,
    /// Pseudo-label budgets, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    z: Vec<usize>,
    #[arg(long, default_value_t = 10.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distractor classes injected into each query batch.
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    /// Rectify on raw queries before shifting (ablation of module order).
    #[arg(long)]
    intra_first: bool,
    #[arg(long, default_value = "tsv")]
    format: OutputFormat,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Per-dimension Gaussian std around each class mean direction.
    #[arg(long, default_value_t = 0.35)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "binary")]
    feature_format: FeatureFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "binary")]
    feature_format: FeatureFormat,
    /// Shots of the predicted curve.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Curve covers Z = 0..=z-max.
    #[arg(long, default_value_t = 10)]
    z_max: usize,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    /// Shot counts of the plain-prototype anchor runs the scale is fitted on.
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    anchor_shots: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    /// Also measure the empirical Z-sweep for side-by-side columns.
    #[arg(long)]
    empirical: bool,
    #[arg(long, default_value = "tsv")]
    format: OutputFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "binary")]
    feature_format: FeatureFormat,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Output dimension of the linear adapter; defaults to the feature dim.
    #[arg(long)]
    adapter_dim: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval(args) => {
            let cfg = RunConfig {
                command: "eval".into(),
                features: args.features.display().to_string(),
                ways: args.ways,
                shots: args.shots,
                queries: args.queries,
                episodes: args.episodes,
                modes: args.mode,
                z_values: args.z,
                epsilon: args.epsilon,
                tau: args.tau,
                seed: args.seed,
                distractors: args.distractors,
                intra_first: args.intra_first,
                format: args.format,
            };
            let report = run_eval(&cfg, args.feature_format)?;
            write_report(&emit_report(&report, args.format), args.out.as_deref())
        }
        Command::Synth(args) => {
            let fs = FeatureSet::synth(
                args.classes,
                args.per_class,
                args.dim,
                args.spread,
                args.seed,
            )?;
            fs.save(&args.out, args.feature_format)?;
            println!(
                "wrote {} rows x {} dims over {} classes to {}",
                fs.count(),
                fs.dim(),
                fs.num_classes(),
                args.out.display()
            );
            Ok(())
        }
        Command::Theory(args) => {
            let cfg = TheoryConfig {
                features: args.features.display().to_string(),
                k: args.k,
                z_max: args.z_max,
                ways: args.ways,
                queries: args.queries,
                episodes: args.episodes,
                anchor_shots: args.anchor_shots,
                seed: args.seed,
                epsilon: args.epsilon,
                tau: args.tau,
                empirical: args.empirical,
                format: args.format,
            };
            let report = run_theory(&cfg, args.feature_format)?;
            write_report(&emit_theory(&report, args.format), args.out.as_deref())
        }
        Command::Train(args) => {
            let fs = FeatureSet::load(&args.features, args.feature_format)?;
            let adapter_dim = args.adapter_dim.unwrap_or(fs.dim());
            let hyper = Hyper {
                learning_rate: args.lr,
                epochs: args.epochs,
                batch_size: args.batch,
                seed: args.seed,
                ..Hyper::default()
            };
            let init =
                ClassifierParams::init(fs.dim(), adapter_dim, fs.num_classes(), args.tau, hyper)?;
            let outcome = train(&fs, init)?;
            outcome.params.save(&args.out)?;
            let acc = training_accuracy(&outcome.params, &fs)?;
            println!(
                "trained\tepochs={}\tinitial_loss={:.6}\tfinal_loss={:.6}\ttrain_acc={:.4}\ttau={:.4}\tckpt={}",
                args.epochs,
                outcome.initial_loss,
                outcome.final_loss,
                acc,
                outcome.params.tau,
                args.out.display()
            );
            Ok(())
        }
    }
}
