//! Command-line driver: dataset generation, training, prediction,
//! evaluation, gradient checking, and graph export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manet_core::error::{Error, Result};
use manet_core::eval::{eval_didemo, eval_r_at_n, Interval, RetrievalReport};
use manet_core::gradcheck::component_suite;
use manet_core::io;
use manet_core::model::{ModelConfig, MomentModel};
use manet_core::synth::{generate, write_dataset, SynthSpec};
use manet_core::train::{
    load_checkpoint, DataSet, HyperParams, TargetMode, Trainer,
};
use manet_core::video::PyramidConfig;

#[derive(Parser)]
#[command(
    name = "manet",
    version,
    about = "Natural-language moment retrieval: dynamic filters, a multi-scale moment pyramid, and an iterative graph adjustment stack"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset (features, annotations, vocabulary)
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus a CSV log
    Train(TrainArgs),
    /// Rank candidate moments for every annotated query with a trained model
    Predict(PredictArgs),
    /// Score a predictions file against ground truth
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences, per component
    Gradcheck(GradcheckArgs),
    /// Export the learned moment graph for one sample as JSON
    ExportGraph(ExportGraphArgs),
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    /// Anchor preset: charades or didemo
    #[arg(long, default_value = "didemo")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Event-world seed; keep it equal across datasets that must share
    /// event classes (training set and held-out set)
    #[arg(long, default_value_t = 0)]
    class_seed: u64,
    /// Output directory for the dataset
    #[arg(long)]
    out: PathBuf,
    /// Number of plain "<event>" queries
    #[arg(long, default_value_t = 0)]
    plain: usize,
    /// Number of "<event> the k-th time" queries
    #[arg(long, default_value_t = 0)]
    ordinal: usize,
    /// Number of "<event A> after <event B>" queries
    #[arg(long, default_value_t = 0)]
    relational: usize,
    /// Number of event classes
    #[arg(long, default_value_t = 6)]
    events: usize,
    /// Feature dimension of the emitted clip features
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// L2 norm of each event prototype
    #[arg(long, default_value_t = 32.0)]
    feature_scale: f64,
    /// Gaussian noise level on prototype features, relative to the prototype
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Fraction of clips carrying a random other event's prototype
    #[arg(long, default_value_t = 0.15)]
    distractor_rate: f64,
    /// Amplitude multiplier on distractor clips
    #[arg(long, default_value_t = 2.0)]
    distractor_gain: f64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory of feature files
    #[arg(long)]
    features: PathBuf,
    /// JSON-lines annotation file
    #[arg(long)]
    annotations: PathBuf,
    /// Vocabulary file, one token per line
    #[arg(long)]
    vocab: PathBuf,
    /// Anchor preset: charades or didemo
    #[arg(long, default_value = "didemo")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Samples per optimizer step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Graph adjustment cells (0 disables the stack)
    #[arg(long, default_value_t = 3)]
    cells: usize,
    /// Hidden width d
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Disable query-conditioned feature alignment
    #[arg(long, default_value_t = false)]
    no_align: bool,
    /// Target for sub-threshold candidates: zeroed or raw-iou
    #[arg(long, default_value = "zeroed")]
    target_mode: String,
    /// Skip the per-epoch train Rank@1 column
    #[arg(long, default_value_t = false)]
    no_epoch_rank1: bool,
    /// Checkpoint output path (a .bin sibling is written next to it)
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV training log path (defaults to <checkpoint dir>/train_log.csv)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Predictions output file (JSON lines)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Protocol: didemo (Rank@1/Rank@5/mIoU) or r-at-n (R@n,IoU@m)
    #[arg(long, default_value = "didemo")]
    protocol: String,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Video duration in seconds for the didemo segment grid
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Top-n cutoffs for r-at-n
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    n: Vec<usize>,
    /// IoU thresholds for r-at-n
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7")]
    m: Vec<f64>,
    /// Report output file (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct ExportGraphArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Sample index within the annotation file
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Graph output file (JSON)
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportGraph(args) => cmd_export_graph(args),
    }
}

fn run_config<T: Serialize>(command: &str, args: &T) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": serde_json::to_value(args).expect("args serialize"),
    })
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let spec = SynthSpec {
        preset: args.preset.clone(),
        plain: args.plain,
        ordinal: args.ordinal,
        relational: args.relational,
        events: args.events,
        dim: args.dim,
        feature_scale: args.feature_scale,
        noise: args.noise,
        distractor_rate: args.distractor_rate,
        distractor_gain: args.distractor_gain,
        seed: args.seed,
        class_seed: args.class_seed,
    };
    let config = run_config("generate", &args);
    let dataset = generate(&spec)?;
    write_dataset(&dataset, &args.out, Some(config))?;
    println!(
        "generated {} samples ({} plain, {} ordinal, {} relational) under {}",
        dataset.videos.len(),
        spec.plain,
        spec.ordinal,
        spec.relational,
        args.out.display()
    );
    Ok(())
}

fn feature_dim_of_first_sample(features_dir: &Path, annotations: &Path) -> Result<usize> {
    let anns = io::read_annotations(annotations)?;
    let first = anns
        .first()
        .ok_or_else(|| Error::Input(format!("annotation file '{}' holds no samples", annotations.display())))?;
    Ok(io::read_clip_features(features_dir, &first.video_id)?.dim())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let pyramid = PyramidConfig::by_name(&args.preset)?;
    let input_dim = feature_dim_of_first_sample(&args.features, &args.annotations)?;
    let mut config = ModelConfig::new(args.dim, input_dim, pyramid);
    config.igan_cells = args.cells;
    config.feature_alignment = !args.no_align;
    let hp = HyperParams {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        target_mode: args.target_mode.parse::<TargetMode>()?,
        log_rank1: !args.no_epoch_rank1,
        ..HyperParams::default()
    };
    let provenance = run_config("train", &args);
    let mut data = DataSet::load(&args.features, &args.annotations, &args.vocab, args.seed)?;
    let model = MomentModel::init(config, args.seed)?;
    let mut trainer = Trainer::new(model, hp);
    trainer.run_config = Some(provenance.clone());

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("train_log.csv"));
    let mut log = io::TrainingLog::new(log_path, &provenance);
    let stats = trainer.run(&mut data, Some(&mut log), Some(&args.checkpoint))?;
    for s in &stats {
        match s.rank1 {
            Some(r) => println!("epoch {:>3}  loss {:.6}  rank1 {:.4}", s.epoch, s.loss, r),
            None => println!("epoch {:>3}  loss {:.6}", s.epoch, s.loss),
        }
    }
    println!("checkpoint written to {}", args.checkpoint.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let mut data =
        DataSet::load(&args.features, &args.annotations, &args.vocab, trainer.hp.seed)?;
    let predictions = trainer.predict_dataset(&mut data)?;
    let config = run_config("predict", &args);
    io::write_predictions(&args.out, &config, &predictions)?;
    println!("wrote {} ranked lists to {}", predictions.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut predictions = io::read_predictions(&args.predictions)?;
    predictions.sort_by_key(|p| p.query_id);
    let annotations = io::read_annotations(&args.annotations)?;
    let gts = annotations
        .iter()
        .map(|a| Interval::new(a.start_seconds, a.end_seconds))
        .collect::<Result<Vec<_>>>()?;
    let report: RetrievalReport = match args.protocol.as_str() {
        "didemo" => eval_didemo(&predictions, &gts, args.duration)?,
        "r-at-n" => eval_r_at_n(&predictions, &gts, &args.n, &args.m)?,
        other => {
            return Err(Error::Config(format!(
                "unknown protocol '{other}' (expected 'didemo' or 'r-at-n')"
            )))
        }
    };
    print!("{}", report.format_table());
    let payload = serde_json::json!({
        "run_config": run_config("eval", &args),
        "report": report,
    });
    let json = serde_json::to_string_pretty(&payload)
        .map_err(|e| Error::Json { path: args.out.display().to_string(), detail: e.to_string() })?;
    io::atomic_write(&args.out, json.as_bytes())?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let results = component_suite(args.seed)?;
    let mut worst = 0.0_f64;
    for (name, err) in &results {
        let status = if *err <= 1e-4 { "PASS" } else { "FAIL" };
        println!("{status}  {name:<40} max relative error {err:.3e}");
        worst = worst.max(*err);
    }
    if worst > 1e-4 {
        return Err(Error::Contract(format!("gradient check failed: worst error {worst:.3e}")));
    }
    println!("all {} components within 1e-4", results.len());
    Ok(())
}

fn cmd_export_graph(args: ExportGraphArgs) -> Result<()> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let mut data =
        DataSet::load(&args.features, &args.annotations, &args.vocab, trainer.hp.seed)?;
    if args.index >= data.len() {
        return Err(Error::Input(format!(
            "sample index {} out of range (dataset has {} samples)",
            args.index,
            data.len()
        )));
    }
    let annotation = data.annotations[args.index].clone();
    let ids = data.token_ids[args.index].clone();
    let features = data.features.get(&annotation.video_id)?;
    let (moments, adjacency) =
        trainer.model.adjacency_snapshot(&ids, &data.table, features)?;
    let payload = serde_json::json!({
        "run_config": run_config("export-graph", &args),
        "video_id": annotation.video_id,
        "query": annotation.query,
        "moments": moments,
        "adjacency": adjacency,
    });
    let json = serde_json::to_string_pretty(&payload)
        .map_err(|e| Error::Json { path: args.out.display().to_string(), detail: e.to_string() })?;
    io::atomic_write(&args.out, json.as_bytes())?;
    println!("graph for '{}' written to {}", annotation.query, args.out.display());
    Ok(())
}
