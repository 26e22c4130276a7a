mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use landmark_fusion::dataset::{
    class_counts, join, parse_labels, parse_landmarks, parse_metadata, parse_scores, Dataset, LabelSource,
    SplitStrategy,
};
use landmark_fusion::evaluation::{ablate, evaluate_with};
use landmark_fusion::model::{HeadActivation, Mode};
use landmark_fusion::pipeline::{Checkpoint, PrepareSettings, Prepared};
use landmark_fusion::synthgen::{generate_with, write_bundle, SynthSpec, LANDMARKS_FILE, METADATA_FILE, SCORES_FILE};
use landmark_fusion::training::{final_reports, fit, grad_check_suite, Optimizer, TrainConfig};
use landmark_fusion::ExecPolicy;
use serde::Serialize;

use config::{pick, FileConfig};

pub const DATASET_FILE: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const ABLATION_REPORT_FILE: &str = "ablation_report.json";
pub const GRADCHECK_REPORT_FILE: &str = "gradcheck_report.json";

/// Error carrying the process exit code: 1 for invalid input or
/// configuration, 2 for runtime and numeric failures.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    pub fn validation(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            msg: msg.into(),
        }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<landmark_fusion::Error> for Failure {
    fn from(e: landmark_fusion::Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Late-fusion classifier over facial-landmark deltas and golfer meta-data.
#[derive(Parser, Debug)]
#[command(name = "landmark-fusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and validate the input CSVs, print a summary and write dataset.json.
    Ingest {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a synthetic landmarks/metadata/scores bundle.
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one model; writes checkpoint.json, train_report.json and eval_report.json.
    Train {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the test split it was trained with.
    Eval {
        #[command(flatten)]
        input: InputArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train merged, facial_only and meta_only on the same split and compare.
    Ablate {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random draw (split, initialization, dropout, synthesis).
    #[arg(long)]
    seed: Option<u64>,
    /// Flat TOML file with defaults for any flag; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable data parallelism. Results are identical either way.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Landmarks CSV.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Golfer metadata CSV.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Round scores CSV; labels are derived from it.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Precomputed labels CSV (video_id,label); alternative to --scores.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// dataset.json written by `ingest`, or a directory holding a synth bundle.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// merged, facial_only or meta_only.
    #[arg(long)]
    mode: Option<String>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout rate in [0, 1).
    #[arg(long)]
    dropout: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Head activation before the softmax: identity or relu.
    #[arg(long)]
    head: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Share of videos held out for testing.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Share of the remaining videos held out for early stopping.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// stratified or by_golfer.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of videos.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Fraction of label-1 videos.
    #[arg(long)]
    class_balance: Option<f64>,
    /// Frames per video.
    #[arg(long)]
    frames: Option<usize>,
    /// Probability that the facial signal agrees with the label.
    #[arg(long)]
    p_face: Option<f64>,
    /// Probability that the meta-data signal agrees with the label.
    #[arg(long)]
    p_meta: Option<f64>,
    /// Landmark jitter in pixels.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Probability that a frame is dropped.
    #[arg(long)]
    missing_frame_rate: Option<f64>,
}

fn parse_with<T: std::str::FromStr<Err = landmark_fusion::Error>>(s: Option<String>) -> CliResult<Option<T>> {
    s.map(|v| v.parse::<T>().map_err(Failure::from)).transpose()
}

fn parse_optimizer(s: Option<String>) -> CliResult<Option<Optimizer>> {
    s.map(|v| match v.as_str() {
        "adam" => Ok(Optimizer::ADAM),
        "sgd" => Ok(Optimizer::Sgd),
        other => Err(Failure::validation(format!("unknown optimizer `{other}`"))),
    })
    .transpose()
}

fn parse_split(s: Option<String>) -> CliResult<Option<SplitStrategy>> {
    s.map(|v| match v.as_str() {
        "stratified" => Ok(SplitStrategy::Stratified),
        "by_golfer" => Ok(SplitStrategy::ByGolfer),
        other => Err(Failure::validation(format!("unknown split `{other}`"))),
    })
    .transpose()
}

fn policy(common: &CommonArgs, file: &FileConfig) -> ExecPolicy {
    if common.sequential || file.sequential == Some(true) {
        ExecPolicy::Sequential
    } else {
        ExecPolicy::Parallel
    }
}

fn resolve_train(args: TrainArgs, common: &CommonArgs, file: &FileConfig) -> CliResult<(TrainConfig, PrepareSettings)> {
    let d = TrainConfig::default();
    let p = PrepareSettings::default();
    let seed = pick(common.seed, file.seed, d.seed);
    let cfg = TrainConfig {
        epochs: pick(args.epochs, file.epochs, d.epochs),
        learning_rate: pick(args.lr, file.lr, d.learning_rate),
        optimizer: pick(
            parse_optimizer(args.optimizer)?,
            parse_optimizer(file.optimizer.clone())?,
            d.optimizer,
        ),
        batch_size: pick(args.batch_size, file.batch_size, d.batch_size),
        dropout_rate: pick(args.dropout, file.dropout, d.dropout_rate),
        seed,
        early_stop_patience: pick(args.patience, file.patience, d.early_stop_patience),
        mode: pick(parse_with::<Mode>(args.mode)?, parse_with(file.mode.clone())?, d.mode),
        head_activation: pick(
            parse_with::<HeadActivation>(args.head)?,
            parse_with(file.head.clone())?,
            d.head_activation,
        ),
        exec: policy(common, file),
        ..d
    };
    cfg.validate()?;
    let settings = PrepareSettings {
        test_fraction: pick(args.test_fraction, file.test_fraction, p.test_fraction),
        val_fraction: pick(args.val_fraction, file.val_fraction, p.val_fraction),
        strategy: pick(parse_split(args.split)?, parse_split(file.split.clone())?, p.strategy),
        seed,
    };
    for (name, f) in [
        ("test_fraction", settings.test_fraction),
        ("val_fraction", settings.val_fraction),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Failure::validation(format!("{name} must be in (0, 1), got {f}")));
        }
    }
    Ok((cfg, settings))
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    videos: usize,
    class_counts: [usize; 2],
    truncated_series: usize,
    missing_frames: usize,
    skipped_metadata_rows: usize,
}

fn load_csvs(
    landmarks: &Path,
    metadata: &Path,
    scores: Option<&Path>,
    labels: Option<&Path>,
) -> CliResult<(Dataset, IngestSummary)> {
    let source = match (scores, labels) {
        (Some(_), Some(_)) => {
            return Err(Failure::validation(
                "both --scores and --labels given; the label source is ambiguous",
            ))
        }
        (Some(s), None) => LabelSource::Scores(parse_scores(s)?),
        (None, Some(l)) => LabelSource::Labels(parse_labels(l)?),
        (None, None) => return Err(Failure::validation("one of --scores or --labels is required")),
    };
    let parsed = parse_landmarks(landmarks)?;
    let metas = parse_metadata(metadata)?;
    let (ds, skipped) = join(parsed.series, metas, source)?;
    let summary = IngestSummary {
        videos: ds.len(),
        class_counts: class_counts(&ds.labels()),
        truncated_series: parsed.truncated,
        missing_frames: ds.records.iter().map(|r| r.series.missing_frames()).sum(),
        skipped_metadata_rows: skipped,
    };
    Ok((ds, summary))
}

fn load_dataset(input: &InputArgs, file: &FileConfig) -> CliResult<(Dataset, IngestSummary)> {
    let or_file = |flag: &Option<PathBuf>, f: &Option<PathBuf>| flag.clone().or_else(|| f.clone());
    let landmarks = or_file(&input.landmarks, &file.landmarks);
    let metadata = or_file(&input.metadata, &file.metadata);
    let scores = or_file(&input.scores, &file.scores);
    let labels = or_file(&input.labels, &file.labels);
    let data = or_file(&input.data, &file.data);

    if let Some(data) = data {
        if landmarks.is_some() || metadata.is_some() {
            return Err(Failure::validation(
                "--data cannot be combined with --landmarks/--metadata",
            ));
        }
        if data.is_dir() {
            let scores = scores.unwrap_or_else(|| data.join(SCORES_FILE));
            return load_csvs(
                &data.join(LANDMARKS_FILE),
                &data.join(METADATA_FILE),
                Some(&scores),
                None,
            );
        }
        let ds = Dataset::load_json(&data)?;
        let summary = IngestSummary {
            videos: ds.len(),
            class_counts: class_counts(&ds.labels()),
            truncated_series: 0,
            missing_frames: ds.records.iter().map(|r| r.series.missing_frames()).sum(),
            skipped_metadata_rows: 0,
        };
        return Ok((ds, summary));
    }
    match (landmarks, metadata) {
        (Some(l), Some(m)) => load_csvs(&l, &m, scores.as_deref(), labels.as_deref()),
        _ => Err(Failure::validation(
            "--landmarks and --metadata (or --data) are required",
        )),
    }
}

fn out_dir(common: &CommonArgs, file: &FileConfig, required: bool) -> CliResult<Option<PathBuf>> {
    let out = common.out.clone().or_else(|| file.out.clone());
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)
                .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
            Ok(Some(dir))
        }
        None if required => Err(Failure::validation("--out is required")),
        None => Ok(None),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_ingest(input: InputArgs, common: CommonArgs) -> CliResult<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let out = out_dir(&common, &file, true)?.expect("required");
    let (ds, summary) = load_dataset(&input, &file)?;
    ds.save_json(&out.join(DATASET_FILE))?;
    println!("videos: {}", summary.videos);
    println!("label 0: {}", summary.class_counts[0]);
    println!("label 1: {}", summary.class_counts[1]);
    println!("truncated series: {}", summary.truncated_series);
    println!("missing frames: {}", summary.missing_frames);
    println!("metadata rows without landmarks: {}", summary.skipped_metadata_rows);
    println!("wrote {}", out.join(DATASET_FILE).display());
    Ok(())
}

fn cmd_synth(args: SynthArgs, common: CommonArgs) -> CliResult<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let out = out_dir(&common, &file, true)?.expect("required");
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_samples: pick(args.n_samples, file.n_samples, d.n_samples),
        class_balance: pick(args.class_balance, file.class_balance, d.class_balance),
        frames: pick(args.frames, file.frames, d.frames),
        p_face: pick(args.p_face, file.p_face, d.p_face),
        p_meta: pick(args.p_meta, file.p_meta, d.p_meta),
        noise_sigma: pick(args.noise_sigma, file.noise_sigma, d.noise_sigma),
        missing_frame_rate: pick(args.missing_frame_rate, file.missing_frame_rate, d.missing_frame_rate),
        seed: pick(common.seed, file.seed, d.seed),
        ..d
    };
    let data = generate_with(&spec, policy(&common, &file))?;
    let manifest = write_bundle(&out, &spec, &data)?;
    println!(
        "wrote {} videos (label 0: {}, label 1: {}) to {}",
        manifest.n_videos,
        manifest.class_counts[0],
        manifest.class_counts[1],
        out.display()
    );
    Ok(())
}

fn cmd_train(input: InputArgs, train: TrainArgs, common: CommonArgs) -> CliResult<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let (cfg, settings) = resolve_train(train, &common, &file)?;
    let out = out_dir(&common, &file, true)?.expect("required");
    let (ds, _) = load_dataset(&input, &file)?;
    let prep = Prepared::new(&ds, &settings, cfg.exec)?;
    let (model, mut report) = fit(&prep.train, &prep.val, &cfg)?;
    let (train_eval, test_eval) = final_reports(&model, &prep.train, &prep.test, cfg.exec)?;
    let ckpt = Checkpoint {
        model,
        encoder: prep.encoder,
        prepare: settings,
    };
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    report.checkpoint = Some(CHECKPOINT_FILE.into());
    write_json(&out.join(TRAIN_REPORT_FILE), &report)?;
    write_json(&out.join(EVAL_REPORT_FILE), &test_eval)?;
    println!(
        "mode {}: {} epochs, best epoch {} (val loss {:.6})",
        cfg.mode,
        report.epochs.len(),
        report.best_epoch,
        report.best_val_loss
    );
    println!("train recall (label 1): {:.4}", train_eval.recall[1]);
    print!("{}", test_eval.to_table());
    println!("test F1 (label 1): {:.4}", test_eval.f1_positive());
    Ok(())
}

fn cmd_eval(input: InputArgs, checkpoint: PathBuf, common: CommonArgs) -> CliResult<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let out = out_dir(&common, &file, false)?;
    let (ds, _) = load_dataset(&input, &file)?;
    let ckpt = Checkpoint::load(&checkpoint)?;
    let exec = policy(&common, &file);
    let test = Prepared::test_from_checkpoint(&ds, &ckpt, exec)?;
    let report = evaluate_with(&ckpt.model, &test, exec)?;
    if let Some(out) = out {
        write_json(&out.join(EVAL_REPORT_FILE), &report)?;
    }
    print!("{}", report.to_table());
    println!("test F1 (label 1): {:.4}", report.f1_positive());
    Ok(())
}

fn cmd_ablate(input: InputArgs, train: TrainArgs, common: CommonArgs) -> CliResult<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let (cfg, settings) = resolve_train(train, &common, &file)?;
    let out = out_dir(&common, &file, false)?;
    let (ds, _) = load_dataset(&input, &file)?;
    let report = ablate(&ds, &cfg, &settings)?;
    if let Some(out) = out {
        write_json(&out.join(ABLATION_REPORT_FILE), &report)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_gradcheck(tolerance: f64, common: CommonArgs) -> CliResult<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let out = out_dir(&common, &file, false)?;
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Failure::validation("--tolerance must be positive"));
    }
    let seed = pick(common.seed, file.seed, 42);
    let reports = grad_check_suite(seed, tolerance, policy(&common, &file))?;
    for r in &reports {
        println!(
            "{:<12} head={:<8} dropout={:<4} params={:<6} max_rel_err={:.3e}",
            r.config.mode.name(),
            format!("{:?}", r.config.head_activation).to_lowercase(),
            r.config.dropout_rate,
            r.n_params,
            r.max_rel_error
        );
    }
    if let Some(out) = out {
        write_json(&out.join(GRADCHECK_REPORT_FILE), &reports)?;
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed);
    println!(
        "max relative error {worst:.3e} over {} configurations (tolerance {tolerance:e}): {}",
        reports.len(),
        if passed { "PASS" } else { "FAIL" }
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::runtime("gradient check failed"))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest { input, common } => cmd_ingest(input, common),
        Command::Synth { synth, common } => cmd_synth(synth, common),
        Command::Train { input, train, common } => cmd_train(input, train, common),
        Command::Eval {
            input,
            checkpoint,
            common,
        } => cmd_eval(input, checkpoint, common),
        Command::Ablate { input, train, common } => cmd_ablate(input, train, common),
        Command::Gradcheck { tolerance, common } => cmd_gradcheck(tolerance, common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
