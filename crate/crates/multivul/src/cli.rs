use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multivul_core::augment::{augment_tokens, view_stream, AugConfig};
use multivul_core::corpus::{dataset_stats, split_records, tokenize, FunctionRecord, Modality};
use multivul_core::evaluate::{
    compute_metrics, cross_dataset_eval, encode_code, false_negative_analysis, pca_project,
    predict, PredictionSet,
};
use multivul_core::model::View;
use multivul_core::rng::{self, domain};
use multivul_core::trainer::{train, Selection};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{FileConfig, RunConfig};
use crate::error::{Error, Result};
use crate::jsonl::{load_jsonl, write_jsonl};
use crate::latency::{latency_bench, LatencyReport};
use crate::output::{
    emit, loss_csv, pca_csv, to_json, write_json, write_sidecar, FnReport, MetricsReport,
    PercentMetrics,
};
use crate::remote::{attach_comments_with, ProviderMode};

#[derive(Parser, Debug)]
#[command(
    name = "multivul",
    version,
    about = "Multimodal contrastive vulnerability detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dataset statistics as JSON
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Stratified train/validation/test split
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attach generated comments to records that lack one
    Comment(CommentArgs),
    /// Write augmented code and comment views
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and save a checkpoint
    Train(TrainArgs),
    /// Code-only evaluation of a checkpoint
    Eval(EvalArgs),
    /// Evaluate a checkpoint on a corpus from a different source
    OodEval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
    },
    /// Export 2-D PCA coordinates of projected code embeddings
    PcaExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-sample inference latency
    BenchLatency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Overlap of false negatives across three prediction sets
    FnAnalysis {
        #[arg(long = "pred", required = true, num_args = 1)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct CommentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ProviderMode>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Request timeout in seconds
    #[arg(long)]
    pub timeout: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Environment variable holding the bearer token
    #[arg(long)]
    pub token_env: Option<String>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct HyperFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_input_length: Option<usize>,
    #[arg(long)]
    pub projection_dim: Option<usize>,
    #[arg(long)]
    pub disable_aug_alignment: bool,
    #[arg(long)]
    pub disable_consistency: bool,
    #[arg(long)]
    pub fine_tuning_only: bool,
    /// Keep the final-epoch model instead of the best validation epoch
    #[arg(long)]
    pub final_epoch: bool,
    /// Draw augmentations once instead of every epoch
    #[arg(long)]
    pub freeze_augmentation: bool,
}

impl HyperFlags {
    fn overrides(&self) -> FileConfig {
        let flag = |b: bool| b.then_some(true);
        FileConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            training_epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            augmentation_strength: self.alpha,
            max_input_length: self.max_input_length,
            projection_dimension: self.projection_dim,
            disable_aug_alignment: flag(self.disable_aug_alignment),
            disable_consistency: flag(self.disable_consistency),
            fine_tuning_only: flag(self.fine_tuning_only),
            model_selection: self.final_epoch.then_some(Selection::FinalEpoch),
            resample_augmentation: self.freeze_augmentation.then_some(false),
            ..FileConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    /// Held-out split scored with the selected model
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path prefix
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Metrics JSON (standard output when omitted)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "multivul")]
    pub method: String,
    /// Dataset name in the report (defaults to the input file stem)
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write the per-record predictions
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Serialize)]
struct EpochOut {
    epoch: usize,
    mean_loss: multivul_core::objective::LossBreakdown,
    validation: PercentMetrics,
}

#[derive(Serialize)]
struct TrainReport {
    selection: Selection,
    selected_epoch: usize,
    best_epoch: usize,
    optimizer_steps: u64,
    epochs: Vec<EpochOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<PercentMetrics>,
    run_config: RunConfig,
}

#[derive(Serialize, Deserialize)]
struct PredictionsFile {
    #[serde(flatten)]
    set: PredictionSet,
    run_config: RunConfig,
}

#[derive(Serialize)]
struct LatencyOut {
    #[serde(flatten)]
    report: LatencyReport,
    text_encoder_calls: u64,
    run_config: RunConfig,
}

#[derive(Serialize)]
struct AugRow<'a> {
    #[serde(flatten)]
    record: &'a FunctionRecord,
    code_aug: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    comment_aug: Option<String>,
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn augment_string(text: &str, modality: Modality, cfg: &AugConfig, key: u64, epoch: u64) -> String {
    let view = match modality {
        Modality::Code => domain::AUGMENT_CODE,
        Modality::Text => domain::AUGMENT_TEXT,
    };
    let tokens = tokenize(text, modality);
    augment_tokens(&tokens, cfg.alpha, &mut view_stream(cfg, view, key, epoch)).join(" ")
}

fn eval_setup(
    args: &EvalArgs,
    command: &str,
) -> Result<(RunConfig, Checkpoint, Vec<FunctionRecord>, f64)> {
    let flags = FileConfig {
        threshold: args.threshold,
        ..FileConfig::default()
    };
    let run = RunConfig::resolve(command, args.config.as_deref(), flags)?
        .with_path("checkpoint", &args.checkpoint)
        .with_path("input", &args.input);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let records = load_jsonl(&args.input)?;
    let threshold = run.train.threshold;
    Ok((run, ckpt, records, threshold))
}

fn write_predictions(path: Option<&Path>, set: PredictionSet, run: &RunConfig) -> Result<()> {
    match path {
        Some(p) => write_json(
            Some(p),
            &PredictionsFile {
                set,
                run_config: run.clone(),
            },
        ),
        None => Ok(()),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { input, output } => {
            let records = load_jsonl(&input)?;
            write_json(output.as_deref(), &dataset_stats(&records)?)
        }
        Command::Split {
            input,
            out_dir,
            train_fraction,
            validation_fraction,
            test_fraction,
            seed,
        } => {
            let records = load_jsonl(&input)?;
            let split = split_records(
                &records,
                [train_fraction, validation_fraction, test_fraction],
                seed,
            )?;
            let run = RunConfig::resolve(
                "split",
                None,
                FileConfig {
                    seed: Some(seed),
                    ..FileConfig::default()
                },
            )?
            .with_path("input", &input);
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for (name, part) in [
                ("train", &split.train),
                ("validation", &split.validation),
                ("test", &split.test),
            ] {
                let path = out_dir.join(format!("{name}.jsonl"));
                write_jsonl(&path, part)?;
                write_sidecar(&path, serde_json::json!({ "records": part.len() }), &run)?;
                eprintln!("{name}: {} records", part.len());
            }
            Ok(())
        }
        Command::Comment(a) => {
            let flags = FileConfig {
                comment_mode: a.mode,
                endpoint: a.endpoint,
                model: a.model,
                timeout: a.timeout,
                retries: a.retries,
                token_env: a.token_env,
                backoff_ms: a.backoff_ms,
                temperature: a.temperature,
                max_tokens: a.max_tokens,
                concurrency: a.concurrency,
                ..FileConfig::default()
            };
            let run = RunConfig::resolve("comment", a.config.as_deref(), flags)?
                .with_path("input", &a.input);
            let records = load_jsonl(&a.input)?;
            let outcome = attach_comments_with(&records, &run.provider)?;
            for (id, err) in &outcome.failures {
                eprintln!("comment failed for {id}: {err}");
            }
            write_jsonl(&a.output, &outcome.records)?;
            write_sidecar(
                &a.output,
                serde_json::json!({ "failures": outcome.failures.len() }),
                &run,
            )
        }
        Command::Augment {
            input,
            output,
            alpha,
            seed,
            epoch,
            config,
        } => {
            let flags = FileConfig {
                augmentation_strength: alpha,
                seed,
                ..FileConfig::default()
            };
            let run =
                RunConfig::resolve("augment", config.as_deref(), flags)?.with_path("input", &input);
            let cfg = AugConfig {
                alpha: run.train.alpha,
                seed: run.seed,
            };
            cfg.validate()?;
            let records = load_jsonl(&input)?;
            let rows: Vec<AugRow> = records
                .iter()
                .map(|r| {
                    let key = rng::hash_str(&r.id);
                    AugRow {
                        record: r,
                        code_aug: augment_string(&r.code, Modality::Code, &cfg, key, epoch),
                        comment_aug: r
                            .comment
                            .as_deref()
                            .map(|c| augment_string(c, Modality::Text, &cfg, key, epoch)),
                    }
                })
                .collect();
            write_jsonl(&output, &rows)?;
            write_sidecar(&output, serde_json::json!({ "epoch": epoch }), &run)
        }
        Command::Train(a) => run_train(a),
        Command::Eval(a) => {
            let (run, ckpt, records, threshold) = eval_setup(&a, "eval")?;
            let set = predict(
                &ckpt.model,
                &records,
                &ckpt.code_vocab,
                threshold,
                &a.method,
            )?;
            let report = MetricsReport {
                method: a.method.clone(),
                dataset: a.dataset.clone().unwrap_or_else(|| stem(&a.input)),
                direction: None,
                metrics: PercentMetrics::from(&compute_metrics(&set.predictions)),
                threshold,
                run_config: run.clone(),
            };
            write_predictions(a.predictions.as_deref(), set, &run)?;
            write_json(a.output.as_deref(), &report)
        }
        Command::OodEval {
            eval,
            source,
            target,
        } => {
            let (run, ckpt, records, threshold) = eval_setup(&eval, "ood-eval")?;
            let (metrics, set) = cross_dataset_eval(
                &ckpt.model,
                &records,
                &ckpt.code_vocab,
                threshold,
                &eval.method,
            )?;
            let report = MetricsReport {
                method: eval.method.clone(),
                dataset: eval.dataset.clone().unwrap_or_else(|| target.clone()),
                direction: Some(format!("{source}→{target}")),
                metrics: PercentMetrics::from(&metrics),
                threshold,
                run_config: run.clone(),
            };
            write_predictions(eval.predictions.as_deref(), set, &run)?;
            write_json(eval.output.as_deref(), &report)
        }
        Command::PcaExport {
            checkpoint,
            input,
            output,
            seed,
        } => {
            let run = RunConfig::resolve(
                "pca-export",
                None,
                FileConfig {
                    seed: Some(seed),
                    ..FileConfig::default()
                },
            )?
            .with_path("checkpoint", &checkpoint)
            .with_path("input", &input);
            let ckpt = load_checkpoint(&checkpoint)?;
            let records = load_jsonl(&input)?;
            let seqs = encode_code(
                &records,
                &ckpt.code_vocab,
                ckpt.model.config().max_input_length,
            );
            let mut rows = Vec::with_capacity(records.len());
            for chunk in seqs.chunks(32) {
                let batch = ckpt.model.embed(chunk, Modality::Code, View::Original)?;
                rows.extend(batch.projected.to_rows());
            }
            let tensor = multivul_core::diff::Tensor::from_rows(&rows)?;
            let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
            let projection = pca_project(&tensor, &labels, seed)?;
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            emit(Some(&output), &pca_csv(&ids, &projection))?;
            write_sidecar(
                &output,
                serde_json::json!({
                    "explained_variance_ratio": projection.explained_variance_ratio,
                    "components": projection.components,
                }),
                &run,
            )
        }
        Command::BenchLatency {
            checkpoint,
            input,
            repetitions,
            batch_size,
            output,
        } => {
            let run = RunConfig::resolve("bench-latency", None, FileConfig::default())?
                .with_path("checkpoint", &checkpoint)
                .with_path("input", &input);
            let ckpt = load_checkpoint(&checkpoint)?;
            let records = load_jsonl(&input)?;
            let seqs = encode_code(
                &records,
                &ckpt.code_vocab,
                ckpt.model.config().max_input_length,
            );
            let report = latency_bench(&ckpt.model, &seqs, repetitions, batch_size)?;
            write_json(
                output.as_deref(),
                &LatencyOut {
                    report,
                    text_encoder_calls: ckpt.model.text_encoder_calls(),
                    run_config: run,
                },
            )
        }
        Command::FnAnalysis {
            preds,
            gold,
            output,
        } => {
            if preds.len() != 3 {
                return Err(Error::Usage(format!(
                    "fn-analysis needs exactly three --pred files, got {}",
                    preds.len()
                )));
            }
            let mut run = RunConfig::resolve("fn-analysis", None, FileConfig::default())?
                .with_path("gold", &gold);
            let mut sets = Vec::with_capacity(3);
            for (k, p) in preds.iter().enumerate() {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let set: PredictionSet =
                    serde_json::from_str(&text).map_err(|e| Error::Format {
                        path: p.clone(),
                        line: e.line(),
                        message: e.to_string(),
                    })?;
                run = run.with_path(&format!("pred{}", k + 1), p);
                sets.push(set);
            }
            let gold_records = load_jsonl(&gold)?;
            let fa = false_negative_analysis([&sets[0], &sets[1], &sets[2]], &gold_records)?;
            write_json(output.as_deref(), &FnReport::new(&fa, run))
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::resolve("train", a.config.as_deref(), a.hyper.overrides())?
        .with_path("train", &a.train)
        .with_path("validation", &a.validation)
        .with_path("checkpoint", &a.checkpoint);
    if let Some(t) = &a.test {
        run = run.with_path("test", t);
    }
    let train_records = load_jsonl(&a.train)?;
    let validation = load_jsonl(&a.validation)?;
    let result = train(&train_records, &validation, &run.train)?;
    for e in &result.epochs {
        eprintln!(
            "epoch {:>2}  loss {:.4}  validation f1 {:.2}",
            e.epoch,
            e.mean_loss.total,
            e.validation.f1 * 100.0
        );
    }
    let model = result.selected();
    let test = match &a.test {
        Some(path) => {
            let records = load_jsonl(path)?;
            let set = predict(
                model,
                &records,
                &result.code_vocab,
                run.train.threshold,
                "multivul",
            )?;
            Some(PercentMetrics::from(&compute_metrics(&set.predictions)))
        }
        None => None,
    };
    save_checkpoint(
        &Checkpoint {
            model: model.fresh_copy(),
            code_vocab: result.code_vocab.clone(),
            text_vocab: result.text_vocab.clone(),
            step: result.optimizer_steps,
            seed: run.seed,
        },
        &a.checkpoint,
    )?;
    if let Some(path) = &a.loss_log {
        emit(Some(path), &loss_csv(&result.steps))?;
        write_sidecar(path, serde_json::json!({}), &run)?;
    }
    let report = TrainReport {
        selection: result.selection,
        selected_epoch: match result.selection {
            Selection::BestValidationF1 => result.best_epoch,
            Selection::FinalEpoch => result.epochs.len(),
        },
        best_epoch: result.best_epoch,
        optimizer_steps: result.optimizer_steps,
        epochs: result
            .epochs
            .iter()
            .map(|e| EpochOut {
                epoch: e.epoch,
                mean_loss: e.mean_loss,
                validation: PercentMetrics::from(&e.validation),
            })
            .collect(),
        test,
        run_config: run,
    };
    emit(a.metrics.as_deref(), &to_json(&report))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
