//! Command-line surface: one subcommand per pipeline capability.
//!
//! Every command is a pure function of its flags, config file, input files,
//! and seed, so rerunning one produces byte-identical output files. Exit
//! codes sort failures into usage (1), data (2), and numeric (3) classes;
//! anything written for humans only (wall time) goes to stderr so stdout
//! stays reproducible.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_choice_csv, load_pair_tsv, load_sct, recast_mc_nli, save_choice_csv, save_pair_tsv,
    save_sct, split_sct_v10, ChoiceExample, NliCategoryPair, PairSchema,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablate_context, encode_choice_example, encode_pair_example, evaluate_sct, pair_accuracy,
    percent, zero_shot_nli_sct, ZeroShotStatistic, ABLATION_SWEEP,
};
use crate::gradcheck::{grad_check, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::model::{
    classification_loss, choice_loss, EncoderParams, ModelConfig, ModelWithHead, TaskHead,
};
use crate::pipeline::{
    head_path, load_checkpoint, load_head, run_stage, save_checkpoint, save_head, StageConfig,
    StageOutcome, StageTask,
};
use crate::pretrain::{generate_pretrain_examples, pretrain_loss, Corpus, PretrainModel};
use crate::rng::{stream, stream_rng};
use crate::synth;
use crate::tokenizer::{train_vocab, Vocab};

/// Staged transfer training for a story-ending encoder.
#[derive(Debug, Parser)]
#[command(name = "stagebert", version, about, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a subword vocabulary from a plain-text corpus.
    VocabTrain(VocabTrainArgs),
    /// Stage 1: masked-token plus sentence-pair pretraining from scratch.
    Pretrain(PretrainArgs),
    /// Stage 2: supervised transfer-task training from a checkpoint.
    Transfer(TransferArgs),
    /// Stage 3: story-ending fine-tuning from a checkpoint.
    Finetune(FinetuneArgs),
    /// Score a dataset with a trained checkpoint and print an accuracy table.
    Eval(EvalArgs),
    /// Rewrite labeled entailment data into derived task files.
    #[command(subcommand)]
    Recast(RecastCommand),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Split the 1,871-story set into train and dev files by seeded shuffle.
    SplitSct(SplitSctArgs),
}

#[derive(Debug, Args)]
pub struct VocabTrainArgs {
    /// Plain-text corpus, one sentence per line, blank lines between
    /// documents.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target vocabulary size, special tokens included.
    #[arg(long)]
    pub size: usize,
    /// Output vocabulary file, one token per line (the line number is the
    /// token id).
    #[arg(long)]
    pub out: PathBuf,
    /// Keep case distinctions instead of lowercasing.
    #[arg(long)]
    pub cased: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Stage config file of flat `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Output checkpoint; the head lands at `<out>.head` and the training
    /// report at `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set seed=3`. Repeatable; the last
    /// value for a key wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Transfer task to train: nli, mc_nli, sentiment, or next_action.
    #[arg(long)]
    pub task: String,
    /// Stage config file of flat `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint whose encoder starts this stage.
    #[arg(long)]
    pub init: PathBuf,
    /// Output checkpoint; the head lands at `<out>.head` and the training
    /// report at `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set epochs=4`. Repeatable; the last
    /// value for a key wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Stage config file of flat `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint whose encoder starts this stage.
    #[arg(long)]
    pub init: PathBuf,
    /// Output checkpoint; the head lands at `<out>.head` and the training
    /// report at `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set learning_rate=2e-5`. Repeatable;
    /// the last value for a key wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained encoder checkpoint.
    #[arg(long)]
    pub ck: PathBuf,
    /// Dataset file: story CSV, single-context choice CSV, or labeled pair
    /// TSV (picked by extension and header).
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary the checkpoint was trained with.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Head file; defaults to `<ck>.head`.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Encoding length; defaults to the checkpoint's position capacity.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Context sentences to keep, e.g. "3,4"; an empty string keeps the
    /// ending only. Repeatable, one table row per subset.
    #[arg(long, conflicts_with_all = ["sweep", "zero_shot_nli"])]
    pub subset: Vec<String>,
    /// Print the whole context-ablation table, from "ending only" up to
    /// all four sentences.
    #[arg(long, conflicts_with = "zero_shot_nli")]
    pub sweep: bool,
    /// Score story endings with a 3-way entailment head, no story training
    /// involved.
    #[arg(long)]
    pub zero_shot_nli: bool,
    /// Zero-shot scoring statistic (with --zero-shot-nli).
    #[arg(long, value_enum)]
    pub statistic: Option<StatisticArg>,
    /// Also write one structured record per example to this file.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

/// How the zero-shot probe turns three entailment logits into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StatisticArg {
    /// Entailment probability with the neutral reading set aside.
    Entailment,
    /// Entailment minus contradiction probability under the full three-way
    /// softmax.
    EntailmentMinusContradiction,
}

impl StatisticArg {
    fn to_statistic(self) -> ZeroShotStatistic {
        match self {
            StatisticArg::Entailment => ZeroShotStatistic::Entailment,
            StatisticArg::EntailmentMinusContradiction => {
                ZeroShotStatistic::EntailmentMinusContradiction
            }
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum RecastCommand {
    /// Recast labeled premise-hypothesis pairs into two-way multiple choice.
    McNli(RecastMcNliArgs),
    /// Keep two of the three entailment categories, relabeled to {0, 1}.
    Filter(RecastFilterArgs),
}

#[derive(Debug, Args)]
pub struct RecastMcNliArgs {
    /// Labeled premise-hypothesis TSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output two-way choice CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for shuffling candidate order.
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RecastFilterArgs {
    /// Category pair to keep: EN, EC, or NC.
    #[arg(long)]
    pub keep: String,
    /// Labeled premise-hypothesis TSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output TSV with labels re-indexed to {0, 1}.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Stage config supplying geometry, vocabulary, and seed; without it a
    /// built-in two-layer geometry over a synthetic vocabulary is checked.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Randomly probed coordinates per task head.
    #[arg(long, default_value_t = 200)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct SplitSctArgs {
    /// Story CSV holding the full 1,871-row set.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Shuffle seed.
    #[arg(long)]
    pub seed: u64,
    /// Output CSV for the 1,771 training stories.
    #[arg(long)]
    pub out_train: PathBuf,
    /// Output CSV for the 100 development stories.
    #[arg(long)]
    pub out_dev: PathBuf,
}

/// Parses the process arguments, runs the command, and returns the exit
/// code. Help and version requests exit 0, other flag problems exit 1, and
/// command failures map through [`Error::exit_code`].
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::VocabTrain(args) => cmd_vocab_train(&args),
        Command::Pretrain(args) => {
            run_stage_command(StageTask::Pretrain, &args.config, &args.set, None, &args.out)
        }
        Command::Transfer(args) => {
            let task = StageTask::parse(&args.task)?;
            if !task.is_transfer() {
                return Err(Error::Config(format!(
                    "`transfer` covers the supervised middle-stage tasks \
                     (nli, mc_nli, sentiment, next_action), not {}",
                    task.name()
                )));
            }
            run_stage_command(task, &args.config, &args.set, Some(&args.init), &args.out)
        }
        Command::Finetune(args) => run_stage_command(
            StageTask::Sct,
            &args.config,
            &args.set,
            Some(&args.init),
            &args.out,
        ),
        Command::Eval(args) => cmd_eval(&args),
        Command::Recast(RecastCommand::McNli(args)) => cmd_recast_mc_nli(&args),
        Command::Recast(RecastCommand::Filter(args)) => cmd_recast_filter(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::SplitSct(args) => cmd_split_sct(&args),
    }
}

fn cmd_vocab_train(args: &VocabTrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.corpus).map_err(|e| Error::io(&args.corpus, e))?;
    let vocab = train_vocab(&text, args.size, args.cased)?;
    vocab.save(&args.out)?;
    println!("vocab\t{}", args.out.display());
    println!("size\t{}", vocab.size());
    Ok(())
}

/// Splits repeatable `--set key=value` flags into config override pairs.
fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("--set expects key=value, got `{pair}`"))
                })
        })
        .collect()
}

/// Flag overrides for one stage run. The subcommand's task goes last so it
/// wins over both the config file and any `--set task=...`.
fn stage_overrides(set: &[String], task: StageTask) -> Result<Vec<(String, String)>> {
    let mut overrides = parse_overrides(set)?;
    overrides.push(("task".to_string(), task.name().to_string()));
    Ok(overrides)
}

fn run_stage_command(
    task: StageTask,
    config_path: &Path,
    set: &[String],
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let overrides = stage_overrides(set, task)?;
    let config = StageConfig::load_with_overrides(config_path, &overrides)?;
    let init_ck = match init {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let outcome = run_stage(&config, init_ck.as_ref())?;
    write_stage_outputs(out, &outcome)
}

/// Path of the training report written next to a checkpoint.
pub fn report_path(checkpoint_path: impl AsRef<Path>) -> PathBuf {
    let mut name = checkpoint_path.as_ref().as_os_str().to_os_string();
    name.push(".report.json");
    PathBuf::from(name)
}

fn write_stage_outputs(out: &Path, outcome: &StageOutcome) -> Result<()> {
    save_checkpoint(out, &outcome.checkpoint)?;
    save_head(head_path(out), &outcome.head)?;
    let report = &outcome.report;
    let report_file = report_path(out);
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    std::fs::write(&report_file, json + "\n").map_err(|e| Error::io(&report_file, e))?;

    println!("task\t{}", report.task);
    println!("epochs\t{}", report.train_loss.len());
    println!("best_epoch\t{}", report.best_epoch);
    println!(
        "best_dev_{}\t{}",
        report.selection_metric, report.best_dev_metric
    );
    println!("checkpoint\t{}", out.display());
    eprintln!("wall time: {:.1}s", report.wall_time_seconds);
    Ok(())
}

/// Dataset kinds the eval command can score.
enum EvalData {
    /// Multiple-choice rows: four-sentence stories or single-context
    /// recast examples, told apart by their headers.
    Choices(Vec<ChoiceExample>),
    /// Labeled pair TSV; the schema is picked by the head's class count.
    Pairs(PathBuf),
}

/// Picks the loader from the file extension and, for CSV, the header line.
fn load_eval_data(path: &Path) -> Result<EvalData> {
    if path.extension().is_some_and(|e| e == "tsv") {
        return Ok(EvalData::Pairs(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    if header.split(',').next().map(str::trim) == Some("context") {
        Ok(EvalData::Choices(load_choice_csv(path)?))
    } else {
        Ok(EvalData::Choices(load_sct(path)?))
    }
}

/// Parses one `--subset` value: comma-separated 1-based sentence numbers,
/// or an empty string for the ending-only condition.
fn parse_subset(text: &str) -> Result<Vec<usize>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| {
            part.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "--subset expects sentence numbers like \"3,4\", got `{text}`"
                ))
            })
        })
        .collect()
}

fn write_results_file(path: &Path, records: &[impl serde::Serialize]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("result serialization: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.statistic.is_some() && !args.zero_shot_nli {
        return Err(Error::Config(
            "--statistic only applies together with --zero-shot-nli".into(),
        ));
    }
    let checkpoint = load_checkpoint(&args.ck)?;
    let head_file = args.head.clone().unwrap_or_else(|| head_path(&args.ck));
    let head = load_head(&head_file)?.to_task_head()?;
    let vocab = Vocab::load(&args.vocab, None)?;
    if vocab.size() != checkpoint.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the checkpoint was trained with {}",
            vocab.size(),
            checkpoint.config.vocab_size
        )));
    }
    let max_len = args.max_len.unwrap_or(checkpoint.config.max_positions);
    if max_len < 3 || max_len > checkpoint.config.max_positions {
        return Err(Error::Config(format!(
            "--max-len must lie in 3..={}, got {max_len}",
            checkpoint.config.max_positions
        )));
    }
    let encoder = checkpoint.to_encoder()?;

    match (load_eval_data(&args.data)?, &head) {
        (EvalData::Choices(dataset), TaskHead::Classification { .. }) => {
            if !args.zero_shot_nli {
                return Err(Error::Config(
                    "a classification head scores choice data only through --zero-shot-nli"
                        .into(),
                ));
            }
            if args.results.is_some() {
                return Err(Error::Config(
                    "--results is only written for standard story evaluation".into(),
                ));
            }
            let statistic = args
                .statistic
                .unwrap_or(StatisticArg::Entailment)
                .to_statistic();
            let acc = zero_shot_nli_sct(&encoder, &head, &vocab, max_len, &dataset, statistic)?;
            println!("zero-shot\t{}", percent(acc));
        }
        (EvalData::Choices(dataset), TaskHead::MultipleChoice { .. }) => {
            if args.zero_shot_nli {
                return Err(Error::Config(
                    "--zero-shot-nli needs the 3-class entailment head, found multiple_choice"
                        .into(),
                ));
            }
            let rows = if args.sweep {
                ablate_context(&encoder, &head, &vocab, max_len, &dataset, &ABLATION_SWEEP)?
            } else if !args.subset.is_empty() {
                let keeps = args
                    .subset
                    .iter()
                    .map(|s| parse_subset(s))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[usize]> = keeps.iter().map(Vec::as_slice).collect();
                ablate_context(&encoder, &head, &vocab, max_len, &dataset, &refs)?
            } else {
                let eval = evaluate_sct(&encoder, &head, &vocab, max_len, &dataset)?;
                if let Some(path) = &args.results {
                    write_results_file(path, &eval.records)?;
                }
                vec![("accuracy".to_string(), eval.accuracy)]
            };
            if args.results.is_some() && (args.sweep || !args.subset.is_empty()) {
                return Err(Error::Config(
                    "--results is only written for standard story evaluation".into(),
                ));
            }
            for (label, acc) in rows {
                println!("{label}\t{}", percent(acc));
            }
        }
        (EvalData::Pairs(path), TaskHead::Classification { num_classes, .. }) => {
            if args.zero_shot_nli {
                return Err(Error::Config(
                    "--zero-shot-nli scores story files, not labeled pairs".into(),
                ));
            }
            if args.results.is_some() {
                return Err(Error::Config(
                    "--results is only written for standard story evaluation".into(),
                ));
            }
            let schema = match num_classes {
                3 => PairSchema::Nli,
                2 => PairSchema::Sentiment,
                n => {
                    return Err(Error::Config(format!(
                        "no pair schema matches a {n}-class head"
                    )))
                }
            };
            let loaded = load_pair_tsv(&path, schema)?;
            let encoded = loaded
                .examples
                .iter()
                .map(|e| encode_pair_example(e, &vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            let acc = pair_accuracy(&encoder, &head, &encoded)?;
            println!("accuracy\t{}", percent(acc));
        }
        (EvalData::Pairs(_), TaskHead::MultipleChoice { .. }) => {
            return Err(Error::Config(
                "labeled pairs need a classification head, found multiple_choice".into(),
            ));
        }
    }
    Ok(())
}

fn cmd_recast_mc_nli(args: &RecastMcNliArgs) -> Result<()> {
    let loaded = load_pair_tsv(&args.input, PairSchema::Nli)?;
    let choices = recast_mc_nli(&loaded.examples, args.seed)?;
    save_choice_csv(&args.out, &choices)?;
    println!("examples\t{}", choices.len());
    Ok(())
}

fn cmd_recast_filter(args: &RecastFilterArgs) -> Result<()> {
    let keep = NliCategoryPair::parse(&args.keep)?;
    let loaded = load_pair_tsv(&args.input, PairSchema::Nli)?;
    let filtered = crate::data::filter_nli_categories(&loaded.examples, keep)?;
    save_pair_tsv(&args.out, &filtered)?;
    println!("examples\t{}", filtered.len());
    Ok(())
}

fn cmd_split_sct(args: &SplitSctArgs) -> Result<()> {
    let stories = load_sct(&args.input)?;
    let (train, dev) = split_sct_v10(&stories, args.seed)?;
    save_sct(&args.out_train, &train)?;
    save_sct(&args.out_dev, &dev)?;
    println!("train\t{}", train.len());
    println!("dev\t{}", dev.len());
    Ok(())
}

/// Geometry checked when `gradcheck` runs without a config: two layers,
/// hidden size 32, two heads, over a synthetic vocabulary.
fn default_gradcheck_setup() -> Result<(ModelConfig, Vocab, usize, u64, f64)> {
    let vocab = train_vocab(&synth::corpus_text(0), 160, false)?;
    let config = ModelConfig {
        num_layers: 2,
        hidden_size: 32,
        num_heads: 2,
        ffn_size: 128,
        vocab_size: vocab.size(),
        max_positions: 64,
        dropout_keep: 1.0,
    };
    Ok((config, vocab, 48, 0, crate::pretrain::MASK_RATE))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let (model_config, vocab, max_len, seed, mask_rate) = match &args.config {
        Some(path) => {
            let stage = StageConfig::load(path)?;
            let vocab = Vocab::load(&stage.vocab_path, None)?;
            let config = stage.model_config(vocab.size());
            (config, vocab, stage.max_len, stage.seed, stage.mask_rate)
        }
        None => default_gradcheck_setup()?,
    };
    model_config.validate()?;
    let d = model_config.hidden_size;

    // All three losses run in 64-bit with dropout off (training = false),
    // so every evaluation inside the checker is bit-deterministic.
    let encoder = EncoderParams::<f64>::init(model_config.clone(), seed)?;

    let pair_batch = synth::nli_examples(seed)
        .iter()
        .take(4)
        .map(|e| encode_pair_example(e, &vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut cls_model = ModelWithHead {
        encoder: encoder.clone(),
        head: TaskHead::classification(d, 3, seed)?,
    };
    let cls_report = grad_check(
        &mut cls_model,
        |m| {
            let mut rng = stream_rng(seed, stream::GRADCHECK);
            classification_loss(m, &pair_batch, false, &mut rng)
        },
        args.probes,
        DEFAULT_EPS,
        seed,
    )?;
    println!("classification\t{:.3e}", cls_report.max_rel_err);

    let choice_batch = synth::sct_examples(seed, 4, &[0, 1, 2, 3, 4, 5])
        .iter()
        .map(|e| encode_choice_example(e, &vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut choice_model = ModelWithHead {
        encoder: encoder.clone(),
        head: TaskHead::multiple_choice(d, seed)?,
    };
    let choice_report = grad_check(
        &mut choice_model,
        |m| {
            let mut rng = stream_rng(seed, stream::GRADCHECK);
            choice_loss(m, &choice_batch, false, &mut rng)
        },
        args.probes,
        DEFAULT_EPS,
        seed,
    )?;
    println!("multiple_choice\t{:.3e}", choice_report.max_rel_err);

    let corpus = Corpus::from_text(&synth::corpus_text(seed));
    let pretrain_batch =
        generate_pretrain_examples(&corpus, &vocab, seed, 0, 4, max_len, mask_rate)?;
    let mut pretrain_model = PretrainModel::<f64>::init(model_config, seed)?;
    let pretrain_report = grad_check(
        &mut pretrain_model,
        |m| {
            let mut rng = stream_rng(seed, stream::GRADCHECK);
            pretrain_loss(m, &pretrain_batch, false, &mut rng)
        },
        args.probes,
        DEFAULT_EPS,
        seed,
    )?;
    println!("pretrain\t{:.3e}", pretrain_report.max_rel_err);

    let overall = cls_report
        .max_rel_err
        .max(choice_report.max_rel_err)
        .max(pretrain_report.max_rel_err);
    println!("max relative error: {overall:.3e}");
    if overall > DEFAULT_TOLERANCE {
        return Err(Error::GradCheck {
            max_rel_err: overall,
            tolerance: DEFAULT_TOLERANCE,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(argv: &[&str]) -> Cli {
        Cli::try_parse_from(argv).expect("argv should parse")
    }

    #[test]
    fn parses_every_subcommand() {
        parse(&[
            "stagebert",
            "vocab-train",
            "--corpus",
            "c.txt",
            "--size",
            "200",
            "--out",
            "v.txt",
            "--cased",
        ]);
        parse(&["stagebert", "pretrain", "--config", "c", "--out", "ck"]);
        parse(&[
            "stagebert", "transfer", "--task", "nli", "--config", "c", "--init", "a", "--out",
            "b",
        ]);
        parse(&[
            "stagebert", "finetune", "--config", "c", "--init", "a", "--out", "b",
        ]);
        parse(&[
            "stagebert", "eval", "--ck", "a", "--data", "d.csv", "--vocab", "v",
        ]);
        parse(&[
            "stagebert", "recast", "mc-nli", "--in", "x.tsv", "--out", "y.csv", "--seed", "7",
        ]);
        parse(&[
            "stagebert", "recast", "filter", "--keep", "EN", "--in", "x.tsv", "--out", "y.tsv",
        ]);
        parse(&["stagebert", "gradcheck", "--probes", "10"]);
        parse(&[
            "stagebert",
            "split-sct",
            "--in",
            "all.csv",
            "--seed",
            "0",
            "--out-train",
            "t.csv",
            "--out-dev",
            "d.csv",
        ]);
    }

    #[test]
    fn missing_required_flag_is_a_parse_error() {
        assert!(Cli::try_parse_from(["stagebert", "pretrain", "--config", "c"]).is_err());
        assert!(Cli::try_parse_from(["stagebert", "vocab-train", "--size", "9"]).is_err());
    }

    #[test]
    fn sweep_and_subset_conflict() {
        let err = Cli::try_parse_from([
            "stagebert", "eval", "--ck", "a", "--data", "d", "--vocab", "v", "--sweep",
            "--subset", "3,4",
        ])
        .unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::ArgumentConflict);
    }

    #[test]
    fn repeatable_flags_collect_in_order() {
        let cli = parse(&[
            "stagebert", "eval", "--ck", "a", "--data", "d", "--vocab", "v", "--subset", "",
            "--subset", "3,4",
        ]);
        let Command::Eval(args) = cli.command else {
            panic!("expected eval");
        };
        assert_eq!(args.subset, vec!["".to_string(), "3,4".to_string()]);

        let cli = parse(&[
            "stagebert", "pretrain", "--config", "c", "--out", "ck", "--set", "seed=1", "--set",
            "seed=2",
        ]);
        let Command::Pretrain(args) = cli.command else {
            panic!("expected pretrain");
        };
        assert_eq!(args.set, vec!["seed=1".to_string(), "seed=2".to_string()]);
    }

    #[test]
    fn parse_subset_handles_empty_and_lists() {
        assert_eq!(parse_subset("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_subset("  ").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_subset("3,4").unwrap(), vec![3, 4]);
        assert_eq!(parse_subset(" 1 , 2 ").unwrap(), vec![1, 2]);
        assert!(parse_subset("two").is_err());
    }

    #[test]
    fn parse_overrides_splits_on_first_equals() {
        let pairs = parse_overrides(&["a=b".into(), "lr = 1e-3".into(), "x=y=z".into()]).unwrap();
        assert_eq!(
            pairs,
            vec![
                ("a".to_string(), "b".to_string()),
                ("lr".to_string(), "1e-3".to_string()),
                ("x".to_string(), "y=z".to_string()),
            ]
        );
        assert!(parse_overrides(&["nope".into()]).is_err());
    }

    #[test]
    fn subcommand_task_beats_a_set_override() {
        let overrides =
            stage_overrides(&["task=sct".into(), "seed=3".into()], StageTask::Nli).unwrap();
        let text = "task = pretrain\n\
                    train_data = t.tsv\n\
                    dev_data = d.tsv\n\
                    vocab_path = v.txt\n";
        let config = StageConfig::parse_with_overrides(text, &overrides).unwrap();
        assert_eq!(config.task, StageTask::Nli);
        assert_eq!(config.seed, 3);
    }

    #[test]
    fn report_path_appends_suffix() {
        assert_eq!(
            report_path("runs/ck.bin"),
            PathBuf::from("runs/ck.bin.report.json")
        );
    }

    #[test]
    fn statistic_values_map_onto_eval_statistics() {
        assert_eq!(
            StatisticArg::Entailment.to_statistic(),
            ZeroShotStatistic::Entailment
        );
        assert_eq!(
            StatisticArg::EntailmentMinusContradiction.to_statistic(),
            ZeroShotStatistic::EntailmentMinusContradiction
        );
    }

    #[test]
    fn transfer_rejects_non_transfer_tasks() {
        for task in ["sct", "pretrain"] {
            let err = dispatch(Command::Transfer(TransferArgs {
                task: task.into(),
                config: "c".into(),
                init: "a".into(),
                out: "b".into(),
                set: vec![],
            }))
            .unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{task}: {err}");
        }
    }

    #[test]
    fn command_line_contract_stays_parseable() {
        // The documented command set, spelled exactly as the interface
        // promises it.
        Cli::command().debug_assert();
    }
}
