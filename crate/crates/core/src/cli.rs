//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate, load_instance_scores, save_instance_scores, t_test_one_tailed, write_plot_csv, EvalConfig, InstanceScores,
    MetricsReport, PlotRow, SIGNIFICANCE_LEVEL,
};
use crate::io;
use crate::policy::PolicyModel;
use crate::pool::{Direction, Instance, ScheduleState, Target};
use crate::rewards::{ConsistencyPredictors, FactOverlapOracle, PredictorAccuracy, PredictorConfig, PredictorExample};
use crate::task::SyntheticTask;
use crate::trainer::{self, Algorithm, OrderMode, Resources, RoundRecord, TrainConfig};
use crate::vocab::Vocabulary;

pub const TASK_FILE: &str = "task.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const FACTS_FILE: &str = "facts.json";
pub const PREDICTORS_FILE: &str = "predictors.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoints/final.json";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const POOL_FILE: &str = "pool.jsonl";

#[derive(Debug, Parser)]
#[command(name = "multireward", version, about = "Multi-reward conditioned training on a synthetic rationale task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task: vocabulary, fact set and three splits.
    PrepareData(PrepareArgs),
    /// Train the two consistency predictors on the train split.
    TrainPredictors(PredictorArgs),
    /// Train a model with one algorithm and evaluate it on the test split.
    Run(RunArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// One-tailed Welch t-test between two evaluations.
    Compare(CompareArgs),
    /// Collect run logs into one long-format CSV.
    EmitPlotData(PlotArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 4)]
    pub choices: usize,
    #[arg(long, default_value_t = 7)]
    pub length: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictorArgs {
    /// Directory written by prepare-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<data>/predictors.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predictor hyperparameters (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoArg {
    Sft,
    Quark,
    Classic,
    Additive,
    Product,
    FiltAcc,
    FiltAll,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Sft => Algorithm::Sft,
            AlgoArg::Quark => Algorithm::Quark,
            AlgoArg::Classic => Algorithm::Classic,
            AlgoArg::Additive => Algorithm::Additive,
            AlgoArg::Product => Algorithm::Product,
            AlgoArg::FiltAcc => Algorithm::FiltAcc,
            AlgoArg::FiltAll => Algorithm::FiltAll,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    WeakFirst,
    StrongFirst,
    Explicit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Best,
    Worst,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub algo: AlgoArg,
    /// Training configuration (JSON); defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<data>/predictors.json`.
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// SFT checkpoint or run directory to start from.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; its checkpoint and final schedule are used.
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<PathBuf>,
    /// Bare checkpoint, evaluated with `--active` (default: none).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated active rewards for a bare checkpoint.
    #[arg(long, value_delimiter = ',', conflicts_with = "run")]
    pub active: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "best")]
    pub target: TargetArg,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    /// Report path; per-instance scores go next to it as `<stem>.scores.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directory or per-instance scores file.
    pub a: PathBuf,
    pub b: PathBuf,
    /// A reward name or `combined`.
    #[arg(long, default_value = "combined")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything prepare-data writes, loaded back.
pub struct TaskData {
    pub task: SyntheticTask,
    pub vocab: Vocabulary,
    pub oracle: FactOverlapOracle,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl TaskData {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            task: io::read_json(&dir.join(TASK_FILE))?,
            vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
            oracle: FactOverlapOracle::load(&dir.join(FACTS_FILE))?,
            train: io::read_jsonl(&dir.join("train.jsonl"))?,
            val: io::read_jsonl(&dir.join("val.jsonl"))?,
            test: io::read_jsonl(&dir.join("test.jsonl"))?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Instance]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }

    pub fn resources<'a>(&'a self, predictors: &'a ConsistencyPredictors) -> Resources<'a> {
        Resources {
            vocab: &self.vocab,
            predictors,
            plausibility: &self.oracle,
            train: &self.train,
            val: &self.val,
        }
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io::io_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io::io_err(dir))
}

pub fn prepare_data(args: &PrepareArgs) -> Result<()> {
    let task = SyntheticTask {
        choices: args.choices,
        length: args.length,
    };
    task.validate()?;
    let vocab = task.vocabulary()?;
    let splits = task.generate((args.train, args.val, args.test), args.seed, &vocab)?;
    ensure_empty_dir(&args.out, args.force)?;
    io::write_json(&args.out.join(TASK_FILE), &task)?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    task.fact_oracle()?.save(&args.out.join(FACTS_FILE))?;
    io::write_jsonl(&args.out.join("train.jsonl"), &splits.train)?;
    io::write_jsonl(&args.out.join("val.jsonl"), &splits.val)?;
    io::write_jsonl(&args.out.join("test.jsonl"), &splits.test)?;
    Ok(())
}

fn predictor_examples(instances: &[Instance], vocab: &Vocabulary) -> Result<Vec<PredictorExample>> {
    instances.iter().map(|i| i.predictor_example(vocab)).collect()
}

/// Trains predictors on the train split; returns validation accuracy.
pub fn train_predictors(args: &PredictorArgs) -> Result<PredictorAccuracy> {
    let data = TaskData::load(&args.data)?;
    let mut config: PredictorConfig = match &args.config {
        Some(p) => io::read_json(p)?,
        None => PredictorConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let train = predictor_examples(&data.train, &data.vocab)?;
    let predictors = ConsistencyPredictors::train(&train, data.vocab.size(), &config)?;
    let accuracy = predictors.accuracy(&predictor_examples(&data.val, &data.vocab)?)?;
    let out = args.out.clone().unwrap_or_else(|| args.data.join(PREDICTORS_FILE));
    predictors.save(&out)?;
    Ok(accuracy)
}

fn load_predictors(data: &Path, path: &Option<PathBuf>) -> Result<ConsistencyPredictors> {
    let path = path.clone().unwrap_or_else(|| data.join(PREDICTORS_FILE));
    if !path.exists() {
        return Err(Error::Config(format!(
            "predictor checkpoint {} not found; run train-predictors first",
            path.display()
        )));
    }
    let predictors = ConsistencyPredictors::load(&path)?;
    if !predictors.is_trained() {
        return Err(Error::Untrained);
    }
    Ok(predictors)
}

/// Resolves `--ref`: a checkpoint file or a run directory.
fn reference_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn run(args: &RunArgs) -> Result<MetricsReport> {
    let mut config: TrainConfig = match &args.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    config.algorithm = args.algo.into();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(order) = args.order {
        config.order = match order {
            OrderArg::WeakFirst => OrderMode::WeakFirst,
            OrderArg::StrongFirst => OrderMode::StrongFirst,
            OrderArg::Explicit => OrderMode::Explicit,
        };
    }
    if let Some(dir) = args.direction {
        config.direction = match dir {
            DirectionArg::Left => Direction::Left,
            DirectionArg::Right => Direction::Right,
        };
    }
    config.validate()?;
    let sft = match (&args.reference, config.algorithm.needs_reference()) {
        (Some(p), true) => {
            let path = reference_checkpoint(p);
            if !path.exists() {
                return Err(Error::Config(format!("reference checkpoint {} not found", path.display())));
            }
            Some(PolicyModel::load(&path)?)
        }
        (None, true) => {
            return Err(Error::Config(format!(
                "--algo {:?} needs --ref pointing at an SFT checkpoint",
                config.algorithm
            )))
        }
        (_, false) => None,
    };
    let data = TaskData::load(&args.data)?;
    let predictors = load_predictors(&args.data, &args.predictors)?;
    ensure_empty_dir(&args.out, args.force)?;
    io::write_json(&args.out.join(CONFIG_FILE), &config)?;

    let res = data.resources(&predictors);
    let output = trainer::run(&config, sft.as_ref(), &res)?;
    output.model.save(&args.out.join(CHECKPOINT_FILE))?;
    io::write_jsonl(&args.out.join(RUNLOG_FILE), &output.log)?;
    io::write_json(&args.out.join(SCHEDULE_FILE), &output.schedule)?;
    output.pool.save(&args.out.join(POOL_FILE))?;

    let eval = EvalConfig {
        max_len: config.max_len,
        target: Target::Best,
    };
    let (report, scores) = evaluate(&output.model, &data.test, &output.schedule, &res.scoring(), &eval)?;
    io::write_json(&args.out.join(REPORT_FILE), &report)?;
    save_instance_scores(&args.out.join(SCORES_FILE), &scores)?;
    Ok(report)
}

fn scores_path_for(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.scores.jsonl"))
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let (checkpoint, schedule) = match (&args.run, &args.checkpoint) {
        (Some(run), None) => (
            run.join(CHECKPOINT_FILE),
            io::read_json::<ScheduleState>(&run.join(SCHEDULE_FILE))?,
        ),
        (None, Some(ckpt)) => (ckpt.clone(), ScheduleState::all(&args.active)),
        _ => return Err(Error::Config("pass exactly one of --run or --checkpoint".into())),
    };
    let data = TaskData::load(&args.data)?;
    let predictors = load_predictors(&args.data, &args.predictors)?;
    let model = PolicyModel::load(&checkpoint)?;
    let res = data.resources(&predictors);
    let config = EvalConfig {
        max_len: args.max_len,
        target: match args.target {
            TargetArg::Best => Target::Best,
            TargetArg::Worst => Target::Worst,
        },
    };
    let (report, scores) = evaluate(&model, data.split(&args.split)?, &schedule, &res.scoring(), &config)?;
    io::write_json(&args.out, &report)?;
    save_instance_scores(&scores_path_for(&args.out), &scores)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub significant: bool,
}

fn load_scores_from(path: &Path) -> Result<Vec<InstanceScores>> {
    if path.is_dir() {
        load_instance_scores(&path.join(SCORES_FILE))
    } else {
        load_instance_scores(path)
    }
}

fn metric_values(scores: &[InstanceScores], metric: &str) -> Result<Vec<f64>> {
    scores
        .iter()
        .map(|s| {
            if metric == "combined" {
                s.combined()
            } else {
                s.scores
                    .get(metric)
                    .copied()
                    .ok_or_else(|| Error::Reward(format!("no {metric:?} score for instance {}", s.id)))
            }
        })
        .collect()
}

/// Tests whether A's per-instance metric exceeds B's, from stored scores.
pub fn compare(args: &CompareArgs) -> Result<Comparison> {
    let a = metric_values(&load_scores_from(&args.a)?, &args.metric)?;
    let b = metric_values(&load_scores_from(&args.b)?, &args.metric)?;
    let p = t_test_one_tailed(&a, &b)?;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    Ok(Comparison {
        metric: args.metric.clone(),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: mean(&a),
        mean_b: mean(&b),
        p_value: p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// One row per logged round per run, the run id being the directory name.
pub fn emit_plot_data(args: &PlotArgs) -> Result<Vec<PlotRow>> {
    let mut rows = Vec::new();
    for dir in &args.runs {
        let log: Vec<RoundRecord> = io::read_jsonl(&dir.join(RUNLOG_FILE))?;
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        for rec in &log {
            rows.push(PlotRow::from_report(&id, rec.step, &rec.validation)?);
        }
    }
    write_plot_csv(&args.out, &rows)?;
    Ok(rows)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: "stdout".into(),
        source,
    })?;
    println!("{text}");
    Ok(())
}

/// Executes one parsed command, printing its summary to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(args) => prepare_data(&args),
        Command::TrainPredictors(args) => print_json(&train_predictors(&args)?),
        Command::Run(args) => print_json(&run(&args)?),
        Command::Eval(args) => print_json(&eval(&args)?),
        Command::Compare(args) => {
            let c = compare(&args)?;
            print_json(&c)?;
            println!("{}", if c.significant { "significant" } else { "not significant" });
            Ok(())
        }
        Command::EmitPlotData(args) => emit_plot_data(&args).map(|_| ()),
    }
}
