use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use molmask::dataset::{element_distribution, load_csv, synth_generate, CategorySpace, Dataset};
use molmask::encoder::{Encoder, EncoderConfig, EncoderError, PreparedGraph};
use molmask::imbalance::WeightScheme;
use molmask::metrics::{
    emit_report, evaluate_recall, GroupSpec, NodePredictor, RecallReport, Report, ReportFormat, SchemeLoss,
    SchemeRecall,
};
use molmask::pipeline::{
    finetune as run_finetune, load_checkpoint, pretrain as run_pretrain, run_experiment_grid, save_checkpoint,
    FinetuneInit, GridReport, LossLog, MaskMode, PipelineError,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, load_groups, load_synth};
use crate::manifest::Run;
use crate::CliError;

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::NonFiniteLoss { .. } => CliError::Training(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("config serializes")
}

fn emit(run: &mut Run, name: &str, report: &Report, format: ReportFormat) -> Result<(), CliError> {
    emit_report(report, run.path(name), format).map_err(input)?;
    run.record(name);
    Ok(())
}

fn read_data(csv: Option<&Path>, synth: Option<&Path>) -> Result<(Dataset, Value), CliError> {
    match (csv, synth) {
        (Some(path), _) => Ok((load_csv(path).map_err(input)?, json!({ "csv": path }))),
        (None, Some(path)) => {
            let config = load_synth(path)?;
            Ok((synth_generate(&config).map_err(input)?, json!({ "synth": config })))
        }
        (None, None) => Err(CliError::Input("no input data given".into())),
    }
}

pub fn stats(csv: Option<PathBuf>, synth: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (dataset, source) = read_data(csv.as_deref(), synth.as_deref())?;
    let stats = element_distribution(&dataset).map_err(input)?;
    let export = stats.export();

    let mut table = String::from("category,count,proportion\n");
    for (category, count) in stats.nonzero() {
        writeln!(table, "{},{count},{}", dataset.space.name(category), stats.proportion(category)).unwrap();
    }
    let mut run = Run::start("stats", out, started)?;
    run.write_json("stats.json", &export)?;
    run.write("stats.csv", table.as_bytes())?;
    run.finish(synth.as_deref(), source, Value::Null)
}

pub fn pretrain(config_path: &Path, out: &Path, scheme: Option<&str>, epochs: Option<usize>) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config = config::load(config_path)?;
    if let Some(name) = scheme {
        config.pretrain.scheme = name.parse::<WeightScheme>().map_err(input)?;
    }
    if let Some(epochs) = epochs {
        config.pretrain.epochs = epochs;
    }
    config.pretrain.validate().map_err(pipeline_error)?;
    let dataset = config.dataset()?;
    let result = run_pretrain(&dataset, &config.encoder, &config.pretrain).map_err(pipeline_error)?;

    let mut run = Run::start("pretrain", out, started)?;
    save_checkpoint(&result.checkpoint, run.path("checkpoint.bin")).map_err(input)?;
    run.record("checkpoint.bin");
    let curves = Report::LossCurves(vec![SchemeLoss {
        scheme: config.pretrain.scheme,
        loss_log: result.loss_log,
    }]);
    emit(&mut run, "loss_log.csv", &curves, ReportFormat::Csv)?;
    run.finish(Some(config_path), to_value(&config), to_value(&config.pretrain.seeds))
}

fn validation_curve(log: &LossLog) -> String {
    let mut out = String::from("epoch,train_mae,validation_mae\n");
    for e in log.entries() {
        let validation = e.validation.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{validation}", e.epoch, e.train_loss).unwrap();
    }
    out
}

#[derive(Serialize)]
struct FinetuneSummary {
    init: String,
    checkpoint: Option<String>,
    min_validation_mae: f64,
    initial_validation_mae: f64,
    epochs: usize,
}

pub fn finetune(config_path: &Path, checkpoint: Option<&Path>, out: &Path, epochs: Option<usize>) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config = config::load(config_path)?;
    if let Some(epochs) = epochs {
        config.finetune.epochs = epochs;
    }
    config.finetune.validate().map_err(pipeline_error)?;
    let start = checkpoint
        .map(|p| load_checkpoint(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))))
        .transpose()?;
    let dataset = config.dataset()?;
    let init = start.as_ref().map_or(FinetuneInit::Fresh, FinetuneInit::Checkpoint);
    let result = run_finetune(init, &dataset, &config.encoder, &config.finetune).map_err(pipeline_error)?;

    let mut run = Run::start("finetune", out, started)?;
    save_checkpoint(&result.to_checkpoint(&config.finetune), run.path("checkpoint.bin")).map_err(input)?;
    run.record("checkpoint.bin");
    run.write("loss_log.csv", validation_curve(&result.loss_log).as_bytes())?;
    run.write_json(
        "summary.json",
        &FinetuneSummary {
            init: result.init.to_string(),
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            min_validation_mae: result.min_validation_mae,
            initial_validation_mae: result.initial_validation_mae,
            epochs: config.finetune.epochs,
        },
    )?;
    run.finish(Some(config_path), to_value(&config), to_value(&config.finetune.seeds))
}

/// Predicts every masked node's true category.
struct Oracle;

impl NodePredictor for Oracle {
    fn predict_masked(&self, graphs: &[&PreparedGraph], masks: &[Vec<usize>]) -> Result<Vec<Vec<usize>>, EncoderError> {
        Ok(graphs
            .iter()
            .zip(masks)
            .map(|(g, m)| m.iter().map(|&n| g.graph().category(n)).collect())
            .collect())
    }
}

pub struct RecallArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub synth: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub mask_mode: MaskMode,
    pub seed: u64,
    pub oracle: bool,
    pub out: PathBuf,
}

pub fn recall(args: RecallArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let checkpoint = match (&args.checkpoint, args.oracle) {
        (Some(p), false) => {
            Some(load_checkpoint(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?)
        }
        _ => None,
    };
    let (dataset, source) = read_data(args.data.as_deref(), args.synth.as_deref())?;
    let space = dataset.space;
    let groups = match &args.groups {
        Some(path) => load_groups(path, space)?,
        None => GroupSpec::default_for(space),
    };
    let encoder_config = checkpoint.as_ref().map_or_else(
        || EncoderConfig {
            num_element_categories: space.num_categories(),
            ..EncoderConfig::default()
        },
        |c| c.encoder.clone(),
    );
    if encoder_config.num_element_categories != space.num_categories() {
        return Err(CliError::Input(format!(
            "checkpoint head has {} categories, data has {}",
            encoder_config.num_element_categories,
            space.num_categories()
        )));
    }
    let graphs: Vec<PreparedGraph> = dataset
        .featurize()
        .map_err(input)?
        .into_iter()
        .map(|g| PreparedGraph::new(g, &encoder_config))
        .collect();
    let (report, scheme) = match &checkpoint {
        Some(c) => {
            let model = Encoder::with_parameters(c.encoder.clone(), c.parameters.clone()).map_err(input)?;
            (recall_of(&model, &graphs, space, &args, &groups)?, c.train.scheme)
        }
        None => (recall_of(&Oracle, &graphs, space, &args, &groups)?, WeightScheme::NoWeight),
    };

    let mut run = Run::start("recall", &args.out, started)?;
    let table = Report::Recall(vec![SchemeRecall { scheme, report }]);
    emit(&mut run, "recall.json", &table, ReportFormat::Json)?;
    emit(&mut run, "recall.csv", &table, ReportFormat::Csv)?;
    let config = json!({
        "checkpoint": args.checkpoint,
        "data": source,
        "groups": groups,
        "mask_mode": args.mask_mode,
        "oracle": args.oracle,
    });
    run.finish(None, config, json!({ "recall": args.seed }))
}

fn recall_of<P: NodePredictor>(
    model: &P,
    graphs: &[PreparedGraph],
    space: CategorySpace,
    args: &RecallArgs,
    groups: &GroupSpec,
) -> Result<RecallReport, CliError> {
    evaluate_recall(model, graphs, space, args.mask_mode, groups, args.seed).map_err(input)
}

/// Recall and MAE tables plus loss curves from a grid report.
fn emit_tables(run: &mut Run, report: &GridReport) -> Result<(), CliError> {
    let first_mode = report.cells.first().map(|c| c.mask_mode);
    let first_seed = report.cells.first().map(|c| c.seed);
    let recall = Report::Recall(
        report
            .cells
            .iter()
            .filter(|c| Some(c.mask_mode) == first_mode)
            .filter_map(|c| {
                c.recall_report.clone().map(|report| SchemeRecall {
                    scheme: c.scheme,
                    report,
                })
            })
            .collect(),
    );
    emit(run, "recall.csv", &recall, ReportFormat::Csv)?;
    emit(run, "recall.json", &recall, ReportFormat::Json)?;
    emit(run, "mae.csv", &Report::FinetuneMae(report.cells.clone()), ReportFormat::Csv)?;
    let curves = Report::LossCurves(
        report
            .cells
            .iter()
            .filter(|c| Some(c.mask_mode) == first_mode && Some(c.seed) == first_seed && c.error.is_none())
            .map(|c| SchemeLoss {
                scheme: c.scheme,
                loss_log: c.loss_log.clone(),
            })
            .collect(),
    );
    emit(run, "loss_log.csv", &curves, ReportFormat::Csv)
}

pub fn grid(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let config = config::load(config_path)?;
    let dataset = config.dataset()?;
    let grid_config = config.grid_config(dataset.space)?;
    grid_config.validate().map_err(pipeline_error)?;

    let mut run = Run::start("grid", out, started)?;
    let report = run_experiment_grid(&dataset, &grid_config, Some(out)).map_err(pipeline_error)?;
    run.record("cells");
    run.write_json("grid_report.json", &report)?;
    emit_tables(&mut run, &report)?;
    run.finish(Some(config_path), to_value(&config), json!({ "grid": grid_config.seeds }))?;

    if !report.cells.is_empty() && report.failed() == report.cells.len() {
        let first = report.cells[0].error.as_deref().unwrap_or_default();
        return Err(CliError::Training(format!(
            "all {} grid cells failed; first error: {first}",
            report.cells.len()
        )));
    }
    Ok(())
}

pub fn report(grid_path: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let text = fs::read_to_string(grid_path).map_err(|e| CliError::Input(format!("{}: {e}", grid_path.display())))?;
    let report: GridReport = config::from_value(serde_json::from_str(&text).map_err(input)?, grid_path)?;
    let mut run = Run::start("report", out, started)?;
    emit_tables(&mut run, &report)?;
    run.finish(Some(grid_path), Value::Null, Value::Null)
}
