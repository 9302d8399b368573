//! `mi-cascade` command line: phantom generation, preprocessing, training,
//! prediction, evaluation and classification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::training_seed;
use crate::metrics::{accuracy, evaluate_case, seg_report_csv, summarize, MyocardiumDefinition, SegReport};
use crate::phantom::{generate_dataset, PhantomConfig};
use crate::pipeline::{
    classification_csv, classify, make_folds, prediction_path, read_dataset, read_json, run_pipeline, train_stage,
    write_dataset, write_json, CaseClass, CaseRecord, DatasetManifest, PipelineConfig, PreprocessingRecord,
};
use crate::preprocess::PREPROCESS_ORDER;
use crate::unet::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::volume::{read_labels, write_miv, LabelMap};

/// Everything a run can be configured with. Missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_cases: usize,
    pub pathological_fraction: f64,
    pub phantom: PhantomConfig,
    pub pipeline: PipelineConfig,
    pub myocardium: MyocardiumDefinition,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            n_cases: 100,
            pathological_fraction: 0.67,
            phantom: PhantomConfig::default(),
            pipeline: PipelineConfig::default(),
            myocardium: MyocardiumDefinition::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pathological_fraction) {
            return Err(Error::config("pathological_fraction", "must be in [0, 1]"));
        }
        self.phantom.validate()?;
        self.pipeline.validate()
    }
}

/// Written next to the outputs of every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub preprocessing_order: Vec<String>,
    pub config: RunConfig,
    pub folds: BTreeMap<String, Option<usize>>,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "mi-cascade", version, about = "Cascaded DE-MRI segmentation and classification on phantoms")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for case-level parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    PhantomGen(PhantomGenArgs),
    /// Resample and z-score a dataset.
    Preprocess(PreprocessArgs),
    /// Train one stage for one held-out fold.
    Train(TrainArgs),
    /// Run the cascade and classify every case.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Classify existing predictions with the lesion-count rule.
    Classify(ClassifyArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_cases: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub stage: u8,
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory holding `*.ckpt` files of both stages.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory with ground-truth labels.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::PhantomGen(a) => cmd_phantom_gen(config, a),
        Command::Preprocess(a) => cmd_preprocess(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Predict(a) => cmd_predict(config, a),
        Command::Evaluate(a) => cmd_evaluate(config, a),
        Command::Classify(a) => cmd_classify(config, a),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest(command: &str, config: &RunConfig, cases: &[CaseRecord]) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        seed: config.seed,
        preprocessing_order: PREPROCESS_ORDER.iter().map(|s| s.to_string()).collect(),
        config: config.clone(),
        folds: cases.iter().map(|c| (c.id.clone(), c.fold)).collect(),
        checkpoints: Vec::new(),
        outputs: Vec::new(),
    }
}

pub fn cmd_phantom_gen(mut config: RunConfig, args: &PhantomGenArgs) -> Result<()> {
    if let Some(n) = args.n_cases {
        config.n_cases = n;
    }
    if let Some(f) = args.fraction {
        config.pathological_fraction = f;
    }
    config.validate()?;
    let generated = generate_dataset(&config.phantom, config.n_cases, config.pathological_fraction, config.seed)?;
    let seeds: Vec<u64> = generated.iter().map(|g| g.seed).collect();
    let mut cases: Vec<CaseRecord> = generated.into_iter().map(|g| g.record).collect();
    if cases.len() >= config.pipeline.folds {
        let folds = make_folds(&cases, config.pipeline.folds, config.seed)?;
        for (c, f) in cases.iter_mut().zip(folds) {
            c.fold = Some(f);
        }
    }
    let m = DatasetManifest {
        seed: Some(config.seed),
        phantom: Some(config.phantom),
        pathological_fraction: Some(config.pathological_fraction),
        preprocessing: None,
        cases: DatasetManifest::entries(&cases, Some(&seeds)),
    };
    write_dataset(&args.out, &m, &cases)
}

pub fn cmd_preprocess(config: RunConfig, args: &PreprocessArgs) -> Result<()> {
    config.validate()?;
    let (mut m, cases) = read_dataset(&args.input)?;
    let pre = config.pipeline.preprocess;
    let out: Vec<CaseRecord> = cases
        .par_iter()
        .map(|c| c.preprocessed(&pre))
        .collect::<Result<_>>()?;
    m.preprocessing = Some(PreprocessingRecord::from(&pre));
    m.cases = DatasetManifest::entries(&out, m.cases.iter().map(|e| e.seed).collect::<Option<Vec<_>>>().as_deref());
    write_dataset(&args.out, &m, &out)?;
    write_json(args.out.join("preprocess_run.json"), &manifest("preprocess", &config, &out))
}

fn checkpoint_name(stage: u8, fold: usize) -> String {
    format!("stage{stage}_fold{fold}")
}

/// Dataset on the preprocessing grid, preprocessing on the fly if needed.
fn training_cases(config: &RunConfig, dir: &Path) -> Result<Vec<CaseRecord>> {
    let (m, cases) = read_dataset(dir)?;
    if let Some(c) = cases.iter().find(|c| c.fold.is_none()) {
        return Err(Error::Invalid(format!("case {} has no fold assignment", c.id)));
    }
    match m.preprocessing {
        Some(p) if p.target_spacing == config.pipeline.preprocess.target_spacing => Ok(cases),
        _ => cases.iter().map(|c| c.preprocessed(&config.pipeline.preprocess)).collect(),
    }
}

pub fn cmd_train(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(e) = args.epochs {
        config.pipeline.stage1.hyper.max_epochs = e;
        config.pipeline.stage2.hyper.max_epochs = e;
    }
    config.validate()?;
    let stage = *config.pipeline.stage(args.stage)?;
    if args.fold >= config.pipeline.folds {
        return Err(Error::config("fold", format!("must be below {}", config.pipeline.folds)));
    }
    let cases = training_cases(&config, &args.dataset)?;
    let seed = training_seed(config.seed, args.stage, args.fold);
    let outcome = train_stage(&cases, &stage, args.fold, config.pipeline.roi_margin, seed)?;
    create_dir(&args.out)?;
    let name = checkpoint_name(args.stage, args.fold);
    let ckpt = args.out.join(format!("{name}.ckpt"));
    let trace = args.out.join(format!("{name}_loss.jsonl"));
    write_checkpoint(&outcome.checkpoint, &ckpt)?;
    write_text(&trace, &outcome.loss_trace_lines())?;
    let mut run = manifest("train", &config, &cases);
    run.seed = seed;
    run.checkpoints.push(ckpt);
    run.outputs.push(trace);
    write_json(args.out.join(format!("{name}_run.json")), &run)
}

/// `*.ckpt` files under `dir`, split by stage, in file-name order.
pub fn load_checkpoints(dir: &Path) -> Result<(Vec<Checkpoint>, Vec<Checkpoint>, Vec<PathBuf>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let (mut s1, mut s2) = (Vec::new(), Vec::new());
    for p in &paths {
        let c = read_checkpoint(p)?;
        match c.stage {
            1 => s1.push(c),
            2 => s2.push(c),
            s => return Err(Error::Checkpoint(format!("{}: unknown stage {s}", p.display()))),
        }
    }
    for (id, v) in [(1, &s1), (2, &s2)] {
        if v.is_empty() {
            return Err(Error::Checkpoint(format!(
                "no stage {id} checkpoint in {}",
                dir.display()
            )));
        }
    }
    Ok((s1, s2, paths))
}

pub fn cmd_predict(config: RunConfig, args: &PredictArgs) -> Result<()> {
    config.validate()?;
    let (s1, s2, paths) = load_checkpoints(&args.checkpoints)?;
    let (_, cases) = read_dataset(&args.dataset)?;
    let results: Vec<(String, LabelMap, CaseClass)> = cases
        .par_iter()
        .map(|c| {
            run_pipeline(&c.image, &s1, &s2, &config.pipeline)
                .map(|o| (c.id.clone(), o.labels, o.class))
                .map_err(|e| Error::Invalid(format!("case {}: {e}", c.id)))
        })
        .collect::<Result<_>>()?;
    create_dir(&args.out)?;
    let mut run = manifest("predict", &config, &cases);
    run.checkpoints = paths;
    for (id, labels, _) in &results {
        let p = prediction_path(&args.out, id);
        write_miv(labels, &p)?;
        run.outputs.push(p);
    }
    let rows: Vec<(String, CaseClass)> = results.iter().map(|(id, _, c)| (id.clone(), *c)).collect();
    let csv = args.out.join("classification.csv");
    write_text(&csv, &classification_csv(&rows))?;
    run.outputs.push(csv);
    write_json(args.out.join("predict_run.json"), &run)
}

/// `(id, path)` of every `<id>_pred.miv` in `dir`, sorted by id.
pub fn list_predictions(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let id = name.strip_suffix("_pred.miv")?.to_string();
            Some((id, p))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Invalid(format!("no *_pred.miv files in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ClassificationSummary {
    cases: usize,
    accuracy: f64,
}

#[derive(Debug, Serialize)]
struct EvaluationSummary {
    targets: BTreeMap<String, crate::metrics::TargetSummary>,
    classification: ClassificationSummary,
}

pub fn cmd_evaluate(config: RunConfig, args: &EvaluateArgs) -> Result<()> {
    config.validate()?;
    let preds = list_predictions(&args.pred)?;
    let (m, _) = read_dataset(&args.gt)?;
    let gt_paths: BTreeMap<&str, Option<&String>> = m.cases.iter().map(|e| (e.id.as_str(), e.label.as_ref())).collect();
    let mut jobs = Vec::with_capacity(preds.len());
    for (id, path) in &preds {
        let label = gt_paths
            .get(id.as_str())
            .copied()
            .flatten()
            .ok_or_else(|| Error::Invalid(format!("case {id}: no ground truth in {}", args.gt.display())))?;
        jobs.push((id.clone(), path.clone(), args.gt.join(label)));
    }
    let rule = &config.pipeline.classifier;
    let evaluated: Vec<(String, SegReport, CaseClass, CaseClass)> = jobs
        .par_iter()
        .map(|(id, p, g)| {
            let pred = read_labels(p)?;
            let gt = read_labels(g)?;
            let report = evaluate_case(&pred, &gt, config.myocardium).map_err(|e| Error::Invalid(format!("case {id}: {e}")))?;
            Ok((id.clone(), report, classify(&pred, rule), classify(&gt, rule)))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<(String, SegReport)> = evaluated.iter().map(|(id, r, _, _)| (id.clone(), r.clone())).collect();
    let predicted: Vec<CaseClass> = evaluated.iter().map(|e| e.2).collect();
    let truth: Vec<CaseClass> = evaluated.iter().map(|e| e.3).collect();
    create_dir(&args.out)?;
    write_text(&args.out.join("evaluation.csv"), &seg_report_csv(&reports))?;
    write_json(
        args.out.join("summary.json"),
        &EvaluationSummary {
            targets: summarize(&reports),
            classification: ClassificationSummary {
                cases: predicted.len(),
                accuracy: accuracy(&predicted, &truth)?,
            },
        },
    )
}

pub fn cmd_classify(config: RunConfig, args: &ClassifyArgs) -> Result<()> {
    config.validate()?;
    let preds = list_predictions(&args.pred)?;
    let rows: Vec<(String, CaseClass)> = preds
        .par_iter()
        .map(|(id, p)| Ok((id.clone(), classify(&read_labels(p)?, &config.pipeline.classifier))))
        .collect::<Result<_>>()?;
    let csv = classification_csv(&rows);
    match &args.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
