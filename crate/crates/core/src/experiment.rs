//! Phantom train/evaluate run: generate a dataset, train both stages with
//! one fold held out, and score the cascade on that fold.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{accuracy, dice, evaluate_case, MyocardiumDefinition, SegReport};
use crate::phantom::{derive_seed, generate_dataset, PhantomConfig};
use crate::pipeline::{
    classify, make_folds, run_pipeline, train_stage, CaseClass, CaseRecord, PipelineConfig, TrainOutcome,
};
use crate::volume::{label_mask, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub phantom: PhantomConfig,
    pub n_cases: usize,
    pub pathological_fraction: f64,
    pub seed: u64,
    pub held_out_fold: usize,
    pub pipeline: PipelineConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            phantom: PhantomConfig::default(),
            n_cases: 25,
            pathological_fraction: 0.67,
            seed: 42,
            held_out_fold: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub id: String,
    pub truth: CaseClass,
    pub predicted: CaseClass,
    pub labels: LabelMap,
    pub report: SegReport,
    pub whole_lv_dice: f64,
    pub lesion_dice: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
    pub cases: Vec<CaseResult>,
    /// Mean over held-out cases.
    pub whole_lv_dice: f64,
    /// Mean over held-out pathological cases.
    pub lesion_dice: f64,
    pub accuracy: f64,
}

/// Seed used to train `stage` for `fold` under a run seed.
pub fn training_seed(seed: u64, stage: u8, fold: usize) -> u64 {
    derive_seed(seed, 1000 + 16 * stage as u64 + fold as u64)
}

/// Generated cases with folds assigned.
pub fn phantom_cases(exp: &Experiment) -> Result<Vec<CaseRecord>> {
    let generated = generate_dataset(&exp.phantom, exp.n_cases, exp.pathological_fraction, exp.seed)?;
    let mut cases: Vec<CaseRecord> = generated.into_iter().map(|g| g.record).collect();
    let folds = make_folds(&cases, exp.pipeline.folds, exp.seed)?;
    for (c, f) in cases.iter_mut().zip(folds) {
        c.fold = Some(f);
    }
    Ok(cases)
}

pub fn run_experiment(exp: &Experiment) -> Result<ExperimentResult> {
    let cfg = &exp.pipeline;
    cfg.validate()?;
    let cases = phantom_cases(exp)?;
    let pre = cases
        .iter()
        .map(|c| c.preprocessed(&cfg.preprocess))
        .collect::<Result<Vec<_>>>()?;
    let fold = exp.held_out_fold;
    let stage1 = train_stage(&pre, &cfg.stage1, fold, cfg.roi_margin, training_seed(exp.seed, 1, fold))?;
    let stage2 = train_stage(&pre, &cfg.stage2, fold, cfg.roi_margin, training_seed(exp.seed, 2, fold))?;

    let mut results = Vec::new();
    for case in cases.iter().filter(|c| c.fold == Some(fold)) {
        let out = run_pipeline(
            &case.image,
            std::slice::from_ref(&stage1.checkpoint),
            std::slice::from_ref(&stage2.checkpoint),
            cfg,
        )?;
        let gt = case.labels.as_ref().expect("phantoms carry labels");
        let lv = [1, 2, 3, 4];
        let lesion = [3, 4];
        results.push(CaseResult {
            id: case.id.clone(),
            truth: classify(gt, &cfg.classifier),
            predicted: out.class,
            whole_lv_dice: dice(&label_mask(&out.labels, &lv), &label_mask(gt, &lv))?,
            lesion_dice: dice(&label_mask(&out.labels, &lesion), &label_mask(gt, &lesion))?,
            report: evaluate_case(&out.labels, gt, MyocardiumDefinition::default())?,
            labels: out.labels,
        });
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let lv: Vec<f64> = results.iter().map(|r| r.whole_lv_dice).collect();
    let les: Vec<f64> = results
        .iter()
        .filter(|r| r.truth == CaseClass::Pathological)
        .map(|r| r.lesion_dice)
        .collect();
    let pred: Vec<CaseClass> = results.iter().map(|r| r.predicted).collect();
    let truth: Vec<CaseClass> = results.iter().map(|r| r.truth).collect();
    Ok(ExperimentResult {
        whole_lv_dice: mean(&lv),
        lesion_dice: mean(&les),
        accuracy: accuracy(&pred, &truth)?,
        stage1,
        stage2,
        cases: results,
    })
}
