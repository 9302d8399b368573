//! Trains stage 1 on two folds and averages the two models at inference.
//!
//! cargo run --release --example ensemble_predict

use mi_cascade::metrics::dice;
use mi_cascade::phantom::{generate_dataset, PhantomConfig};
use mi_cascade::pipeline::{make_folds, predict_stage, stage1_targets, train_stage, CaseRecord, StageConfig};
use mi_cascade::preprocess::PreprocessConfig;
use mi_cascade::volume::label_mask;

fn main() -> mi_cascade::Result<()> {
    let mut cases: Vec<CaseRecord> = generate_dataset(&PhantomConfig::default(), 10, 0.6, 8)?
        .into_iter()
        .map(|g| g.record.preprocessed(&PreprocessConfig::default()))
        .collect::<mi_cascade::Result<_>>()?;
    let folds = make_folds(&cases, 5, 8)?;
    for (c, f) in cases.iter_mut().zip(folds) {
        c.fold = Some(f);
    }
    let mut stage = StageConfig::stage1();
    stage.hyper.max_epochs = 12;
    let members = [0, 1]
        .iter()
        .map(|&f| train_stage(&cases, &stage, f, 5, 100 + f as u64).map(|o| o.checkpoint))
        .collect::<mi_cascade::Result<Vec<_>>>()?;

    let test = cases.iter().find(|c| c.fold == Some(0)).unwrap();
    let gt = label_mask(&stage1_targets(test.labels.as_ref().unwrap()), &[1]);
    for (name, ms) in [("fold 0 model", &members[..1]), ("fold 1 model", &members[1..]), ("ensemble", &members[..])] {
        let probs = predict_stage(ms, &test.image, &stage)?;
        let lv = label_mask(&probs.argmax(), &[1, 2]);
        println!("{name:<13} whole-LV Dice on {}: {:.4}", test.id, dice(&lv, &gt)?);
    }
    Ok(())
}
