//! Trains the whole-LV stage on a few phantoms and saves the checkpoint and
//! loss trace.
//!
//! cargo run --release --example train_stage [out_dir]

use mi_cascade::phantom::{generate_dataset, PhantomConfig};
use mi_cascade::pipeline::{make_folds, train_stage, CaseRecord, StageConfig};
use mi_cascade::preprocess::PreprocessConfig;
use mi_cascade::unet::{read_checkpoint, write_checkpoint};

fn main() -> mi_cascade::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let mut cases: Vec<CaseRecord> = generate_dataset(&PhantomConfig::default(), 8, 0.5, 3)?
        .into_iter()
        .map(|g| g.record)
        .collect();
    let folds = make_folds(&cases, 4, 3)?;
    for (c, f) in cases.iter_mut().zip(folds) {
        c.fold = Some(f);
    }
    let pre = cases
        .iter()
        .map(|c| c.preprocessed(&PreprocessConfig::default()))
        .collect::<mi_cascade::Result<Vec<_>>>()?;

    let mut stage = StageConfig::stage1();
    stage.hyper.max_epochs = 10;
    let out = train_stage(&pre, &stage, 0, 5, 1)?;
    for e in [0, 4, 9] {
        println!("epoch {e}: mean loss {:.4}", out.epoch_loss(e).unwrap());
    }

    let ckpt = dir.join("stage1_fold0.ckpt");
    write_checkpoint(&out.checkpoint, &ckpt)?;
    std::fs::write(dir.join("stage1_fold0_loss.jsonl"), out.loss_trace_lines())
        .map_err(|e| mi_cascade::Error::Invalid(e.to_string()))?;
    let back = read_checkpoint(&ckpt)?;
    println!(
        "{} parameters written to {}; reload identical: {}",
        back.params.num_parameters(),
        ckpt.display(),
        back == out.checkpoint
    );
    Ok(())
}
