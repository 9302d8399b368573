//! Trains both stages on generated phantoms and scores the held-out fold.
//!
//! cargo run --release --example phantom_experiment [config.json]

use std::time::Instant;

use mi_cascade::experiment::{run_experiment, Experiment};

fn main() -> mi_cascade::Result<()> {
    let exp: Experiment = match std::env::args().nth(1) {
        Some(path) => mi_cascade::pipeline::read_json(path)?,
        None => Experiment::default(),
    };
    let t = Instant::now();
    let r = run_experiment(&exp)?;
    for (name, o) in [("stage 1", &r.stage1), ("stage 2", &r.stage2)] {
        let last = o.checkpoint.params.config;
        println!(
            "{name}: base {} first-epoch loss {:.4} last-epoch loss {:.4}",
            last.base_channels,
            o.epoch_loss(0).unwrap_or(f64::NAN),
            o.epoch_loss(exp.pipeline.stage(o.checkpoint.stage)?.hyper.max_epochs - 1).unwrap_or(f64::NAN)
        );
    }
    for c in &r.cases {
        println!(
            "{} truth={} pred={} lv_dice={:.4} lesion_dice={:.4}",
            c.id,
            c.truth.as_str(),
            c.predicted.as_str(),
            c.whole_lv_dice,
            c.lesion_dice
        );
    }
    println!(
        "whole-LV Dice {:.4}  lesion Dice {:.4}  accuracy {:.2}  ({:.1}s)",
        r.whole_lv_dice,
        r.lesion_dice,
        r.accuracy,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
