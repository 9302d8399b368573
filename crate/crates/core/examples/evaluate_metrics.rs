//! Scores a degraded segmentation against phantom ground truth.
//!
//! cargo run --example evaluate_metrics

use mi_cascade::metrics::{evaluate_case, seg_report_csv, summarize, MyocardiumDefinition};
use mi_cascade::phantom::{generate_case_as, PhantomConfig};
use mi_cascade::pipeline::{classify, ClassifierRule};
use mi_cascade::volume::LabelMap;

/// Shifts every label one voxel along X and drops half of the no-reflow.
fn degrade(gt: &LabelMap) -> mi_cascade::Result<LabelMap> {
    let [_, _, nx] = gt.shape();
    LabelMap::from_fn(gt.shape(), gt.spacing(), |z, y, x| {
        let l = gt.get(z, y, x.saturating_sub(1).min(nx - 1));
        if l == 4 && x % 2 == 0 { 3 } else { l }
    })
}

fn main() -> mi_cascade::Result<()> {
    let config = PhantomConfig {
        no_reflow_probability: 1.0,
        ..PhantomConfig::default()
    };
    let mut reports = Vec::new();
    for seed in 0..3 {
        let case = generate_case_as(&config, seed, Some(seed != 2))?;
        let gt = case.labels.unwrap();
        let pred = degrade(&gt)?;
        println!("case {seed}: predicted class {}", classify(&pred, &ClassifierRule::default()).as_str());
        reports.push((format!("case_{seed}"), evaluate_case(&pred, &gt, MyocardiumDefinition::default())?));
    }
    print!("{}", seg_report_csv(&reports));
    for (target, s) in summarize(&reports) {
        println!(
            "{target:<11} Dice (%) {}  HD (mm) {}",
            s.dice_pct.unwrap_or_default(),
            s.hausdorff_mm.map_or("undefined".into(), |h| h.display(1.0))
        );
    }
    Ok(())
}
