//! Generates a phantom dataset with stratified folds and writes it to disk.
//!
//! cargo run --release --example phantom_dataset [out_dir]

use mi_cascade::phantom::{generate_dataset, PhantomConfig};
use mi_cascade::pipeline::{classify, make_folds, write_dataset, CaseRecord, ClassifierRule, DatasetManifest};

fn main() -> mi_cascade::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("phantoms"), Into::into);
    let config = PhantomConfig::default();
    let generated = generate_dataset(&config, 20, 0.67, 42)?;
    let seeds: Vec<u64> = generated.iter().map(|g| g.seed).collect();
    let mut cases: Vec<CaseRecord> = generated.into_iter().map(|g| g.record).collect();
    let folds = make_folds(&cases, 5, 42)?;
    for (c, f) in cases.iter_mut().zip(folds) {
        c.fold = Some(f);
    }
    let rule = ClassifierRule::default();
    for c in &cases {
        let l = c.labels.as_ref().unwrap();
        println!(
            "{} fold {} lesion voxels {:4} ground-truth class {}",
            c.id,
            c.fold.unwrap(),
            l.count_labels(&[3, 4]),
            classify(l, &rule).as_str()
        );
    }
    let manifest = DatasetManifest {
        seed: Some(42),
        phantom: Some(config),
        pathological_fraction: Some(0.67),
        preprocessing: None,
        cases: DatasetManifest::entries(&cases, Some(&seeds)),
    };
    write_dataset(&dir, &manifest, &cases)?;
    println!("wrote {} cases to {}", cases.len(), dir.display());
    Ok(())
}
