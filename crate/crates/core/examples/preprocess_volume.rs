//! Resamples an anisotropic phantom to the target spacing and z-scores it.
//!
//! cargo run --example preprocess_volume

use mi_cascade::phantom::{generate_case, PhantomConfig};
use mi_cascade::preprocess::{preprocess_image, resample_label, resample_label_to, PreprocessConfig};
use mi_cascade::volume::{label_mask, Spacing};

fn main() -> mi_cascade::Result<()> {
    let phantom = PhantomConfig {
        shape: [5, 48, 48],
        spacing: Spacing::new(8.0, 1.9, 1.9)?,
        cavity_radius: [8.0, 10.0],
        myocardium_thickness: [3.0, 4.0],
        infarct_probability: 1.0,
        ..PhantomConfig::default()
    };
    let case = generate_case(&phantom, 11)?;
    let labels = case.labels.as_ref().unwrap();
    let config = PreprocessConfig::default();

    let image = preprocess_image(&case.image, &config)?;
    let resampled = resample_label(labels, config.target_spacing)?;
    println!("original     {:?} @ {:?}", case.image.shape(), case.image.spacing().as_array());
    println!("preprocessed {:?} @ {:?}", image.shape(), image.spacing().as_array());

    let n = image.len() as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    println!("z-scored mean {mean:.2e}, std {:.6}", var.sqrt());

    let back = resample_label_to(&resampled, labels.shape(), labels.spacing())?;
    let lv = [1, 2, 3, 4];
    let agree = label_mask(&back, &lv)
        .data()
        .iter()
        .zip(label_mask(labels, &lv).data())
        .filter(|(a, b)| a == b)
        .count();
    println!("whole-LV agreement after a round trip: {:.4}", agree as f64 / labels.len() as f64);
    Ok(())
}
