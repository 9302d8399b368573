//! Writes an image and a label map as MIV files and reads them back.
//!
//! cargo run --example miv_round_trip [out_dir]

use mi_cascade::volume::{read_miv, write_miv, AnyGrid, LabelMap, Spacing, Volume};

fn main() -> mi_cascade::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let spacing = Spacing::new(8.0, 1.25, 1.25)?;
    let image = Volume::from_fn([3, 32, 40], spacing, |z, y, x| (z as f32 + 0.1 * y as f32).sin() * x as f32)?;
    let labels = LabelMap::from_fn([3, 32, 40], spacing, |_, y, x| {
        let r = ((y as f64 - 16.0).powi(2) + (x as f64 - 20.0).powi(2)).sqrt();
        if r < 6.0 { 1 } else if r < 9.0 { 2 } else { 0 }
    })?;

    let img_path = dir.join("example_image.miv");
    let lab_path = dir.join("example_label.miv");
    write_miv(&image, &img_path)?;
    write_miv(&labels, &lab_path)?;

    let bytes = std::fs::read(&img_path).map_err(|e| mi_cascade::Error::Invalid(e.to_string()))?;
    let header_end = bytes.iter().skip(5).position(|&b| b == b'\n').unwrap() + 5;
    println!("header: {}", String::from_utf8_lossy(&bytes[5..header_end]));

    match read_miv(&img_path)? {
        AnyGrid::Volume(v) => println!("image round trip exact: {}", v == image),
        AnyGrid::Labels(_) => unreachable!(),
    }
    let back = read_miv(&lab_path)?.into_labels()?;
    println!("labels round trip exact: {}", back == labels);
    println!("myocardium voxels: {}", back.count_labels(&[2]));
    Ok(())
}
