//! Compares analytic U-Net and loss gradients with central differences.
//!
//! cargo run --example gradient_check

use mi_cascade::gradcheck::{loss_gradcheck, unet_gradcheck};
use mi_cascade::loss::one_hot;
use mi_cascade::unet::{Tensor4, UNetConfig};

fn main() -> mi_cascade::Result<()> {
    // Deeper nets have more activations near the leaky-ReLU kink, where a
    // central difference straddling zero is not a derivative; the near-linear
    // slope keeps the comparison meaningful there.
    for (depth, slope) in [(2, 0.01), (3, 0.999), (4, 0.999)] {
        let cfg = UNetConfig {
            depth,
            base_channels: 2,
            negative_slope: slope,
            ..UNetConfig::default()
        };
        let side = 1 << (depth + 1);
        let r = unet_gradcheck(cfg, [1, 1, side, side], 1, 1e-4)?;
        println!(
            "depth {depth} slope {slope}: {} entries, max relative error {:.2e} ({})",
            r.checked, r.max_rel_error, r.worst
        );
    }
    let logits = Tensor4::new([1, 2, 2, 2], vec![0.7, -0.3, 1.1, -0.9, -0.2, 0.4, -1.3, 0.5])?;
    let target = one_hot::<f64>(&[1, 0, 0, 1], 1, 2, 2, 2)?;
    let r = loss_gradcheck(&logits, &target, 1e-5, 1e-4)?;
    println!("dice            max relative error {:.2e}", r.dice.max_rel_error);
    println!("cross entropy   max relative error {:.2e}", r.cross_entropy.max_rel_error);
    println!("dice + CE       max relative error {:.2e}", r.total.max_rel_error);
    Ok(())
}
