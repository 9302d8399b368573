//! Training objective (soft Dice + cross entropy) and SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::{softmax_backward, Real, Tensor4, UNetParams};

/// Clamp applied to probabilities inside the log.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr0: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub poly_exponent: f64,
    pub dice_epsilon: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr0: 0.01,
            momentum: 0.99,
            max_epochs: 30,
            poly_exponent: 0.9,
            dice_epsilon: 1e-5,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::config("dice_epsilon", "must be positive"));
        }
        if !(self.poly_exponent >= 0.0) {
            return Err(Error::config("poly_exponent", "must be non-negative"));
        }
        Ok(())
    }
}

/// `lr0 * (1 - epoch / max_epochs) ^ poly_exponent`.
pub fn poly_lr(epoch: usize, hyper: &TrainHyper) -> Result<f64> {
    if epoch >= hyper.max_epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside 0..{}",
            hyper.max_epochs
        )));
    }
    Ok(hyper.lr0 * (1.0 - epoch as f64 / hyper.max_epochs as f64).powf(hyper.poly_exponent))
}

/// Classical momentum: `v <- momentum * v - lr * g; w <- w + v`.
pub fn sgd_step<T: Real>(
    params: &mut UNetParams<T>,
    grads: &UNetParams<T>,
    velocity: &mut UNetParams<T>,
    momentum: f64,
    lr: f64,
) -> Result<()> {
    if params.config != grads.config || params.config != velocity.config {
        return Err(Error::Shape("parameter, gradient and velocity shapes differ".into()));
    }
    let mu = T::from_f64_lossy(momentum);
    let lr = T::from_f64_lossy(lr);
    for ((w, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v - lr * g;
            *w += *v;
        }
    }
    Ok(())
}

fn check_pair<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>) -> Result<()> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// One-hot `(N, C, H, W)` target from per-pixel class indices laid out `(N, H, W)`.
pub fn one_hot<T: Real>(labels: &[u8], n: usize, classes: usize, h: usize, w: usize) -> Result<Tensor4<T>> {
    if labels.len() != n * h * w {
        return Err(Error::Shape(format!(
            "{} labels for a {n}x{h}x{w} batch",
            labels.len()
        )));
    }
    let p = h * w;
    let mut data = vec![T::zero(); n * classes * p];
    for b in 0..n {
        for i in 0..p {
            let c = labels[b * p + i] as usize;
            if c >= classes {
                return Err(Error::Invalid(format!("class {c} >= {classes}")));
            }
            data[(b * classes + c) * p + i] = T::one();
        }
    }
    Tensor4::new([n, classes, h, w], data)
}

/// Soft Dice over the non-background classes with sums pooled over the
/// batch: `d_c = (2 sum p g + eps) / (sum p + sum g + eps)`,
/// `loss = 1 - mean_c d_c`. Returns the loss and its gradient w.r.t. `probs`.
pub fn dice_loss<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>, eps: f64) -> Result<(T, Tensor4<T>)> {
    check_pair(probs, target)?;
    let [n, c, _, _] = probs.shape();
    if c < 2 {
        return Err(Error::Shape("dice needs a background and at least one class".into()));
    }
    let fg = (c - 1) as f64;
    let mut grad = Tensor4::<T>::zeros(probs.shape());
    let mut mean_d = 0.0;
    for k in 1..c {
        let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
        for b in 0..n {
            for (&p, &g) in probs.plane(b, k).iter().zip(target.plane(b, k)) {
                let (p, g) = (p.as_f64(), g.as_f64());
                inter += p * g;
                sp += p;
                sg += g;
            }
        }
        let num = 2.0 * inter + eps;
        let den = sp + sg + eps;
        mean_d += num / den / fg;
        // d d_c / d p = (2 g den - num) / den^2
        let plane = probs.plane_len();
        for b in 0..n {
            let start = (b * c + k) * plane;
            let tg = target.plane(b, k);
            for (gv, &g) in grad.data_mut()[start..start + plane].iter_mut().zip(tg) {
                let d = (2.0 * g.as_f64() * den - num) / (den * den);
                *gv = T::from_f64_lossy(-d / fg);
            }
        }
    }
    Ok((T::from_f64_lossy(1.0 - mean_d), grad))
}

/// Mean over voxels of `-ln p_true`. The returned gradient is the fused
/// softmax + cross-entropy gradient in the logits domain, `(p - g) / V`.
pub fn cross_entropy<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    check_pair(probs, target)?;
    let [n, _, h, w] = probs.shape();
    let voxels = (n * h * w) as f64;
    let mut loss = 0.0;
    for (&p, &g) in probs.data().iter().zip(target.data()) {
        let g = g.as_f64();
        if g != 0.0 {
            loss -= g * p.as_f64().max(CE_CLAMP).ln();
        }
    }
    let inv = T::from_f64_lossy(1.0 / voxels);
    let data = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| (p - g) * inv)
        .collect();
    Ok((
        T::from_f64_lossy(loss / voxels),
        Tensor4::new(probs.shape(), data)?,
    ))
}

/// Dice + cross entropy, with the combined gradient in the logits domain.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub dice: T,
    pub cross_entropy: T,
    pub grad_logits: Tensor4<T>,
}

/// `probs` must be the softmax of the logits the gradient is taken against.
pub fn total_loss<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>, dice_eps: f64) -> Result<LossOutput<T>> {
    let (dice, dice_grad_probs) = dice_loss(probs, target, dice_eps)?;
    let (ce, ce_grad) = cross_entropy(probs, target)?;
    let mut grad_logits = softmax_backward(probs, &dice_grad_probs)?;
    for (g, &c) in grad_logits.data_mut().iter_mut().zip(ce_grad.data()) {
        *g += c;
    }
    Ok(LossOutput {
        loss: dice + ce,
        dice,
        cross_entropy: ce,
        grad_logits,
    })
}
