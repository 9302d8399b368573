//! Central finite-difference checks of the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::loss::{cross_entropy, dice_loss, total_loss};
use crate::unet::{backward, forward, init_params, softmax, Tensor4, UNetConfig, UNetParams};

/// Denominator floor of [`rel_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error, e.g. `encoder0.conv1.weight[3]`.
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck {
            checked: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = name();
        }
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Projection `L = sum(logits * r)` with fixed random `r`.
fn projected(params: &UNetParams<f64>, input: &Tensor4<f64>, r: &[f64]) -> Result<f64> {
    let (logits, _) = forward(params, input)?;
    Ok(logits.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Every parameter of a freshly initialized network against central
/// differences with `step`. Input and projection are seeded Gaussians.
pub fn unet_gradcheck(config: UNetConfig, input_shape: [usize; 4], seed: u64, step: f64) -> Result<GradCheck> {
    let mut params = init_params::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // non-trivial affine norm parameters so their gradients are exercised
    for n in params
        .encoder
        .iter_mut()
        .chain(params.decoder.iter_mut())
        .flat_map(|b| [&mut b.norm1, &mut b.norm2])
    {
        for (s, g) in n.scale.iter_mut().zip(gaussian(n.shift.len(), &mut rng)) {
            *s += 0.2 * g;
        }
        for (s, g) in n.shift.iter_mut().zip(gaussian(n.scale.len(), &mut rng)) {
            *s += 0.2 * g;
        }
    }
    let input = Tensor4::new(input_shape, gaussian(input_shape.iter().product(), &mut rng))?;
    let (logits, cache) = forward(&params, &input)?;
    let r = gaussian(logits.data().len(), &mut rng);
    let grads = backward(&params, &cache, &Tensor4::new(logits.shape(), r.clone())?)?;

    let names = params.layout();
    let analytic: Vec<Vec<f64>> = grads.params.tensors().iter().map(|t| t.to_vec()).collect();
    let mut report = GradCheck::new();
    for (t, (name, _)) in names.iter().enumerate() {
        for i in 0..analytic[t].len() {
            let orig = params.tensors()[t][i];
            params.tensors_mut()[t][i] = orig + step;
            let up = projected(&params, &input, &r)?;
            params.tensors_mut()[t][i] = orig - step;
            let down = projected(&params, &input, &r)?;
            params.tensors_mut()[t][i] = orig;
            report.record(|| format!("{name}[{i}]"), analytic[t][i], (up - down) / (2.0 * step));
        }
    }
    for i in 0..input.data().len() {
        let mut x = input.data().to_vec();
        x[i] += step;
        let up = projected(&params, &Tensor4::new(input_shape, x.clone())?, &r)?;
        x[i] -= 2.0 * step;
        let down = projected(&params, &Tensor4::new(input_shape, x)?, &r)?;
        report.record(|| format!("input[{i}]"), grads.input.data()[i], (up - down) / (2.0 * step));
    }
    Ok(report)
}

/// Loss-gradient checks for one logit tensor: Dice w.r.t. probabilities,
/// softmax + cross entropy w.r.t. logits, and the combined loss w.r.t. logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradCheck {
    pub dice: GradCheck,
    pub cross_entropy: GradCheck,
    pub total: GradCheck,
}

pub fn loss_gradcheck(logits: &Tensor4<f64>, target: &Tensor4<f64>, dice_eps: f64, step: f64) -> Result<LossGradCheck> {
    let shape = logits.shape();
    let perturbed = |t: &Tensor4<f64>, i: usize, d: f64| -> Result<Tensor4<f64>> {
        let mut v = t.data().to_vec();
        v[i] += d;
        Tensor4::new(shape, v)
    };
    let probs = softmax(logits);

    let mut dice = GradCheck::new();
    let (_, g) = dice_loss(&probs, target, dice_eps)?;
    for i in 0..probs.data().len() {
        let up = dice_loss(&perturbed(&probs, i, step)?, target, dice_eps)?.0;
        let down = dice_loss(&perturbed(&probs, i, -step)?, target, dice_eps)?.0;
        dice.record(|| format!("probs[{i}]"), g.data()[i], (up - down) / (2.0 * step));
    }

    let mut ce = GradCheck::new();
    let (_, g) = cross_entropy(&probs, target)?;
    for i in 0..logits.data().len() {
        let up = cross_entropy(&softmax(&perturbed(logits, i, step)?), target)?.0;
        let down = cross_entropy(&softmax(&perturbed(logits, i, -step)?), target)?.0;
        ce.record(|| format!("logits[{i}]"), g.data()[i], (up - down) / (2.0 * step));
    }

    let mut total = GradCheck::new();
    let out = total_loss(&probs, target, dice_eps)?;
    for i in 0..logits.data().len() {
        let up = total_loss(&softmax(&perturbed(logits, i, step)?), target, dice_eps)?.loss;
        let down = total_loss(&softmax(&perturbed(logits, i, -step)?), target, dice_eps)?.loss;
        total.record(|| format!("logits[{i}]"), out.grad_logits.data()[i], (up - down) / (2.0 * step));
    }
    Ok(LossGradCheck {
        dice,
        cross_entropy: ce,
        total,
    })
}
