//! A 2D U-Net with instance norm and leaky ReLU, written out by hand.
//!
//! Level `l` has `min(base * 2^l, 16 * base)` channels. Each level holds two
//! 3x3 conv -> instance norm -> leaky ReLU units. Levels are joined by 2x2
//! stride-2 convolutions on the way down and 2x2 stride-2 transposed
//! convolutions on the way up; decoder levels see `[upsampled; skip]`.
//! A final 1x1 convolution produces per-class logits.

mod checkpoint;
pub mod layers;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{NormCache, Planes};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use tensor::{crop_back, pad_to, pad_to_grid, softmax, softmax_backward, CropRecord, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub negative_slope: f64,
    pub norm_epsilon: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes: 2,
            depth: 3,
            base_channels: 8,
            negative_slope: 0.01,
            norm_epsilon: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("depth", "must be at least 2"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::config("norm_epsilon", "must be positive"));
        }
        if !(self.negative_slope >= 0.0 && self.negative_slope < 1.0) {
            return Err(Error::config("negative_slope", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Feature channels at resolution level `level`.
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(4)).min(16 * self.base_channels)
    }

    /// Spatial sizes must be divisible by this.
    pub fn grid_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Convolution weights and bias. For transposed convolutions the weight
/// layout is `(in, out, k, k)`, otherwise `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl<T: Real> Conv<T> {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv {
            weight: vec![T::zero(); in_channels * out_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
            in_channels,
            out_channels,
            kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

/// Two conv -> norm -> leaky ReLU units at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub conv1: Conv<T>,
    pub norm1: Norm<T>,
    pub conv2: Conv<T>,
    pub norm2: Norm<T>,
}

impl<T: Real> Block<T> {
    fn zeros(in_c: usize, out_c: usize) -> Self {
        Block {
            conv1: Conv::zeros(in_c, out_c, 3),
            norm1: Norm {
                scale: vec![T::zero(); out_c],
                shift: vec![T::zero(); out_c],
            },
            conv2: Conv::zeros(out_c, out_c, 3),
            norm2: Norm {
                scale: vec![T::zero(); out_c],
                shift: vec![T::zero(); out_c],
            },
        }
    }
}

/// Every trainable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    pub config: UNetConfig,
    /// One block per level, `depth` entries.
    pub encoder: Vec<Block<T>>,
    /// `down[l]` maps level `l` to level `l + 1`.
    pub down: Vec<Conv<T>>,
    /// `up[l]` maps level `l + 1` to level `l`.
    pub up: Vec<Conv<T>>,
    /// `decoder[l]` runs at level `l`, `depth - 1` entries.
    pub decoder: Vec<Block<T>>,
    pub head: Conv<T>,
}

impl<T: Real> UNetParams<T> {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: UNetConfig) -> Self {
        let d = config.depth;
        let ch = |l| config.channels(l);
        let encoder = (0..d)
            .map(|l| Block::zeros(if l == 0 { config.in_channels } else { ch(l) }, ch(l)))
            .collect();
        let down = (0..d - 1).map(|l| Conv::zeros(ch(l), ch(l + 1), 2)).collect();
        let up = (0..d - 1).map(|l| Conv::zeros(ch(l + 1), ch(l), 2)).collect();
        let decoder = (0..d - 1).map(|l| Block::zeros(2 * ch(l), ch(l))).collect();
        UNetParams {
            config,
            encoder,
            down,
            up,
            decoder,
            head: Conv::zeros(ch(0), config.num_classes, 1),
        }
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: &str, c: &Conv<T>, transposed: bool| {
            let (a, b) = if transposed {
                (c.in_channels, c.out_channels)
            } else {
                (c.out_channels, c.in_channels)
            };
            out.push((format!("{name}.weight"), vec![a, b, c.kernel, c.kernel]));
            out.push((format!("{name}.bias"), vec![c.out_channels]));
        };
        let block = |out: &mut Vec<_>, name: &str, b: &Block<T>| {
            conv(out, &format!("{name}.conv1"), &b.conv1, false);
            out.push((format!("{name}.norm1.scale"), vec![b.norm1.scale.len()]));
            out.push((format!("{name}.norm1.shift"), vec![b.norm1.shift.len()]));
            conv(out, &format!("{name}.conv2"), &b.conv2, false);
            out.push((format!("{name}.norm2.scale"), vec![b.norm2.scale.len()]));
            out.push((format!("{name}.norm2.shift"), vec![b.norm2.shift.len()]));
        };
        for (l, b) in self.encoder.iter().enumerate() {
            block(&mut out, &format!("encoder{l}"), b);
        }
        for (l, c) in self.down.iter().enumerate() {
            conv(&mut out, &format!("down{l}"), c, false);
        }
        for (l, c) in self.up.iter().enumerate() {
            conv(&mut out, &format!("up{l}"), c, true);
        }
        for (l, b) in self.decoder.iter().enumerate() {
            block(&mut out, &format!("decoder{l}"), b);
        }
        conv(&mut out, "head", &self.head, false);
        out
    }

    /// Flat views of every tensor, in [`layout`](Self::layout) order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        fn block<'a, T>(out: &mut Vec<&'a [T]>, b: &'a Block<T>) {
            out.extend([
                &b.conv1.weight[..],
                &b.conv1.bias,
                &b.norm1.scale,
                &b.norm1.shift,
                &b.conv2.weight,
                &b.conv2.bias,
                &b.norm2.scale,
                &b.norm2.shift,
            ]);
        }
        self.encoder.iter().for_each(|b| block(&mut out, b));
        for c in self.down.iter().chain(&self.up) {
            out.extend([&c.weight[..], &c.bias]);
        }
        self.decoder.iter().for_each(|b| block(&mut out, b));
        out.extend([&self.head.weight[..], &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        fn block<'a, T>(out: &mut Vec<&'a mut [T]>, b: &'a mut Block<T>) {
            out.extend([
                &mut b.conv1.weight[..],
                &mut b.conv1.bias,
                &mut b.norm1.scale,
                &mut b.norm1.shift,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
                &mut b.norm2.scale,
                &mut b.norm2.shift,
            ]);
        }
        self.encoder.iter_mut().for_each(|b| block(&mut out, b));
        for c in self.down.iter_mut().chain(self.up.iter_mut()) {
            out.extend([&mut c.weight[..], &mut c.bias]);
        }
        self.decoder.iter_mut().for_each(|b| block(&mut out, b));
        out.extend([&mut self.head.weight[..], &mut self.head.bias]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same architecture, all tensors zero.
    pub fn zeros_like(&self) -> Self {
        UNetParams::zeros(self.config)
    }

    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        let mut out = UNetParams::<U>::zeros(self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64_lossy(s.as_f64());
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &UNetParams<T>) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// He-normal conv kernels (variance `2 / fan_in`), zero biases and shifts,
/// unit norm scales. Fully determined by `seed`.
pub fn init_params<T: Real>(config: UNetConfig, seed: u64) -> Result<UNetParams<T>> {
    config.validate()?;
    let mut params = UNetParams::<T>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |c: &mut Conv<T>, fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for w in c.weight.iter_mut() {
            *w = T::from_f64_lossy(normal.sample(&mut rng));
        }
    };
    let one = |n: &mut Norm<T>| n.scale.iter_mut().for_each(|s| *s = T::one());
    for b in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
        let (i1, i2) = (b.conv1.in_channels, b.conv2.in_channels);
        fill(&mut b.conv1, i1 * 9);
        fill(&mut b.conv2, i2 * 9);
        one(&mut b.norm1);
        one(&mut b.norm2);
    }
    for c in params.down.iter_mut() {
        let fan_in = c.in_channels * 4;
        fill(c, fan_in);
    }
    for c in params.up.iter_mut() {
        // each output position sees one tap per input channel
        let fan_in = c.in_channels;
        fill(c, fan_in);
    }
    let fan_in = params.head.in_channels;
    fill(&mut params.head, fan_in);
    Ok(params)
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct UnitCache<T> {
    input: Planes<T>,
    norm: NormCache<T>,
    pre_act: Planes<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    first: UnitCache<T>,
    second: UnitCache<T>,
    output: Planes<T>,
}

#[derive(Debug, Clone)]
struct SampleCache<T> {
    encoder: Vec<BlockCache<T>>,
    decoder: Vec<BlockCache<T>>,
}

/// Intermediates from one [`forward`] call, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    config: UNetConfig,
    input_shape: [usize; 4],
    samples: Vec<SampleCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }
}

/// Gradients w.r.t. every parameter and the network input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: UNetParams<T>,
    pub input: Tensor4<T>,
}

fn unit_forward<T: Real>(conv: &Conv<T>, norm: &Norm<T>, x: Planes<T>, cfg: &UNetConfig) -> (UnitCache<T>, Planes<T>) {
    let a = layers::conv_same(&x, &conv.weight, &conv.bias, conv.out_channels, 3);
    let (z, nc) = layers::instance_norm(&a, &norm.scale, &norm.shift, T::from_f64_lossy(cfg.norm_epsilon));
    let out = layers::leaky_relu(&z, T::from_f64_lossy(cfg.negative_slope));
    (
        UnitCache {
            input: x,
            norm: nc,
            pre_act: z,
        },
        out,
    )
}

fn block_forward<T: Real>(b: &Block<T>, x: Planes<T>, cfg: &UNetConfig) -> BlockCache<T> {
    let (first, h) = unit_forward(&b.conv1, &b.norm1, x, cfg);
    let (second, output) = unit_forward(&b.conv2, &b.norm2, h, cfg);
    BlockCache { first, second, output }
}

fn unit_backward<T: Real>(
    conv: &Conv<T>,
    norm: &Norm<T>,
    cache: &UnitCache<T>,
    g: &Planes<T>,
    gconv: &mut Conv<T>,
    gnorm: &mut Norm<T>,
    cfg: &UNetConfig,
    need_input: bool,
) -> Option<Planes<T>> {
    let gz = layers::leaky_relu_backward(&cache.pre_act, T::from_f64_lossy(cfg.negative_slope), g);
    let ga = layers::instance_norm_backward(&cache.norm, &norm.scale, &gz, &mut gnorm.scale, &mut gnorm.shift);
    layers::conv_same_backward(
        &cache.input,
        &conv.weight,
        conv.out_channels,
        3,
        &ga,
        &mut gconv.weight,
        &mut gconv.bias,
        need_input,
    )
}

fn block_backward<T: Real>(
    b: &Block<T>,
    cache: &BlockCache<T>,
    g: &Planes<T>,
    gb: &mut Block<T>,
    cfg: &UNetConfig,
) -> Planes<T> {
    let gh = unit_backward(&b.conv2, &b.norm2, &cache.second, g, &mut gb.conv2, &mut gb.norm2, cfg, true)
        .expect("input grad requested");
    unit_backward(&b.conv1, &b.norm1, &cache.first, &gh, &mut gb.conv1, &mut gb.norm1, cfg, true)
        .expect("input grad requested")
}

fn forward_sample<T: Real>(p: &UNetParams<T>, x: Planes<T>) -> (SampleCache<T>, Planes<T>) {
    let cfg = &p.config;
    let d = cfg.depth;
    let mut encoder: Vec<BlockCache<T>> = Vec::with_capacity(d);
    encoder.push(block_forward(&p.encoder[0], x, cfg));
    for l in 1..d {
        let prev = &encoder[l - 1].output;
        let down = &p.down[l - 1];
        let xd = layers::conv_down(prev, &down.weight, &down.bias, down.out_channels);
        encoder.push(block_forward(&p.encoder[l], xd, cfg));
    }
    let mut decoder: Vec<Option<BlockCache<T>>> = (0..d - 1).map(|_| None).collect();
    for l in (0..d - 1).rev() {
        let below = match &decoder.get(l + 1) {
            Some(Some(c)) => &c.output,
            _ => &encoder[l + 1].output,
        };
        let up = &p.up[l];
        let u = layers::conv_up(below, &up.weight, &up.bias, up.out_channels);
        let cat = layers::concat(&u, &encoder[l].output);
        decoder[l] = Some(block_forward(&p.decoder[l], cat, cfg));
    }
    let decoder: Vec<BlockCache<T>> = decoder.into_iter().map(|c| c.expect("filled")).collect();
    let top = &decoder[0].output;
    let logits = layers::conv_same(top, &p.head.weight, &p.head.bias, p.head.out_channels, 1);
    (SampleCache { encoder, decoder }, logits)
}

fn backward_sample<T: Real>(p: &UNetParams<T>, cache: &SampleCache<T>, glogits: &Planes<T>) -> (UNetParams<T>, Planes<T>) {
    let cfg = &p.config;
    let d = cfg.depth;
    let mut g = p.zeros_like();
    let head_in = &cache.decoder[0].output;
    let mut gcur = layers::conv_same_backward(
        head_in,
        &p.head.weight,
        p.head.out_channels,
        1,
        glogits,
        &mut g.head.weight,
        &mut g.head.bias,
        true,
    )
    .expect("input grad requested");

    let mut skip_grads: Vec<Option<Planes<T>>> = (0..d).map(|_| None).collect();
    for l in 0..d - 1 {
        let gcat = block_backward(&p.decoder[l], &cache.decoder[l], &gcur, &mut g.decoder[l], cfg);
        let up = &p.up[l];
        let (gu, gskip) = layers::concat_backward(&gcat, up.out_channels);
        skip_grads[l] = Some(gskip);
        let below = if l + 1 < d - 1 {
            &cache.decoder[l + 1].output
        } else {
            &cache.encoder[l + 1].output
        };
        let gup = &mut g.up[l];
        gcur = layers::conv_up_backward(below, &up.weight, up.out_channels, &gu, &mut gup.weight, &mut gup.bias);
    }

    // gcur now holds the gradient w.r.t. the bottom encoder output
    for l in (0..d).rev() {
        if let Some(s) = skip_grads[l].take() {
            gcur.add_assign(&s);
        }
        let gin = block_backward(&p.encoder[l], &cache.encoder[l], &gcur, &mut g.encoder[l], cfg);
        if l == 0 {
            gcur = gin;
        } else {
            let down = &p.down[l - 1];
            let gdown = &mut g.down[l - 1];
            gcur = layers::conv_down_backward(
                &cache.encoder[l - 1].output,
                &down.weight,
                down.out_channels,
                &gin,
                &mut gdown.weight,
                &mut gdown.bias,
            );
        }
    }
    (g, gcur)
}

fn check_input<T: Real>(params: &UNetParams<T>, input: &Tensor4<T>) -> Result<()> {
    let cfg = &params.config;
    let [_, c, h, w] = input.shape();
    if c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, network expects {}",
            cfg.in_channels
        )));
    }
    let m = cfg.grid_multiple();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} is not divisible by {m}; pad with pad_to_grid"
        )));
    }
    Ok(())
}

fn sample_planes<T: Real>(t: &Tensor4<T>, n: usize) -> Planes<T> {
    let [_, c, h, w] = t.shape();
    Planes::from_vec(c, h, w, t.sample(n).to_vec())
}

/// Runs the network. Samples are independent and processed in parallel;
/// results do not depend on thread count.
pub fn forward<T: Real>(params: &UNetParams<T>, input: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    check_input(params, input)?;
    let [n, _, h, w] = input.shape();
    let results: Vec<(SampleCache<T>, Planes<T>)> = (0..n)
        .into_par_iter()
        .map(|b| forward_sample(params, sample_planes(input, b)))
        .collect();
    let classes = params.config.num_classes;
    let mut data = Vec::with_capacity(n * classes * h * w);
    let mut samples = Vec::with_capacity(n);
    for (cache, logits) in results {
        data.extend_from_slice(&logits.data);
        samples.push(cache);
    }
    Ok((
        Tensor4::from_parts_unchecked([n, classes, h, w], data),
        ForwardCache {
            config: params.config,
            input_shape: input.shape(),
            samples,
        },
    ))
}

/// Logits only, no cache retained.
pub fn predict_logits<T: Real>(params: &UNetParams<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_input(params, input)?;
    let [n, _, h, w] = input.shape();
    let results: Vec<Planes<T>> = (0..n)
        .into_par_iter()
        .map(|b| forward_sample(params, sample_planes(input, b)).1)
        .collect();
    let classes = params.config.num_classes;
    let mut data = Vec::with_capacity(n * classes * h * w);
    for r in results {
        data.extend_from_slice(&r.data);
    }
    Ok(Tensor4::from_parts_unchecked([n, classes, h, w], data))
}

/// Exact gradients of `sum(logits * grad_logits)`. Per-sample gradients are
/// reduced in batch order.
pub fn backward<T: Real>(params: &UNetParams<T>, cache: &ForwardCache<T>, grad_logits: &Tensor4<T>) -> Result<Gradients<T>> {
    let [n, _, h, w] = cache.input_shape;
    if cache.config != params.config {
        return Err(Error::Shape("cache was produced by a different architecture".into()));
    }
    if grad_logits.shape() != [n, params.config.num_classes, h, w] || cache.samples.len() != n {
        return Err(Error::Shape(format!(
            "logit gradient {:?} does not match cached forward {:?}",
            grad_logits.shape(),
            cache.input_shape
        )));
    }
    let per_sample: Vec<(UNetParams<T>, Planes<T>)> = (0..n)
        .into_par_iter()
        .map(|b| backward_sample(params, &cache.samples[b], &sample_planes(grad_logits, b)))
        .collect();
    let mut total = params.zeros_like();
    let mut input = Vec::with_capacity(cache.input_shape.iter().product());
    for (g, gin) in per_sample {
        total.add_assign(&g);
        input.extend_from_slice(&gin.data);
    }
    Ok(Gradients {
        params: total,
        input: Tensor4::from_parts_unchecked(cache.input_shape, input),
    })
}
