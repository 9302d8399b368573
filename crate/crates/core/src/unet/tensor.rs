use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type the network runs in. Tests use `f64`, training runs use `f32`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense `(N, C, H, W)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor value".into()));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub(crate) fn from_parts_unchecked(shape: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// All channels of batch element `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x]
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Channel-wise softmax per spatial position, max-subtracted.
pub fn softmax<T: Real>(logits: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = logits.shape;
    let p = logits.plane_len();
    let mut out = vec![T::zero(); logits.data.len()];
    for b in 0..n {
        let base = b * c * p;
        for i in 0..p {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(logits.data[base + k * p + i]);
            }
            let mut s = T::zero();
            for k in 0..c {
                let e = (logits.data[base + k * p + i] - m).exp();
                out[base + k * p + i] = e;
                s += e;
            }
            for k in 0..c {
                out[base + k * p + i] = out[base + k * p + i] / s;
            }
        }
    }
    Tensor4 {
        shape: logits.shape,
        data: out,
    }
}

/// Back-propagates a gradient w.r.t. softmax outputs to the logits:
/// `dz_k = p_k (g_k - sum_j p_j g_j)`.
pub fn softmax_backward<T: Real>(probs: &Tensor4<T>, grad_probs: &Tensor4<T>) -> Result<Tensor4<T>> {
    if probs.shape != grad_probs.shape {
        return Err(Error::Shape(format!(
            "softmax backward: {:?} vs {:?}",
            probs.shape, grad_probs.shape
        )));
    }
    let [n, c, _, _] = probs.shape;
    let p = probs.plane_len();
    let mut out = vec![T::zero(); probs.data.len()];
    for b in 0..n {
        let base = b * c * p;
        for i in 0..p {
            let mut dot = T::zero();
            for k in 0..c {
                dot += probs.data[base + k * p + i] * grad_probs.data[base + k * p + i];
            }
            for k in 0..c {
                let idx = base + k * p + i;
                out[idx] = probs.data[idx] * (grad_probs.data[idx] - dot);
            }
        }
    }
    Ok(Tensor4 {
        shape: probs.shape,
        data: out,
    })
}

/// Offsets needed to undo [`pad_to_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn is_identity(&self, padded: [usize; 4]) -> bool {
        self.top == 0 && self.left == 0 && padded[2] == self.height && padded[3] == self.width
    }
}

/// Zero-pads H and W up to the next multiple of `2^(depth-1)`. Padding is
/// split evenly, the odd voxel going to the bottom/right.
pub fn pad_to_grid<T: Real>(input: &Tensor4<T>, depth: usize) -> (Tensor4<T>, CropRecord) {
    pad_to(input, 0, 0, 1 << depth.saturating_sub(1))
}

/// Zero-pads to at least `min_h x min_w`, then up to a multiple of `multiple`.
pub fn pad_to<T: Real>(input: &Tensor4<T>, min_h: usize, min_w: usize, multiple: usize) -> (Tensor4<T>, CropRecord) {
    let [n, c, h, w] = input.shape;
    let round_up = |v: usize| v.div_ceil(multiple) * multiple;
    let ph = round_up(h.max(min_h));
    let pw = round_up(w.max(min_w));
    let top = (ph - h) / 2;
    let left = (pw - w) / 2;
    let record = CropRecord {
        top,
        left,
        height: h,
        width: w,
    };
    if ph == h && pw == w {
        return (input.clone(), record);
    }
    let mut out = vec![T::zero(); n * c * ph * pw];
    for plane in 0..n * c {
        for y in 0..h {
            let src = &input.data[(plane * h + y) * w..(plane * h + y + 1) * w];
            let dst = (plane * ph + y + top) * pw + left;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    (
        Tensor4 {
            shape: [n, c, ph, pw],
            data: out,
        },
        record,
    )
}

/// Inverse of [`pad_to_grid`] / [`pad_to`].
pub fn crop_back<T: Real>(padded: &Tensor4<T>, record: &CropRecord) -> Tensor4<T> {
    if record.is_identity(padded.shape) {
        return padded.clone();
    }
    let [n, c, ph, pw] = padded.shape;
    let (h, w) = (record.height, record.width);
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let src = (plane * ph + y + record.top) * pw + record.left;
            out.extend_from_slice(&padded.data[src..src + w]);
        }
    }
    Tensor4 {
        shape: [n, c, h, w],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor4::new([1, 2, 1, 3], vec![0.0, 1000.0, 2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&t);
        assert_eq!(p.at(0, 0, 0, 0), 0.5);
        assert_eq!(p.at(0, 1, 0, 0), 0.5);
        assert!((p.at(0, 0, 0, 1) - 1.0).abs() < 1e-12 && p.at(0, 1, 0, 1) < 1e-300);
        assert!((p.at(0, 0, 0, 2) - 2.0 / 3.0).abs() < 1e-9);
        assert!((p.at(0, 1, 0, 2) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn pad_examples() {
        let t = Tensor4::<f64>::zeros([1, 1, 66, 66]);
        let (p, r) = pad_to_grid(&t, 3);
        assert_eq!(p.shape(), [1, 1, 68, 68]);
        assert_eq!((r.top, r.left), (1, 1));

        let t = Tensor4::<f64>::zeros([1, 1, 64, 64]);
        let (p, r) = pad_to_grid(&t, 3);
        assert_eq!(p.shape(), [1, 1, 64, 64]);
        assert_eq!((r.top, r.left), (0, 0));

        let t = Tensor4::<f64>::zeros([1, 1, 5, 7]);
        let (p, r) = pad_to_grid(&t, 3);
        assert_eq!(p.shape(), [1, 1, 8, 8]);
        // odd remainder goes to the high side
        assert_eq!((r.top, r.left), (1, 0));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 7).map(|v| v as f64 * 0.5).collect();
        let t = Tensor4::new([2, 3, 5, 7], data).unwrap();
        for depth in 1..5 {
            let (p, r) = pad_to_grid(&t, depth);
            assert_eq!(crop_back(&p, &r), t);
        }
        let (p, r) = pad_to(&t, 12, 9, 4);
        assert_eq!(p.shape(), [2, 3, 12, 12]);
        assert_eq!(crop_back(&p, &r), t);
    }
}
