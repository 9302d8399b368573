//! Single-sample layer kernels with hand-written backward passes.
//!
//! Feature maps are `(C, H, W)` row-major. Inner loops run over contiguous
//! row segments so they vectorize.

use super::tensor::Real;

/// One sample's feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Planes {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "planes length");
        Planes { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let p = self.h * self.w;
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.h * self.w;
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Planes<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        axpy(T::one(), &other.data, &mut self.data);
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators, fixed summation order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ch = a.chunks_exact(8);
    let r = ch.remainder();
    for x in ch {
        for j in 0..8 {
            acc[j] += x[j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &x in r {
        s += x;
    }
    s
}

/// Valid output/input column ranges for a horizontal tap offset `d`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

/// Stride-1 "same" convolution with odd kernel `k`.
/// `weight` is `(out, in, k, k)`.
pub fn conv_same<T: Real>(x: &Planes<T>, weight: &[T], bias: &[T], out_c: usize, k: usize) -> Planes<T> {
    let (h, w, in_c) = (x.h, x.w, x.c);
    debug_assert_eq!(weight.len(), out_c * in_c * k * k);
    let pad = (k / 2) as isize;
    let mut out = Planes::zeros(out_c, h, w);
    for o in 0..out_c {
        let op = out.plane_mut(o);
        op.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_c {
            let ip = x.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(w, dx);
                    let wv = weight[((o * in_c + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = &ip[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                        axpy(wv, src, &mut op[y * w + x0..y * w + x1]);
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv_same`]. Accumulates into `gw`/`gb`, returns the input gradient.
pub fn conv_same_backward<T: Real>(
    x: &Planes<T>,
    weight: &[T],
    out_c: usize,
    k: usize,
    gout: &Planes<T>,
    gw: &mut [T],
    gb: &mut [T],
    need_input_grad: bool,
) -> Option<Planes<T>> {
    let (h, w, in_c) = (x.h, x.w, x.c);
    let pad = (k / 2) as isize;
    let mut gin = need_input_grad.then(|| Planes::zeros(in_c, h, w));
    for o in 0..out_c {
        let gp = gout.plane(o);
        gb[o] += sum(gp);
        for i in 0..in_c {
            let ip = x.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(w, dx);
                    let widx = ((o * in_c + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let s0 = iy * w + (x0 as isize + dx) as usize;
                        let s1 = iy * w + (x1 as isize + dx) as usize;
                        let g = &gp[y * w + x0..y * w + x1];
                        acc += dot(g, &ip[s0..s1]);
                        if let Some(gin) = gin.as_mut() {
                            axpy(wv, g, &mut gin.plane_mut(i)[s0..s1]);
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gin
}

/// 2x2 stride-2 convolution, `(out, in, 2, 2)` weights. H and W must be even.
pub fn conv_down<T: Real>(x: &Planes<T>, weight: &[T], bias: &[T], out_c: usize) -> Planes<T> {
    let (oh, ow, in_c) = (x.h / 2, x.w / 2, x.c);
    debug_assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let mut out = Planes::zeros(out_c, oh, ow);
    let mut row = vec![T::zero(); ow];
    for o in 0..out_c {
        let op = out.plane_mut(o);
        op.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_c {
            let ip = x.plane(i);
            for dy in 0..2 {
                for dx in 0..2 {
                    let wv = weight[((o * in_c + i) * 2 + dy) * 2 + dx];
                    for y in 0..oh {
                        let src = &ip[(2 * y + dy) * x.w..(2 * y + dy + 1) * x.w];
                        for (r, s) in row.iter_mut().zip(src.iter().skip(dx).step_by(2)) {
                            *r = *s;
                        }
                        axpy(wv, &row, &mut op[y * ow..(y + 1) * ow]);
                    }
                }
            }
        }
    }
    out
}

pub fn conv_down_backward<T: Real>(
    x: &Planes<T>,
    weight: &[T],
    out_c: usize,
    gout: &Planes<T>,
    gw: &mut [T],
    gb: &mut [T],
) -> Planes<T> {
    let (oh, ow, in_c, w) = (x.h / 2, x.w / 2, x.c, x.w);
    let mut gin = Planes::zeros(in_c, x.h, x.w);
    let mut row = vec![T::zero(); ow];
    for o in 0..out_c {
        let gp = gout.plane(o);
        gb[o] += sum(gp);
        for i in 0..in_c {
            let ip = x.plane(i);
            for dy in 0..2 {
                for dx in 0..2 {
                    let widx = ((o * in_c + i) * 2 + dy) * 2 + dx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for y in 0..oh {
                        let g = &gp[y * ow..(y + 1) * ow];
                        let base = (2 * y + dy) * w;
                        for (r, s) in row.iter_mut().zip(ip[base..base + w].iter().skip(dx).step_by(2)) {
                            *r = *s;
                        }
                        acc += dot(g, &row);
                        let gi = &mut gin.plane_mut(i)[base..base + w];
                        for (gv, &gg) in gi.iter_mut().skip(dx).step_by(2).zip(g) {
                            *gv += wv * gg;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gin
}

/// 2x2 stride-2 transposed convolution, `(in, out, 2, 2)` weights.
pub fn conv_up<T: Real>(x: &Planes<T>, weight: &[T], bias: &[T], out_c: usize) -> Planes<T> {
    let (h, w, in_c) = (x.h, x.w, x.c);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Planes::zeros(out_c, oh, ow);
    let mut row = vec![T::zero(); w];
    for o in 0..out_c {
        let op = out.plane_mut(o);
        op.iter_mut().for_each(|v| *v = bias[o]);
        for dy in 0..2 {
            for dx in 0..2 {
                for y in 0..h {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    for i in 0..in_c {
                        let wv = weight[((i * out_c + o) * 2 + dy) * 2 + dx];
                        axpy(wv, &x.plane(i)[y * w..(y + 1) * w], &mut row);
                    }
                    let dst = &mut op[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    for (d, &r) in dst.iter_mut().skip(dx).step_by(2).zip(&row) {
                        *d += r;
                    }
                }
            }
        }
    }
    out
}

pub fn conv_up_backward<T: Real>(
    x: &Planes<T>,
    weight: &[T],
    out_c: usize,
    gout: &Planes<T>,
    gw: &mut [T],
    gb: &mut [T],
) -> Planes<T> {
    let (h, w, in_c) = (x.h, x.w, x.c);
    let ow = 2 * w;
    let mut gin = Planes::zeros(in_c, h, w);
    let mut row = vec![T::zero(); w];
    for o in 0..out_c {
        let gp = gout.plane(o);
        gb[o] += sum(gp);
        for dy in 0..2 {
            for dx in 0..2 {
                for y in 0..h {
                    let src = &gp[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    for (r, &s) in row.iter_mut().zip(src.iter().skip(dx).step_by(2)) {
                        *r = s;
                    }
                    for i in 0..in_c {
                        let widx = ((i * out_c + o) * 2 + dy) * 2 + dx;
                        let xr = &x.plane(i)[y * w..(y + 1) * w];
                        gw[widx] += dot(xr, &row);
                        axpy(weight[widx], &row, &mut gin.plane_mut(i)[y * w..(y + 1) * w]);
                    }
                }
            }
        }
    }
    gin
}

/// Per-channel normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Planes<T>,
    pub inv_std: Vec<T>,
}

/// Instance norm with affine `scale`/`shift`, population variance.
pub fn instance_norm<T: Real>(x: &Planes<T>, scale: &[T], shift: &[T], eps: T) -> (Planes<T>, NormCache<T>) {
    let n = T::from_usize(x.h * x.w).unwrap();
    let mut y = Planes::zeros(x.c, x.h, x.w);
    let mut xhat = Planes::zeros(x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let p = x.plane(c);
        let mean = sum(p) / n;
        let mut var = T::zero();
        for &v in p {
            let d = v - mean;
            var += d * d;
        }
        let inv = T::one() / (var / n + eps).sqrt();
        inv_std.push(inv);
        let xh = xhat.plane_mut(c);
        for (o, &v) in xh.iter_mut().zip(p) {
            *o = (v - mean) * inv;
        }
        let (g, b) = (scale[c], shift[c]);
        for (o, &v) in y.plane_mut(c).iter_mut().zip(xhat.plane(c)) {
            *o = g * v + b;
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    scale: &[T],
    gout: &Planes<T>,
    gscale: &mut [T],
    gshift: &mut [T],
) -> Planes<T> {
    let xhat = &cache.xhat;
    let n = T::from_usize(xhat.h * xhat.w).unwrap();
    let mut gin = Planes::zeros(xhat.c, xhat.h, xhat.w);
    for c in 0..xhat.c {
        let g = gout.plane(c);
        let xh = xhat.plane(c);
        let sum_g = sum(g);
        let sum_gx = dot(g, xh);
        gscale[c] += sum_gx;
        gshift[c] += sum_g;
        // dxhat = g * scale; dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let k = scale[c] * cache.inv_std[c] / n;
        for ((o, &gv), &xv) in gin.plane_mut(c).iter_mut().zip(g).zip(xh) {
            *o = k * (n * gv - sum_g - xv * sum_gx);
        }
    }
    gin
}

pub fn leaky_relu<T: Real>(x: &Planes<T>, slope: T) -> Planes<T> {
    let data = x
        .data
        .iter()
        .map(|&v| if v > T::zero() { v } else { v * slope })
        .collect();
    Planes::from_vec(x.c, x.h, x.w, data)
}

/// `pre` is the activation input.
pub fn leaky_relu_backward<T: Real>(pre: &Planes<T>, slope: T, gout: &Planes<T>) -> Planes<T> {
    let data = pre
        .data
        .iter()
        .zip(&gout.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect();
    Planes::from_vec(pre.c, pre.h, pre.w, data)
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Real>(a: &Planes<T>, b: &Planes<T>) -> Planes<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Planes::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Splits a concatenation gradient back into its `a` and `b` parts.
pub fn concat_backward<T: Real>(gout: &Planes<T>, a_channels: usize) -> (Planes<T>, Planes<T>) {
    let split = a_channels * gout.h * gout.w;
    (
        Planes::from_vec(a_channels, gout.h, gout.w, gout.data[..split].to_vec()),
        Planes::from_vec(gout.c - a_channels, gout.h, gout.w, gout.data[split..].to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_planes(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Planes<f64> {
        Planes::from_vec(c, h, w, rand_vec(rng, c * h * w))
    }

    /// Reference convolution by direct index arithmetic, for oracles.
    fn naive_conv(x: &Planes<f64>, wt: &[f64], b: &[f64], oc: usize, k: usize) -> Planes<f64> {
        let pad = (k / 2) as isize;
        let mut out = Planes::zeros(oc, x.h, x.w);
        for o in 0..oc {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = b[o];
                    for i in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    s += wt[((o * x.c + i) * k + ky) * k + kx]
                                        * x.plane(i)[iy as usize * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    out.plane_mut(o)[y * x.w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_planes(&mut rng, 3, 5, 6);
        for k in [1, 3] {
            let wt = rand_vec(&mut rng, 4 * 3 * k * k);
            let b = rand_vec(&mut rng, 4);
            let fast = conv_same(&x, &wt, &b, 4, k);
            let slow = naive_conv(&x, &wt, &b, 4, k);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn down_halves_and_up_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_planes(&mut rng, 2, 6, 8);
        let d = conv_down(&x, &rand_vec(&mut rng, 3 * 2 * 4), &[0.0; 3], 3);
        assert_eq!((d.c, d.h, d.w), (3, 3, 4));
        let u = conv_up(&d, &rand_vec(&mut rng, 3 * 2 * 4), &[0.0; 2], 2);
        assert_eq!((u.c, u.h, u.w), (2, 6, 8));
    }

    #[test]
    fn instance_norm_standardizes_and_is_scale_invariant() {
        // 1x1x2x2 by hand: [1,2,3,4] -> mean 2.5, var 1.25
        let x = Planes::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = instance_norm(&x, &[1.0], &[0.0], 0.0);
        let s = 1.25f64.sqrt();
        let expected = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (a, b) in y.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let x2 = Planes::from_vec(1, 2, 2, vec![7.0, 14.0, 21.0, 28.0]);
        let (y2, _) = instance_norm(&x2, &[1.0], &[0.0], 0.0);
        for (a, b) in y.data.iter().zip(&y2.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_planes(&mut rng, 3, 7, 5);
        let (y, _) = instance_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5);
        for c in 0..3 {
            let p = y.plane(c);
            let m = p.iter().sum::<f64>() / 35.0;
            let v = p.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 35.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
        }
    }

    // ---- finite-difference checks, one per layer type ----

    const H: f64 = 1e-4;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Checks d(sum(proj * f(x)))/dx against central differences.
    fn check_input_grad(
        x: &Planes<f64>,
        proj: &[f64],
        f: impl Fn(&Planes<f64>) -> Planes<f64>,
        analytic: &Planes<f64>,
    ) {
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += H;
            let up = dot(&f(&p).data, proj);
            p.data[i] -= 2.0 * H;
            let down = dot(&f(&p).data, proj);
            let fd = (up - down) / (2.0 * H);
            assert!(rel_err(fd, analytic.data[i]) < 1e-3, "input {i}: fd {fd} vs {}", analytic.data[i]);
        }
    }

    fn check_param_grad(params: &[f64], proj: &[f64], f: impl Fn(&[f64]) -> Planes<f64>, analytic: &[f64]) {
        for i in 0..params.len() {
            let mut p = params.to_vec();
            p[i] += H;
            let up = dot(&f(&p).data, proj);
            p[i] -= 2.0 * H;
            let down = dot(&f(&p).data, proj);
            let fd = (up - down) / (2.0 * H);
            assert!(rel_err(fd, analytic[i]) < 1e-3, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn gradcheck_conv_same() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for k in [1, 3] {
            let x = rand_planes(&mut rng, 2, 4, 5);
            let wt = rand_vec(&mut rng, 3 * 2 * k * k);
            let b = rand_vec(&mut rng, 3);
            let proj = rand_vec(&mut rng, 3 * 4 * 5);
            let g = Planes::from_vec(3, 4, 5, proj.clone());
            let mut gw = vec![0.0; wt.len()];
            let mut gb = vec![0.0; 3];
            let gin = conv_same_backward(&x, &wt, 3, k, &g, &mut gw, &mut gb, true).unwrap();
            check_input_grad(&x, &proj, |x| conv_same(x, &wt, &b, 3, k), &gin);
            check_param_grad(&wt, &proj, |w| conv_same(&x, w, &b, 3, k), &gw);
            check_param_grad(&b, &proj, |b| conv_same(&x, &wt, b, 3, k), &gb);
        }
    }

    #[test]
    fn gradcheck_conv_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_planes(&mut rng, 2, 4, 6);
        let wt = rand_vec(&mut rng, 3 * 2 * 4);
        let b = rand_vec(&mut rng, 3);
        let proj = rand_vec(&mut rng, 3 * 2 * 3);
        let g = Planes::from_vec(3, 2, 3, proj.clone());
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 3];
        let gin = conv_down_backward(&x, &wt, 3, &g, &mut gw, &mut gb);
        check_input_grad(&x, &proj, |x| conv_down(x, &wt, &b, 3), &gin);
        check_param_grad(&wt, &proj, |w| conv_down(&x, w, &b, 3), &gw);
        check_param_grad(&b, &proj, |b| conv_down(&x, &wt, b, 3), &gb);
    }

    #[test]
    fn gradcheck_conv_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_planes(&mut rng, 3, 2, 3);
        let wt = rand_vec(&mut rng, 3 * 2 * 4);
        let b = rand_vec(&mut rng, 2);
        let proj = rand_vec(&mut rng, 2 * 4 * 6);
        let g = Planes::from_vec(2, 4, 6, proj.clone());
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 2];
        let gin = conv_up_backward(&x, &wt, 2, &g, &mut gw, &mut gb);
        check_input_grad(&x, &proj, |x| conv_up(x, &wt, &b, 2), &gin);
        check_param_grad(&wt, &proj, |w| conv_up(&x, w, &b, 2), &gw);
        check_param_grad(&b, &proj, |b| conv_up(&x, &wt, b, 2), &gb);
    }

    #[test]
    fn gradcheck_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_planes(&mut rng, 2, 3, 4);
        let scale = rand_vec(&mut rng, 2);
        let shift = rand_vec(&mut rng, 2);
        let proj = rand_vec(&mut rng, 24);
        let g = Planes::from_vec(2, 3, 4, proj.clone());
        let (_, cache) = instance_norm(&x, &scale, &shift, 1e-5);
        let mut gs = vec![0.0; 2];
        let mut gt = vec![0.0; 2];
        let gin = instance_norm_backward(&cache, &scale, &g, &mut gs, &mut gt);
        check_input_grad(&x, &proj, |x| instance_norm(x, &scale, &shift, 1e-5).0, &gin);
        check_param_grad(&scale, &proj, |s| instance_norm(&x, s, &shift, 1e-5).0, &gs);
        check_param_grad(&shift, &proj, |t| instance_norm(&x, &scale, t, 1e-5).0, &gt);
    }

    #[test]
    fn gradcheck_leaky_relu_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // keep inputs away from the kink
        let data: Vec<f64> = rand_vec(&mut rng, 12)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let x = Planes::from_vec(2, 2, 3, data);
        let proj = rand_vec(&mut rng, 12);
        let g = Planes::from_vec(2, 2, 3, proj.clone());
        let gin = leaky_relu_backward(&x, 0.01, &g);
        check_input_grad(&x, &proj, |x| leaky_relu(x, 0.01), &gin);

        let b = rand_planes(&mut rng, 1, 2, 3);
        let proj = rand_vec(&mut rng, 18);
        let g = Planes::from_vec(3, 2, 3, proj.clone());
        let (ga, gb) = concat_backward(&g, 2);
        check_input_grad(&x, &proj, |a| concat(a, &b), &ga);
        check_input_grad(&b, &proj, |bb| concat(&x, bb), &gb);
    }
}
