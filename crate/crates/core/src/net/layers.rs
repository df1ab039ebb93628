//! Minimal f32 layer primitives with explicit forward and backward passes.
//!
//! Feature maps are single-image CHW buffers. Parameters live in a
//! [`Params`] store and gradients in a parallel [`Grads`] store, so forward
//! passes only need shared access to the model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Fm {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fm {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Fm { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature map size");
        Fm { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Fm) {
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub info: Vec<ParamInfo>,
    pub values: Vec<Vec<f32>>,
}

impl Params {
    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> usize {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        self.info.push(ParamInfo { name: name.to_string(), shape: shape.to_vec() });
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(params: &Params) -> Self {
        Grads { values: params.values.iter().map(|v| vec![0.0; v.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.values.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().flatten().for_each(|v| *v = 0.0);
    }
}

/// `c = a * b + beta * c` with optional transposes of row-major operands.
/// `a` is `m x k` (stored `k x m` when `ta`), `b` is `k x n` (stored `n x k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    He,
    Zero,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(params: &mut Params, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng, init: Init) -> Self {
        let fan_in = cin * k * k;
        let weights = match init {
            Init::He => he_normal(rng, fan_in, cout * fan_in),
            Init::Zero => vec![0.0; cout * fan_in],
        };
        let w = params.add(&format!("{name}.weight"), &[cout, cin, k, k], weights);
        let b = params.add(&format!("{name}.bias"), &[cout], vec![0.0; cout]);
        Conv2d { w, b, cin, cout, k, stride, pad: k / 2 }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn im2col(&self, x: &Fm) -> Vec<f32> {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let p = oh * ow;
        if self.k == 1 && self.stride == 1 {
            return x.data.clone();
        }
        let k = self.k;
        let mut cols = vec![0.0f32; self.cin * k * k * p];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize) -> Fm {
        let (oh, ow) = self.out_dims(h, w);
        let p = oh * ow;
        if self.k == 1 && self.stride == 1 {
            return Fm::new(self.cin, h, w, cols.to_vec());
        }
        let k = self.k;
        let mut x = Fm::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = x.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, p: &Params, x: &Fm) -> (Fm, Vec<f32>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_dims(x.h, x.w);
        let cols = self.im2col(x);
        let kk = self.cin * self.k * self.k;
        let n = oh * ow;
        let mut out = Fm::zeros(self.cout, oh, ow);
        let bias = &p.values[self.b];
        for (co, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(self.cout, kk, n, &p.values[self.w], false, &cols, false, &mut out.data, 1.0);
        (out, cols)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&self, p: &Params, g: &mut Grads, in_hw: (usize, usize), cols: &[f32], dy: &Fm, need_dx: bool) -> Option<Fm> {
        let kk = self.cin * self.k * self.k;
        let n = dy.h * dy.w;
        gemm(self.cout, n, kk, &dy.data, false, cols, true, &mut g.values[self.w], 1.0);
        for (co, chunk) in dy.data.chunks(n).enumerate() {
            g.values[self.b][co] += chunk.iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0f32; kk * n];
        gemm(kk, self.cout, n, &p.values[self.w], true, &dy.data, false, &mut dcols, 0.0);
        Some(self.col2im(&dcols, in_hw.0, in_hw.1))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, fin: usize, fout: usize, rng: &mut impl Rng, init: Init) -> Self {
        let weights = match init {
            Init::He => he_normal(rng, fin, fin * fout),
            Init::Zero => vec![0.0; fin * fout],
        };
        let w = params.add(&format!("{name}.weight"), &[fout, fin], weights);
        let b = params.add(&format!("{name}.bias"), &[fout], vec![0.0; fout]);
        Linear { w, b, fin, fout }
    }

    pub fn forward(&self, p: &Params, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.fin, "linear input size");
        let w = &p.values[self.w];
        p.values[self.b].iter().enumerate().map(|(o, b)| b + dot(&w[o * self.fin..(o + 1) * self.fin], x)).collect()
    }

    pub fn backward(&self, p: &Params, g: &mut Grads, x: &[f32], dy: &[f32], need_dx: bool) -> Option<Vec<f32>> {
        let gw = &mut g.values[self.w];
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                axpy(d, x, &mut gw[o * self.fin..(o + 1) * self.fin]);
            }
        }
        for (gb, d) in g.values[self.b].iter_mut().zip(dy) {
            *gb += d;
        }
        if !need_dx {
            return None;
        }
        let w = &p.values[self.w];
        let mut dx = vec![0.0f32; self.fin];
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &w[o * self.fin..(o + 1) * self.fin], &mut dx);
            }
        }
        Some(dx)
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `y += a * x`
pub fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward(y: &[f32], dy: &mut [f32]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn upsample2(x: &Fm) -> Fm {
    let mut out = Fm::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        let src = x.plane(c);
        let w2 = x.w * 2;
        let dst = out.plane_mut(c);
        for y in 0..x.h * 2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: 2x2 sum pooling.
pub fn upsample2_backward(dy: &Fm) -> Fm {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Fm::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}

/// Per-axis interpolation taps for resizing `n_in` samples to `n_out` with
/// half-pixel centers.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

pub fn resize_bilinear(x: &Fm, oh: usize, ow: usize) -> Fm {
    let ty = resize_taps(x.h, oh);
    let tx = resize_taps(x.w, ow);
    let mut out = Fm::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * x.w + x0] * (1.0 - fx) + src[y0 * x.w + x1] * fx;
                let bot = src[y1 * x.w + x0] * (1.0 - fx) + src[y1 * x.w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(dy: &Fm, ih: usize, iw: usize) -> Fm {
    let ty = resize_taps(ih, dy.h);
    let tx = resize_taps(iw, dy.w);
    let mut dx = Fm::zeros(dy.c, ih, iw);
    for c in 0..dy.c {
        let src = dy.plane(c);
        let dst = dx.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * dy.w + ox];
                dst[y0 * iw + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * iw + x1] += g * (1.0 - fy) * fx;
                dst[y1 * iw + x0] += g * fy * (1.0 - fx);
                dst[y1 * iw + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool(x: &Fm, k: usize) -> Fm {
    if k == 1 {
        return x.clone();
    }
    let (oh, ow) = (x.h / k, x.w / k);
    let mut out = Fm::zeros(x.c, oh, ow);
    let norm = 1.0 / (k * k) as f32;
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh * k {
            for xx in 0..ow * k {
                dst[(y / k) * ow + xx / k] += src[y * x.w + xx] * norm;
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Fm) -> Vec<f32> {
    let n = (x.h * x.w) as f32;
    (0..x.c).map(|c| x.plane(c).iter().sum::<f32>() / n).collect()
}

pub fn global_avg_pool_backward(dy: &[f32], h: usize, w: usize) -> Fm {
    let n = (h * w) as f32;
    let mut out = Fm::zeros(dy.len(), h, w);
    for (c, &d) in dy.iter().enumerate() {
        out.plane_mut(c).fill(d / n);
    }
    out
}

/// Region in feature-map coordinates, already divided by the stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Roi {
    /// Maps an image-space box onto a map with the given stride, using
    /// half-pixel alignment.
    pub fn from_image_box(b: &crate::annotations::BBox, stride: f64) -> Self {
        Roi {
            x0: b.x_min / stride - 0.5,
            y0: b.y_min / stride - 0.5,
            x1: b.x_max / stride - 0.5,
            y1: b.y_max / stride - 0.5,
        }
    }
}

/// Bilinear taps for one sample point, or `None` outside the map.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f32); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = (y - y0 as f64) as f32;
    let lx = (x - x0 as f64) as f32;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([(y0 * w + x0, hy * hx), (y0 * w + x1, hy * lx), (y1 * w + x0, ly * hx), (y1 * w + x1, ly * lx)])
}

/// RoIAlign with `sampling x sampling` points per output bin.
pub fn roi_align(x: &Fm, roi: &Roi, out: usize, sampling: usize) -> Fm {
    let mut result = Fm::zeros(x.c, out, out);
    let taps = roi_taps(roi, x.h, x.w, out, sampling);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = result.plane_mut(c);
        for (bin, list) in taps.iter().enumerate() {
            dst[bin] = list.iter().map(|&(i, wt)| src[i] * wt).sum();
        }
    }
    result
}

pub fn roi_align_backward(dy: &Fm, roi: &Roi, h: usize, w: usize, sampling: usize, dx: &mut Fm) {
    let taps = roi_taps(roi, h, w, dy.h, sampling);
    for c in 0..dy.c {
        let src = dy.plane(c);
        let dst = dx.plane_mut(c);
        for (bin, list) in taps.iter().enumerate() {
            let g = src[bin];
            for &(i, wt) in list {
                dst[i] += g * wt;
            }
        }
    }
}

fn roi_taps(roi: &Roi, h: usize, w: usize, out: usize, sampling: usize) -> Vec<Vec<(usize, f32)>> {
    let bin_w = (roi.x1 - roi.x0) / out as f64;
    let bin_h = (roi.y1 - roi.y0) / out as f64;
    let norm = 1.0 / (sampling * sampling) as f32;
    let mut taps = Vec::with_capacity(out * out);
    for by in 0..out {
        for bx in 0..out {
            let mut list = Vec::with_capacity(4 * sampling * sampling);
            for sy in 0..sampling {
                let y = roi.y0 + bin_h * (by as f64 + (sy as f64 + 0.5) / sampling as f64);
                for sx in 0..sampling {
                    let x = roi.x0 + bin_w * (bx as f64 + (sx as f64 + 0.5) / sampling as f64);
                    if let Some(t) = bilinear_taps(y, x, h, w) {
                        list.extend(t.iter().map(|&(i, wt)| (i, wt * norm)));
                    }
                }
            }
            taps.push(list);
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_fm(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Fm {
        Fm::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks `<dy, f(x + e) - f(x - e)> / 2e` against `<dx, e-direction>`
    /// along random directions.
    fn directional_check(x: &[f32], dx: &[f32], f: impl Fn(&[f32]) -> f64, rng: &mut ChaCha8Rng) {
        for _ in 0..4 {
            let dir: Vec<f32> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = 1e-2f32;
            let plus: Vec<f32> = x.iter().zip(&dir).map(|(a, d)| a + eps * d).collect();
            let minus: Vec<f32> = x.iter().zip(&dir).map(|(a, d)| a - eps * d).collect();
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps as f64);
            let analytic: f64 = dx.iter().zip(&dir).map(|(a, d)| (*a as f64) * (*d as f64)).sum();
            let scale = numeric.abs().max(analytic.abs()).max(1e-3);
            assert!((numeric - analytic).abs() / scale < 2e-3, "numeric {numeric} analytic {analytic}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let mut params = Params::default();
            let conv = Conv2d::new(&mut params, "c", 3, 4, k, stride, &mut rng, Init::He);
            let x = rand_fm(&mut rng, 3, 7, 6);
            let (y, cols) = conv.forward(&params, &x);
            let dy = rand_fm(&mut rng, y.c, y.h, y.w);
            let mut g = Grads::zeros_like(&params);
            let dx = conv.backward(&params, &mut g, (x.h, x.w), &cols, &dy, true).unwrap();
            let loss = |p: &Params, xd: &[f32]| {
                let (y, _) = conv.forward(p, &Fm::new(3, 7, 6, xd.to_vec()));
                y.data.iter().zip(&dy.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
            };
            directional_check(&x.data, &dx.data, |xd| loss(&params, xd), &mut rng);
            let wv = params.values[conv.w].clone();
            directional_check(&wv, &g.values[conv.w], |wd| {
                let mut p = params.clone();
                p.values[conv.w] = wd.to_vec();
                loss(&p, &x.data)
            }, &mut rng);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::default();
        let lin = Linear::new(&mut params, "l", 5, 3, &mut rng, Init::He);
        let x: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy = vec![0.3, -1.0, 0.5];
        let mut g = Grads::zeros_like(&params);
        let dx = lin.backward(&params, &mut g, &x, &dy, true).unwrap();
        let f = |xd: &[f32]| lin.forward(&params, xd).iter().zip(&dy).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>();
        directional_check(&x, &dx, f, &mut rng);
    }

    #[test]
    fn resize_and_roi_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_fm(&mut rng, 2, 5, 6);
        let dy = rand_fm(&mut rng, 2, 11, 9);
        let dx = resize_bilinear_backward(&dy, 5, 6);
        let f = |xd: &[f32]| {
            let y = resize_bilinear(&Fm::new(2, 5, 6, xd.to_vec()), 11, 9);
            y.data.iter().zip(&dy.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        directional_check(&x.data, &dx.data, f, &mut rng);

        let roi = Roi { x0: 0.7, y0: -0.3, x1: 4.2, y1: 3.9 };
        let dy = rand_fm(&mut rng, 2, 3, 3);
        let mut dx = Fm::zeros(2, 5, 6);
        roi_align_backward(&dy, &roi, 5, 6, 2, &mut dx);
        let f = |xd: &[f32]| {
            let y = roi_align(&Fm::new(2, 5, 6, xd.to_vec()), &roi, 3, 2);
            y.data.iter().zip(&dy.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        directional_check(&x.data, &dx.data, f, &mut rng);
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_fm(&mut rng, 2, 3, 4);
        let dy = rand_fm(&mut rng, 2, 6, 8);
        let lhs: f32 = upsample2(&x).data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&upsample2_backward(&dy).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn roi_align_constant_map() {
        let x = Fm::new(1, 8, 8, vec![2.5; 64]);
        let y = roi_align(&x, &Roi { x0: 1.0, y0: 1.0, x1: 5.0, y1: 6.0 }, 7, 2);
        assert!(y.data.iter().all(|v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn resize_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_fm(&mut rng, 1, 4, 4);
        assert_eq!(resize_bilinear(&x, 4, 4), x);
    }
}
