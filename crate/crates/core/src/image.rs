//! In-memory images with `f32` samples in `[0, 1]`.
//!
//! Continuous pixel coordinates put the centre of pixel `(i, j)` at
//! `(i + 0.5, j + 0.5)`; pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

/// Row-major interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    /// Panics if `data.len() != width * height * 3`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "rgb buffer size mismatch");
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    /// 8-bit samples scaled by `1/255`.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3, "rgb buffer size mismatch");
        RgbImage {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Quantizes to 8 bits (`round(clamp(v) * 255)`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at continuous coordinates. `None` outside the image.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<[f32; 3]> {
        if !(u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64) {
            return None;
        }
        let (x0, x1, wx) = bilinear_taps(u, self.width);
        let (y0, y1, wy) = bilinear_taps(v, self.height);
        let mut out = [0.0f32; 3];
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        for k in 0..3 {
            let top = a[k] as f64 * (1.0 - wx) + b[k] as f64 * wx;
            let bottom = c[k] as f64 * (1.0 - wx) + d[k] as f64 * wx;
            out[k] = (top * (1.0 - wy) + bottom * wy) as f32;
        }
        Some(out)
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B`.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        GrayImage::from_vec(self.width, self.height, data)
    }

    /// Area-averaging resample to `width x height`.
    pub fn resize_area(&self, width: usize, height: usize) -> RgbImage {
        let data = resize_area_channels(&self.data, 3, self.width, self.height, width, height);
        RgbImage::from_vec(width, height, data)
    }

    /// Channel-planar copy (`3 x H x W`).
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                out[k * n + i] = p[k];
            }
        }
        out
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Neighbouring sample indices and the weight of the second one for a
/// continuous coordinate `c` in `[0, n)`.
fn bilinear_taps(c: f64, n: usize) -> (usize, usize, f64) {
    let p = c - 0.5;
    let i0 = p.floor();
    let w = p - i0;
    let clamp = |i: f64| -> usize { i.max(0.0).min((n - 1) as f64) as usize };
    (clamp(i0), clamp(i0 + 1.0), w)
}

/// Single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "gray buffer size mismatch");
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Replicated-border access.
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Gaussian blur truncated at `3 sigma`, replicated borders.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        let kernel = gaussian_kernel(sigma);
        let tmp = convolve_rows(&self.data, self.width, self.height, &kernel);
        let out = convolve_cols(&tmp, self.width, self.height, &kernel);
        GrayImage::from_vec(self.width, self.height, out)
    }

    pub fn to_rgb(&self) -> RgbImage {
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RgbImage::from_vec(self.width, self.height, data)
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(0.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub(crate) fn convolve_rows(src: &[f32], w: usize, h: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f64;
            for (t, &kv) in kernel.iter().enumerate() {
                let xx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

pub(crate) fn convolve_cols(src: &[f32], w: usize, h: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (t, &kv) in kernel.iter().enumerate() {
                let yy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * src[yy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// For each destination cell, the source cells it overlaps and the overlap
/// fraction (weights sum to one).
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

pub(crate) fn resize_area_channels(
    src: &[f32],
    channels: usize,
    sw: usize,
    sh: usize,
    dw: usize,
    dh: usize,
) -> Vec<f32> {
    let tx = area_taps(sw, dw);
    let ty = area_taps(sh, dh);
    let mut rows = vec![0.0f64; dw * sh * channels];
    for y in 0..sh {
        for (x, taps) in tx.iter().enumerate() {
            for &(sx, wt) in taps {
                for c in 0..channels {
                    rows[(y * dw + x) * channels + c] += wt * src[(y * sw + sx) * channels + c] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; dw * dh * channels];
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..dw {
            for c in 0..channels {
                let acc: f64 = taps
                    .iter()
                    .map(|&(sy, wt)| wt * rows[(sy * dw + x) * channels + c])
                    .sum();
                out[(y * dw + x) * channels + c] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(4 * 5 * 3).collect();
        let img = RgbImage::from_u8(4, 5, &bytes);
        assert_eq!(img.to_u8(), bytes);
    }

    #[test]
    fn bilinear_hits_pixel_centres() {
        let img = RgbImage::from_fn(4, 3, |x, y| [x as f32, y as f32, 0.5]);
        assert_eq!(img.sample_bilinear(2.5, 1.5), Some([2.0, 1.0, 0.5]));
        let mid = img.sample_bilinear(2.0, 1.5).unwrap();
        assert!((mid[0] - 1.5).abs() < 1e-6);
        assert_eq!(img.sample_bilinear(-0.01, 1.0), None);
        assert_eq!(img.sample_bilinear(4.0, 1.0), None);
        // border half-pixel clamps to the edge sample
        assert_eq!(img.sample_bilinear(0.2, 0.2).unwrap()[0], 0.0);
    }

    #[test]
    fn resize_area_preserves_mean_and_constant() {
        let img = RgbImage::from_fn(13, 7, |x, y| [((x * 7 + y * 3) % 11) as f32 / 10.0, 0.25, 1.0]);
        let small = img.resize_area(5, 3);
        let mean = |im: &RgbImage| im.data().chunks_exact(3).map(|p| p[0] as f64).sum::<f64>() / (im.width() * im.height()) as f64;
        assert!((mean(&img) - mean(&small)).abs() < 1e-5);
        assert!(small.data().chunks_exact(3).all(|p| (p[1] - 0.25).abs() < 1e-6 && (p[2] - 1.0).abs() < 1e-6));
        // integer factor reduces to block averages
        let img = RgbImage::from_fn(4, 2, |x, _| [x as f32, 0.0, 0.0]);
        let half = img.resize_area(2, 1);
        assert_eq!(half.get(0, 0)[0], 0.5);
        assert_eq!(half.get(1, 0)[0], 2.5);
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flat = GrayImage::from_vec(9, 9, vec![0.3; 81]).gaussian_blur(2.0);
        assert!(flat.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn luma_weights() {
        let img = RgbImage::from_fn(1, 1, |_, _| [1.0, 0.0, 0.0]);
        assert!((img.to_gray().get(0, 0) - 0.299).abs() < 1e-7);
    }
}
