//! Input gating: reject feature-poor frames and frames whose Lidar
//! projection covers too little of the image.
//!
//! Keypoints are counted with a Harris detector: 3x3 Sobel gradients,
//! Gaussian structure-tensor window (`sigma = 1`), `k = 0.04`, threshold at
//! `1%` of the strongest response and 3x3 non-maximum suppression.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::DepthImage;
use crate::image::{convolve_cols, convolve_rows, gaussian_kernel, GrayImage, RgbImage};

pub const HARRIS_K: f64 = 0.04;
pub const HARRIS_WINDOW_SIGMA: f64 = 1.0;
pub const HARRIS_RELATIVE_THRESHOLD: f64 = 0.01;
pub const MIN_IMAGE_SIDE: usize = 7;
pub const DEFAULT_MIN_KEYPOINTS: usize = 200;
pub const DEFAULT_MIN_IOU: f64 = 0.5;
/// Side of the box used to dilate occupied depth pixels.
pub const DEPTH_DILATION: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GateError {
    #[error("image {width}x{height} is smaller than 7x7")]
    ImageTooSmall { width: usize, height: usize },
    #[error("dimension mismatch: image {image:?} vs depth {depth:?}")]
    DimensionMismatch {
        image: (usize, usize),
        depth: (usize, usize),
    },
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Harris corner response per pixel (row-major).
pub fn harris_response(gray: &GrayImage) -> Vec<f64> {
    let (w, h) = (gray.width(), gray.height());
    let mut ixx = vec![0.0f32; w * h];
    let mut iyy = vec![0.0f32; w * h];
    let mut ixy = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| gray.get_clamped(x + dx, y + dy) as f64;
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            ixx[i] = (gx * gx) as f32;
            iyy[i] = (gy * gy) as f32;
            ixy[i] = (gx * gy) as f32;
        }
    }
    let kernel = gaussian_kernel(HARRIS_WINDOW_SIGMA);
    let window = |src: &[f32]| convolve_cols(&convolve_rows(src, w, h, &kernel), w, h, &kernel);
    let (sxx, syy, sxy) = (window(&ixx), window(&iyy), window(&ixy));
    (0..w * h)
        .map(|i| {
            let (a, b, c) = (sxx[i] as f64, syy[i] as f64, sxy[i] as f64);
            a * b - c * c - HARRIS_K * (a + b) * (a + b)
        })
        .collect()
}

/// Pixel coordinates of Harris keypoints.
pub fn detect_keypoints(image: &RgbImage) -> Result<Vec<(usize, usize)>, GateError> {
    let (w, h) = (image.width(), image.height());
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(GateError::ImageTooSmall { width: w, height: h });
    }
    let r = harris_response(&image.to_gray());
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Ok(Vec::new());
    }
    let threshold = HARRIS_RELATIVE_THRESHOLD * max;
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = r[y * w + x];
            if v > threshold && is_local_max(&r, w, h, x, y) {
                points.push((x, y));
            }
        }
    }
    Ok(points)
}

/// 3x3 suppression; plateaus keep their first pixel in raster order.
fn is_local_max(r: &[f64], w: usize, h: usize, x: usize, y: usize) -> bool {
    let v = r[y * w + x];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (xx, yy) = (x as isize + dx, y as isize + dy);
            if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                continue;
            }
            let q = r[yy as usize * w + xx as usize];
            let earlier = (dy, dx) < (0, 0);
            if (earlier && !(v > q)) || (!earlier && !(v >= q)) {
                return false;
            }
        }
    }
    true
}

pub fn count_keypoints(image: &RgbImage) -> Result<usize, GateError> {
    detect_keypoints(image).map(|p| p.len())
}

/// `|A & B| / |A | B|`; zero when both masks are empty.
pub fn projection_iou(a: &Mask, b: &Mask) -> Result<f64, GateError> {
    if a.width != b.width || a.height != b.height {
        return Err(GateError::DimensionMismatch {
            image: (a.width, a.height),
            depth: (b.width, b.height),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Coverage extent of a sparse depth image: occupied pixels dilated by a 5x5
/// box, then filled to their bounding box.
pub fn depth_coverage_mask(depth: &DepthImage) -> Mask {
    let (w, h) = (depth.width(), depth.height());
    let r = DEPTH_DILATION / 2;
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if depth.get(x, y) > 0.0 {
                let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
                let (x1, y1) = ((x + r).min(w - 1), (y + r).min(h - 1));
                bbox = Some(match bbox {
                    None => (x0, y0, x1, y1),
                    Some((a, b, c, d)) => (a.min(x0), b.min(y0), c.max(x1), d.max(y1)),
                });
            }
        }
    }
    match bbox {
        None => Mask::new(w, h),
        Some((x0, y0, x1, y1)) => {
            Mask::from_fn(w, h, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub min_keypoints: usize,
    pub min_iou: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            min_keypoints: DEFAULT_MIN_KEYPOINTS,
            min_iou: DEFAULT_MIN_IOU,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Keypoints,
    Iou,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Keypoints => "keypoints",
            RejectReason::Iou => "iou",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub keypoints: usize,
    pub iou: f64,
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

impl GateReport {
    pub fn reasons_string(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.reasons.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(r.as_str());
        }
        s
    }
}

/// Gates one image/depth pair. `roi` replaces the default full-frame image
/// mask.
pub fn gate_frame(
    image: &RgbImage,
    depth: &DepthImage,
    thresholds: &GateThresholds,
    roi: Option<&Mask>,
) -> Result<GateReport, GateError> {
    if image.width() != depth.width() || image.height() != depth.height() {
        return Err(GateError::DimensionMismatch {
            image: (image.width(), image.height()),
            depth: (depth.width(), depth.height()),
        });
    }
    let keypoints = count_keypoints(image)?;
    let full;
    let image_mask = match roi {
        Some(m) => m,
        None => {
            full = Mask::full(image.width(), image.height());
            &full
        }
    };
    let iou = projection_iou(image_mask, &depth_coverage_mask(depth))?;
    let mut reasons = Vec::new();
    if keypoints < thresholds.min_keypoints {
        reasons.push(RejectReason::Keypoints);
    }
    if !(iou >= thresholds.min_iou) {
        reasons.push(RejectReason::Iou);
    }
    Ok(GateReport {
        keypoints,
        iou,
        accepted: reasons.is_empty(),
        reasons,
    })
}
