//! Point-cloud-over-image overlays for judging alignment by eye.

use calica_core::cloud::PointCloud;
use calica_core::geometry::{CameraIntrinsics, RigidTransform};
use calica_core::image::RgbImage;

/// Hue ramp from red (range 0) through green to blue (`max_range` and
/// beyond).
pub fn range_colour(range: f64, max_range: f64) -> [f32; 3] {
    let t = (range / max_range).clamp(0.0, 1.0) as f32;
    // hue in sextants: 0 = red, 2 = green, 4 = blue
    let h = 4.0 * t;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        _ => [0.0, x, 1.0],
    }
}

/// Copy of `image` with every point of `cloud` drawn as a single pixel at its
/// projection through `ext` and `intr`, coloured by range. Nearer points are
/// drawn over farther ones.
pub fn render_overlay(
    image: &RgbImage,
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    ext: &RigidTransform,
    max_range: f64,
) -> RgbImage {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut hits: Vec<(f64, usize, usize)> = cloud
        .points()
        .iter()
        .filter_map(|&p| {
            let pc = ext.apply(p);
            let px = intr.project(pc)?;
            let inside = px.u >= 0.0 && px.v >= 0.0 && px.u < w && px.v < h;
            let range = (pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2]).sqrt();
            inside.then_some((range, px.u as usize, px.v as usize))
        })
        .collect();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = image.clone();
    for (range, x, y) in hits {
        out.set(x, y, range_colour(range, max_range));
    }
    out
}
