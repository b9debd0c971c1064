//! Point clouds and their z-buffered projection into sparse depth images.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{norm3, CameraIntrinsics, RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudError {
    #[error("intensity count {intensity} does not match point count {points}")]
    IntensityLength { points: usize, intensity: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
}

/// Lidar points in metres, optionally with per-point intensity in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, CloudError> {
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(CloudError::NonFinite { index });
        }
        Ok(PointCloud {
            points,
            intensity: None,
        })
    }

    pub fn with_intensity(points: Vec<Vec3>, intensity: Vec<f32>) -> Result<Self, CloudError> {
        if points.len() != intensity.len() {
            return Err(CloudError::IntensityLength {
                points: points.len(),
                intensity: intensity.len(),
            });
        }
        let mut c = PointCloud::new(points)?;
        c.intensity = Some(intensity);
        Ok(c)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-pixel camera-frame range in metres; `0` marks an empty pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            depth: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.depth
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.depth[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        self.depth[y * self.width + x] = d;
    }

    pub fn occupied(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Maps every point through `ext`; intensity is carried over.
pub fn transform_cloud(c: &PointCloud, ext: &RigidTransform) -> PointCloud {
    PointCloud {
        points: c.points.iter().map(|&p| ext.apply(p)).collect(),
        intensity: c.intensity.clone(),
    }
}

/// Projects the cloud and keeps the nearest point (by camera-frame range)
/// per pixel. Exact range ties go to the lower point index.
pub fn render_depth_image(
    c: &PointCloud,
    intr: &CameraIntrinsics,
    ext: &RigidTransform,
    width: usize,
    height: usize,
) -> DepthImage {
    render_depth_image_scaled(c, intr, ext, width, height, 1.0, 1.0)
}

/// As [`render_depth_image`], with projected pixel coordinates multiplied by
/// `(scale_x, scale_y)` before rasterization. Used to render straight into a
/// resampled network input without breaking the single-focal-length model.
pub fn render_depth_image_scaled(
    c: &PointCloud,
    intr: &CameraIntrinsics,
    ext: &RigidTransform,
    width: usize,
    height: usize,
    scale_x: f64,
    scale_y: f64,
) -> DepthImage {
    assert!(width > 0 && height > 0, "depth image must be non-empty");
    let mut best = vec![f64::INFINITY; width * height];
    for p in &c.points {
        let xc = ext.apply(*p);
        let Some(px) = intr.project(xc) else { continue };
        let (u, v) = (px.u * scale_x, px.v * scale_y);
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            continue;
        }
        let i = v as usize * width + u as usize;
        let range = norm3(xc);
        // strict comparison keeps the earliest point on ties
        if range < best[i] {
            best[i] = range;
        }
    }
    DepthImage {
        width,
        height,
        depth: best
            .into_iter()
            .map(|r| if r.is_finite() { r as f32 } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, w as f64 / 2.0, h as f64 / 2.0, 0.0).unwrap()
    }

    #[test]
    fn transform_examples() {
        let c = PointCloud::with_intensity(std::vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]], std::vec![0.1, 0.9]).unwrap();
        assert_eq!(transform_cloud(&c, &RigidTransform::IDENTITY), c);
        let moved = transform_cloud(&c, &RigidTransform::translation([0.0, 0.0, 1.0]));
        assert_eq!(moved.points()[0], [0.0, 0.0, 1.0]);
        assert_eq!(moved.intensity(), c.intensity());

        let ext = RigidTransform::new(Quaternion::from_euler_xyz_deg([10.0, -4.0, 33.0]), [0.3, -2.0, 1.5]);
        let back = transform_cloud(&transform_cloud(&c, &ext), &ext.inverse());
        for (a, b) in back.points().iter().zip(c.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_clouds() {
        assert!(PointCloud::new(std::vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::with_intensity(std::vec![[0.0; 3]], std::vec![]).is_err());
    }

    #[test]
    fn empty_cloud_renders_zeros() {
        let d = render_depth_image(&PointCloud::default(), &cam(8, 6), &RigidTransform::IDENTITY, 8, 6);
        assert_eq!(d.occupied(), 0);
        assert_eq!(d.data().len(), 48);
    }

    #[test]
    fn single_point_lands_on_centre() {
        let (w, h) = (64, 48);
        let c = PointCloud::new(std::vec![[0.0, 0.0, 5.0]]).unwrap();
        let d = render_depth_image(&c, &cam(w, h), &RigidTransform::IDENTITY, w, h);
        assert_eq!(d.get(32, 24), 5.0);
        assert_eq!(d.occupied(), 1);
    }

    #[test]
    fn nearest_point_wins() {
        let (w, h) = (64, 48);
        for pts in [std::vec![[0.0, 0.0, 5.0], [0.0, 0.0, 9.0]], std::vec![[0.0, 0.0, 9.0], [0.0, 0.0, 5.0]]] {
            let c = PointCloud::new(pts).unwrap();
            let d = render_depth_image(&c, &cam(w, h), &RigidTransform::IDENTITY, w, h);
            assert_eq!(d.get(32, 24), 5.0);
        }
    }

    #[test]
    fn out_of_frame_and_behind_are_dropped() {
        let c = PointCloud::new(std::vec![[0.0, 0.0, -5.0], [10.0, 0.0, 1.0], [0.0, -10.0, 1.0]]).unwrap();
        let d = render_depth_image(&c, &cam(64, 48), &RigidTransform::IDENTITY, 64, 48);
        assert_eq!(d.occupied(), 0);
    }

    #[test]
    fn scaled_render_matches_scaled_intrinsics() {
        let c = PointCloud::new((0..200).map(|i| {
            let t = i as f64 * 0.37;
            [t.sin() * 3.0, t.cos() * 1.5, 4.0 + (i % 13) as f64]
        }).collect()).unwrap();
        let intr = CameraIntrinsics::new(200.0, 128.0, 96.0, 0.3).unwrap();
        let a = render_depth_image_scaled(&c, &intr, &RigidTransform::IDENTITY, 64, 48, 0.25, 0.25);
        let b = render_depth_image(&c, &intr.scaled(0.25), &RigidTransform::IDENTITY, 64, 48);
        assert_eq!(a, b);
    }
}
