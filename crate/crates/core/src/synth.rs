//! A procedural street-like world observed by a KITTI-like camera and a
//! 64-ring spinning Lidar. Used for training data when no recorded drive is
//! at hand, and as ground truth in tests.
//!
//! World coordinates are the Lidar frame: x forward, y left, z up, origin at
//! the Lidar.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::geometry::{add3, dot3, norm3, scale3, Calibration, CameraIntrinsics, Mat3, Pixel, Quaternion, RigidTransform, Vec3};
use crate::image::RgbImage;
use crate::labelgen::rng_from_seed;

pub const KITTI_WIDTH: usize = 1242;
pub const KITTI_HEIGHT: usize = 375;
/// Mounting height of the Lidar above the ground, metres.
pub const LIDAR_HEIGHT: f64 = 1.73;
const SKY: [f32; 3] = [0.62, 0.74, 0.9];

/// Nominal calibration resembling a KITTI colour camera: 1242x375 pixels,
/// pinhole, camera looking along the Lidar's x axis slightly behind and below it.
pub fn kitti_like_calibration() -> Calibration {
    let axes = Mat3::from_row_major(&[0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0]);
    let tilt = Quaternion::from_euler_xyz_deg([0.4, -0.3, 0.2]);
    let q = tilt * Quaternion::from_matrix(&axes).expect("axis permutation is a rotation");
    Calibration {
        intrinsics: CameraIntrinsics::new(721.5377, 609.5593, 172.854, 0.0).expect("valid intrinsics"),
        extrinsic: RigidTransform::new(q, [-0.0041, -0.0763, -0.2717]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub rings: usize,
    pub elevation_top_deg: f64,
    pub elevation_bottom_deg: f64,
    /// Horizontal sweep kept, symmetric about the forward axis.
    pub azimuth_half_fov_deg: f64,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            rings: 64,
            elevation_top_deg: 2.0,
            elevation_bottom_deg: -24.8,
            azimuth_half_fov_deg: 50.0,
            azimuth_step_deg: 0.17,
            max_range: 80.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub calibration: Calibration,
    pub lidar: LidarSpec,
    pub min_boxes: usize,
    pub max_boxes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: KITTI_WIDTH,
            height: KITTI_HEIGHT,
            calibration: kitti_like_calibration(),
            lidar: LidarSpec::default(),
            min_boxes: 5,
            max_boxes: 9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cuboid {
    min: Vec3,
    max: Vec3,
    colour: [f32; 3],
    cell: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Plane {
    /// Points `p` with `p[axis] == offset`.
    axis: usize,
    offset: f64,
    colour: [f32; 3],
    cell: f64,
}

/// One randomly furnished street scene.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    planes: Vec<Plane>,
    cuboids: Vec<Cuboid>,
}

struct Hit {
    t: f64,
    colour: [f32; 3],
}

fn checker(colour: [f32; 3], a: f64, b: f64, cell: f64) -> [f32; 3] {
    let parity = ((a / cell).floor() as i64 + (b / cell).floor() as i64).rem_euclid(2);
    let k = if parity == 0 { 1.0 } else { 0.45 };
    [colour[0] * k, colour[1] * k, colour[2] * k]
}

fn random_colour<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)]
}

impl World {
    pub fn random(config: &WorldConfig, seed: u64) -> World {
        let mut rng = rng_from_seed(seed);
        let planes = alloc::vec![
            Plane {
                axis: 2,
                offset: -LIDAR_HEIGHT,
                colour: [0.55, 0.55, 0.5],
                cell: rng.random_range(0.8..1.6),
            },
            Plane {
                axis: 0,
                offset: rng.random_range(35.0..55.0),
                colour: random_colour(&mut rng),
                cell: 2.0,
            },
            Plane {
                axis: 1,
                offset: rng.random_range(7.0..11.0),
                colour: random_colour(&mut rng),
                cell: 1.5,
            },
            Plane {
                axis: 1,
                offset: -rng.random_range(7.0..11.0),
                colour: random_colour(&mut rng),
                cell: 1.5,
            },
        ];
        let n = rng.random_range(config.min_boxes..=config.max_boxes.max(config.min_boxes));
        let cuboids = (0..n)
            .map(|_| {
                let x = rng.random_range(6.0..30.0);
                let y = rng.random_range(-6.0..6.0);
                let (sx, sy, sz) = (rng.random_range(0.8..3.0), rng.random_range(0.8..3.0), rng.random_range(0.8..3.5));
                Cuboid {
                    min: [x, y - sy / 2.0, -LIDAR_HEIGHT],
                    max: [x + sx, y + sy / 2.0, -LIDAR_HEIGHT + sz],
                    colour: random_colour(&mut rng),
                    cell: rng.random_range(0.25..0.6),
                }
            })
            .collect();
        World { planes, cuboids }
    }

    fn cast(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, colour: [f32; 3]| {
            if t > 1e-6 && best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, colour });
            }
        };
        for p in &self.planes {
            if d[p.axis].abs() < 1e-12 {
                continue;
            }
            let t = (p.offset - o[p.axis]) / d[p.axis];
            if t > 0.0 {
                let h = add3(o, scale3(d, t));
                let (a, b) = match p.axis {
                    0 => (h[1], h[2]),
                    1 => (h[0], h[2]),
                    _ => (h[0], h[1]),
                };
                consider(t, checker(p.colour, a, b, p.cell));
            }
        }
        for c in &self.cuboids {
            let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
            let mut miss = false;
            for k in 0..3 {
                if d[k].abs() < 1e-12 {
                    if o[k] < c.min[k] || o[k] > c.max[k] {
                        miss = true;
                    }
                    continue;
                }
                let (mut a, mut b) = ((c.min[k] - o[k]) / d[k], (c.max[k] - o[k]) / d[k]);
                if a > b {
                    core::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis = k;
                }
                t1 = t1.min(b);
            }
            if miss || t0 > t1 || t0 <= 0.0 {
                continue;
            }
            let h = add3(o, scale3(d, t0));
            let (a, b) = match axis {
                0 => (h[1], h[2]),
                1 => (h[0], h[2]),
                _ => (h[0], h[1]),
            };
            consider(t0, checker(c.colour, a, b, c.cell));
        }
        best
    }

    /// Ray-traced colour image for a camera with the given calibration
    /// (Lidar-to-camera extrinsic), one ray through each pixel centre.
    pub fn render_image(&self, calib: &Calibration, width: usize, height: usize) -> RgbImage {
        let inv = calib.extrinsic.inverse();
        let origin = inv.translation_vector();
        let rot = inv.rotation_matrix();
        RgbImage::from_fn(width, height, |x, y| {
            let Ok(ray) = calib.intrinsics.unproject(Pixel::new(x as f64 + 0.5, y as f64 + 0.5)) else {
                return [0.0; 3];
            };
            let d = rot.mul_vec(ray);
            let d = scale3(d, 1.0 / norm3(d));
            match self.cast(origin, d) {
                Some(h) => {
                    // mild distance haze keeps far texture from aliasing into noise
                    let fog = (h.t / 120.0).min(0.6) as f32;
                    core::array::from_fn(|k| h.colour[k] * (1.0 - fog) + SKY[k] * fog)
                }
                None => {
                    let up = dot3(d, [0.0, 0.0, 1.0]).max(0.0) as f32;
                    [SKY[0] - 0.2 * up, SKY[1] - 0.1 * up, SKY[2]]
                }
            }
        })
    }

    /// Simulated Lidar sweep in the Lidar frame, with intensity from the
    /// surface brightness.
    pub fn scan(&self, spec: &LidarSpec) -> PointCloud {
        let mut points = Vec::new();
        let mut intensity = Vec::new();
        let steps = (2.0 * spec.azimuth_half_fov_deg / spec.azimuth_step_deg).round() as usize;
        for r in 0..spec.rings {
            let frac = if spec.rings > 1 { r as f64 / (spec.rings - 1) as f64 } else { 0.0 };
            let el = (spec.elevation_top_deg + frac * (spec.elevation_bottom_deg - spec.elevation_top_deg)).to_radians();
            for s in 0..=steps {
                let az = (-spec.azimuth_half_fov_deg + s as f64 * spec.azimuth_step_deg).to_radians();
                let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                if let Some(h) = self.cast([0.0; 3], d) {
                    if h.t <= spec.max_range {
                        points.push(scale3(d, h.t));
                        let c = h.colour;
                        intensity.push(0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]);
                    }
                }
            }
        }
        PointCloud::with_intensity(points, intensity).expect("finite points with matching intensity")
    }
}

/// A rendered image and its Lidar sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub image: RgbImage,
    pub cloud: PointCloud,
}

pub fn synthetic_frame(config: &WorldConfig, seed: u64) -> SyntheticFrame {
    let world = World::random(config, seed);
    SyntheticFrame {
        image: world.render_image(&config.calibration, config.width, config.height),
        cloud: world.scan(&config.lidar),
    }
}

/// Camera centre of `calib` in the Lidar frame.
pub fn camera_centre(calib: &Calibration) -> Vec3 {
    calib.extrinsic.inverse().translation_vector()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::render_depth_image;
    use crate::gate::{gate_frame, GateThresholds};

    fn small_config() -> WorldConfig {
        let mut c = WorldConfig::default();
        c.lidar.azimuth_step_deg = 0.5;
        c
    }

    #[test]
    fn calibration_points_camera_forward() {
        let c = kitti_like_calibration();
        // a point 10 m ahead of the Lidar lands near the principal point
        let px = c.intrinsics.project(c.extrinsic.apply([10.0, 0.0, 0.0])).unwrap();
        assert!((px.u - 609.6).abs() < 20.0 && (px.v - 172.9).abs() < 30.0, "{px}");
        let centre = camera_centre(&c);
        assert!(norm3(centre) < 0.5);
    }

    #[test]
    fn frames_are_deterministic_and_seed_dependent() {
        let cfg = small_config();
        let a = synthetic_frame(&cfg, 3);
        assert_eq!(a, synthetic_frame(&cfg, 3));
        assert_ne!(a.image, synthetic_frame(&cfg, 4).image);
    }

    #[test]
    fn frame_passes_the_default_gate() {
        let cfg = small_config();
        let f = synthetic_frame(&cfg, 11);
        assert!(f.cloud.len() > 5000, "{} points", f.cloud.len());
        let c = &cfg.calibration;
        let depth = render_depth_image(&f.cloud, &c.intrinsics, &c.extrinsic, cfg.width, cfg.height);
        let report = gate_frame(&f.image, &depth, &GateThresholds::default(), None).unwrap();
        assert!(report.accepted, "{report:?}");
    }

    #[test]
    fn lidar_and_camera_see_the_same_surfaces() {
        // the image colour under a projected point matches the point's intensity
        let cfg = small_config();
        let world = World::random(&cfg, 5);
        let c = &cfg.calibration;
        let img = world.render_image(c, cfg.width, cfg.height).to_gray();
        let cloud = world.scan(&cfg.lidar);
        let (mut agree, mut total) = (0usize, 0usize);
        for (p, &i) in cloud.points().iter().zip(cloud.intensity().unwrap()) {
            if norm3(*p) > 25.0 {
                continue;
            }
            let Some(px) = c.intrinsics.project(c.extrinsic.apply(*p)) else { continue };
            if px.u < 0.0 || px.v < 0.0 || px.u >= cfg.width as f64 || px.v >= cfg.height as f64 {
                continue;
            }
            total += 1;
            let g = img.get(px.u as usize, px.v as usize);
            if (g - i).abs() < 0.15 {
                agree += 1;
            }
        }
        assert!(total > 1000);
        assert!(agree as f64 > 0.7 * total as f64, "{agree}/{total}");
    }
}
