//! Miscalibration labels: sampled deviations from the nominal calibration,
//! the matching distorted images, and the deterministic per-label plan
//! (frame, seed, split) used when generating a dataset.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Calibration, CameraIntrinsics, Pixel, Quaternion, RigidTransform, Vec3, XI_MAX};
use crate::image::RgbImage;

/// Every fifth label (ordinal % 5 == 4) is held out for validation.
pub const VALIDATION_PERIOD: u64 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error("deviation range `{0}` must be finite and non-negative")]
    InvalidRange(&'static str),
    #[error("cannot generate labels from an empty frame index")]
    EmptyIndex,
}

/// Symmetric bounds on each calibration deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRanges {
    /// Focal length, pixels.
    pub df_max: f64,
    /// USM distortion coefficient.
    pub dxi_max: f64,
    /// Per-axis Euler angle, degrees.
    pub drot_max: f64,
    /// Per-axis translation, metres.
    pub dt_max: f64,
}

impl DeviationRanges {
    pub const ZERO: DeviationRanges = DeviationRanges {
        df_max: 0.0,
        dxi_max: 0.0,
        drot_max: 0.0,
        dt_max: 0.0,
    };

    pub fn new(df_max: f64, dxi_max: f64, drot_max: f64, dt_max: f64) -> Result<Self, LabelError> {
        let r = DeviationRanges {
            df_max,
            dxi_max,
            drot_max,
            dt_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        for (name, v) in [
            ("df", self.df_max),
            ("dxi", self.dxi_max),
            ("drot", self.drot_max),
            ("dt", self.dt_max),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabelError::InvalidRange(name));
            }
        }
        Ok(())
    }

    /// Whether `d` lies inside these bounds (Euler angles of `dq` checked per
    /// axis, with `eps` slack for round-off).
    pub fn contains(&self, d: &Deviation, eps: f64) -> bool {
        let e = d.dq.to_euler_xyz_deg();
        d.df.abs() <= self.df_max + eps
            && d.dxi.abs() <= self.dxi_max + eps
            && e.iter().all(|a| a.abs() <= self.drot_max + eps)
            && d.dt.iter().all(|t| t.abs() <= self.dt_max + eps)
    }
}

impl Default for DeviationRanges {
    /// `f +/- 100 px, xi +/- 0.48, R +/- 2.0 deg, t +/- 0.2 m`.
    fn default() -> Self {
        DeviationRanges {
            df_max: 100.0,
            dxi_max: 0.48,
            drot_max: 2.0,
            dt_max: 0.2,
        }
    }
}

/// A calibration deviation relative to the nominal calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub df: f64,
    pub dxi: f64,
    pub dq: Quaternion,
    pub dt: Vec3,
}

impl Deviation {
    pub const IDENTITY: Deviation = Deviation {
        df: 0.0,
        dxi: 0.0,
        dq: Quaternion::IDENTITY,
        dt: [0.0; 3],
    };

    pub fn extrinsic(&self) -> RigidTransform {
        RigidTransform::new(self.dq, self.dt)
    }

    /// Intrinsics `f0 + df`, `xi0 + dxi`, principal point unchanged. No clamping.
    pub fn deviated_intrinsics(&self, nominal: &CameraIntrinsics) -> CameraIntrinsics {
        CameraIntrinsics {
            f: nominal.f + self.df,
            cx: nominal.cx,
            cy: nominal.cy,
            xi: nominal.xi + self.dxi,
        }
    }

    /// Extrinsic of the miscalibrated sensor, `compose(deviation, theta0)`.
    pub fn deviated_extrinsic(&self, nominal: &RigidTransform) -> RigidTransform {
        self.extrinsic().compose(nominal)
    }

    /// Deviation taking `theta0` to `theta`.
    pub fn between(theta0: &Calibration, theta: &Calibration) -> Deviation {
        let rel = theta.extrinsic.compose(&theta0.extrinsic.inverse());
        Deviation {
            df: theta.intrinsics.f - theta0.intrinsics.f,
            dxi: theta.intrinsics.xi - theta0.intrinsics.xi,
            dq: rel.rotation(),
            dt: rel.translation_vector(),
        }
    }
}

/// Draws one deviation: uniform `df`, `dxi`, three independent uniform
/// Euler angles converted to `dq`, uniform per-axis `dt`.
pub fn sample_deviation<R: Rng + ?Sized>(ranges: &DeviationRanges, rng: &mut R) -> Deviation {
    sample_deviation_within(ranges, None, rng)
}

/// As [`sample_deviation`], restricting `dxi` so that `nominal_xi + dxi`
/// stays inside the valid USM range `[0, 1.5]`.
pub fn sample_deviation_within<R: Rng + ?Sized>(
    ranges: &DeviationRanges,
    nominal_xi: Option<f64>,
    rng: &mut R,
) -> Deviation {
    let (xi_lo, xi_hi) = match nominal_xi {
        Some(xi0) => ((-ranges.dxi_max).max(-xi0), ranges.dxi_max.min(XI_MAX - xi0)),
        None => (-ranges.dxi_max, ranges.dxi_max),
    };
    let df = symmetric(rng, ranges.df_max);
    let dxi = uniform(rng, xi_lo, xi_hi);
    let euler = [
        symmetric(rng, ranges.drot_max),
        symmetric(rng, ranges.drot_max),
        symmetric(rng, ranges.drot_max),
    ];
    let dt = [
        symmetric(rng, ranges.dt_max),
        symmetric(rng, ranges.dt_max),
        symmetric(rng, ranges.dt_max),
    ];
    Deviation {
        df,
        dxi,
        dq: Quaternion::from_euler_xyz_deg(euler),
        dt,
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    uniform(rng, -max, max)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        // zero-width range: keep the stream position identical
        let _: f64 = rng.random();
        return lo.max(hi.min(0.0)).min(hi);
    }
    lo + (hi - lo) * rng.random::<f64>()
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-label seed derived from the master seed and the label ordinal.
pub fn label_seed(master_seed: u64, ordinal: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(ordinal))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn for_ordinal(ordinal: u64) -> Split {
        if ordinal % VALIDATION_PERIOD == VALIDATION_PERIOD - 1 {
            Split::Validation
        } else {
            Split::Train
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Everything about a label except its image file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelPlan {
    pub ordinal: u64,
    /// Position of the source frame in the (gated) frame list.
    pub frame_position: usize,
    pub seed: u64,
    pub split: Split,
    pub deviation: Deviation,
}

/// Plans `count` labels over `n_frames` frames, cycling frames in order.
pub fn plan_labels(
    n_frames: usize,
    count: usize,
    ranges: &DeviationRanges,
    nominal_xi: Option<f64>,
    master_seed: u64,
) -> Result<Vec<LabelPlan>, LabelError> {
    ranges.validate()?;
    if n_frames == 0 {
        return Err(LabelError::EmptyIndex);
    }
    Ok((0..count as u64)
        .map(|ordinal| {
            let seed = label_seed(master_seed, ordinal);
            let mut rng = rng_from_seed(seed);
            LabelPlan {
                ordinal,
                frame_position: (ordinal % n_frames as u64) as usize,
                seed,
                split: Split::for_ordinal(ordinal),
                deviation: sample_deviation_within(ranges, nominal_xi, &mut rng),
            }
        })
        .collect())
}

/// Re-images `image` (taken with `nominal`) as seen through `deviated`, by
/// inverse warping: each output pixel centre is lifted to a ray with the
/// deviated model, projected with the nominal one, and bilinearly sampled.
/// Samples falling outside the source (or the model domain) are black.
pub fn synthesize_distorted_image(
    image: &RgbImage,
    nominal: &CameraIntrinsics,
    deviated: &CameraIntrinsics,
) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
            let Ok(ray) = deviated.unproject(px) else { continue };
            let Some(src) = nominal.project(ray) else { continue };
            if let Some(c) = image.sample_bilinear(src.u, src.v) {
                out.set(x, y, c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            [
                0.5 + 0.4 * (6.0 * u).sin() * (4.0 * v).cos(),
                0.3 + 0.6 * u * v,
                0.5 + 0.3 * (5.0 * (u + v)).cos(),
            ]
        })
    }

    #[test]
    fn zero_ranges_give_identity() {
        let mut rng = rng_from_seed(7);
        let d = sample_deviation(&DeviationRanges::ZERO, &mut rng);
        assert_eq!(d, Deviation::IDENTITY);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let r = DeviationRanges::default();
        let a = sample_deviation(&r, &mut rng_from_seed(42));
        let b = sample_deviation(&r, &mut rng_from_seed(42));
        assert_eq!(a, b);
        let c = sample_deviation(&r, &mut rng_from_seed(43));
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_focal_deviation_statistics() {
        let r = DeviationRanges::default();
        let mut rng = rng_from_seed(1234);
        let n = 10_000;
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for _ in 0..n {
            let d = sample_deviation(&r, &mut rng);
            assert!(r.contains(&d, 1e-9), "{d:?}");
            sum += d.df.abs();
            max = max.max(d.df.abs());
        }
        let mean = sum / n as f64;
        assert!(max <= 100.0);
        assert!((mean - 50.0).abs() <= 0.05 * 50.0, "mean |df| = {mean}");
    }

    #[test]
    fn xi_window_respects_model_range() {
        let r = DeviationRanges::default();
        let mut rng = rng_from_seed(3);
        for _ in 0..2000 {
            let d = sample_deviation_within(&r, Some(0.0), &mut rng);
            assert!((0.0..=0.48).contains(&d.dxi));
            let d = sample_deviation_within(&r, Some(1.3), &mut rng);
            assert!((-0.48..=0.2 + 1e-12).contains(&d.dxi));
        }
    }

    #[test]
    fn frames_cycle_and_split_is_eighty_twenty() {
        let plan = plan_labels(2, 5, &DeviationRanges::default(), None, 9).unwrap();
        let frames: Vec<usize> = plan.iter().map(|p| p.frame_position).collect();
        assert_eq!(frames, std::vec![0, 1, 0, 1, 0]);

        let plan = plan_labels(7, 100, &DeviationRanges::default(), None, 9).unwrap();
        let val = plan.iter().filter(|p| p.split == Split::Validation).count();
        assert_eq!(val, 20);
        assert_eq!(plan.len() - val, 80);

        assert_eq!(plan_labels(0, 5, &DeviationRanges::default(), None, 9), Err(LabelError::EmptyIndex));
    }

    #[test]
    fn plan_is_deterministic_and_seeds_differ() {
        let a = plan_labels(3, 50, &DeviationRanges::default(), Some(0.0), 77).unwrap();
        let b = plan_labels(3, 50, &DeviationRanges::default(), Some(0.0), 77).unwrap();
        assert_eq!(a, b);
        let mut seeds: Vec<u64> = a.iter().map(|p| p.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 50);
    }

    #[test]
    fn identity_warp_is_lossless() {
        let img = smooth_image(60, 40);
        let k = CameraIntrinsics::new(50.0, 30.0, 20.0, 0.2).unwrap();
        let out = synthesize_distorted_image(&img, &k, &k);
        let worst = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 255.0, "worst {worst}");
    }

    #[test]
    fn focal_increase_magnifies_about_principal_point() {
        let img = smooth_image(61, 41);
        let nominal = CameraIntrinsics::new(50.0, 30.5, 20.5, 0.0).unwrap();
        let deviated = CameraIntrinsics { f: 80.0, ..nominal };
        let out = synthesize_distorted_image(&img, &nominal, &deviated);
        let (a, b) = (img.get(30, 20), out.get(30, 20));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1.0 / 255.0);
        }
        // magnification pulls the corner sample towards the centre
        let corner_src = nominal.project(deviated.unproject(Pixel::new(0.5, 0.5)).unwrap()).unwrap();
        assert!(corner_src.u > 0.5 && corner_src.v > 0.5);
    }

    #[test]
    fn xi_warp_round_trip_recovers_interior() {
        let img = smooth_image(120, 80);
        let nominal = CameraIntrinsics::new(70.0, 60.0, 40.0, 0.0).unwrap();
        let deviated = CameraIntrinsics { xi: 0.3, ..nominal };
        let there = synthesize_distorted_image(&img, &nominal, &deviated);
        let back = synthesize_distorted_image(&there, &deviated, &nominal);
        let (mut sum, mut n) = (0.0f64, 0usize);
        for y in 20..60 {
            for x in 30..90 {
                let (a, b) = (img.get(x, y), back.get(x, y));
                for k in 0..3 {
                    sum += (a[k] - b[k]).abs() as f64;
                    n += 1;
                }
            }
        }
        let mae = sum / n as f64;
        assert!(mae <= 2.0 / 255.0, "mae {mae}");
    }

    #[test]
    fn between_inverts_application() {
        let theta0 = Calibration {
            intrinsics: CameraIntrinsics::new(700.0, 600.0, 180.0, 0.0).unwrap(),
            extrinsic: RigidTransform::new(Quaternion::from_euler_xyz_deg([-90.0, 0.0, -90.0]), [0.05, -0.07, -0.3]),
        };
        let d = sample_deviation(&DeviationRanges::default(), &mut rng_from_seed(5));
        let theta = Calibration {
            intrinsics: d.deviated_intrinsics(&theta0.intrinsics),
            extrinsic: d.deviated_extrinsic(&theta0.extrinsic),
        };
        let back = Deviation::between(&theta0, &theta);
        assert!((back.df - d.df).abs() < 1e-9 && (back.dxi - d.dxi).abs() < 1e-9);
        assert!(crate::geometry::quaternion_distance(back.dq, d.dq) < 1e-12);
        for k in 0..3 {
            assert!((back.dt[k] - d.dt[k]).abs() < 1e-9);
        }
    }
}
