//! KITTI raw drive ingestion: calibration text files and the frame index.
//!
//! Expected layout:
//! `root/<date>/calib_cam_to_cam.txt`, `root/<date>/calib_velo_to_cam.txt`,
//! `root/<date>/<date>_drive_XXXX_sync/image_CC/data/*.png|ppm` and
//! `root/<date>/<date>_drive_XXXX_sync/velodyne_points/data/*.bin`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use calica_core::geometry::{Calibration, CameraIntrinsics, GeometryError, Mat3, Quaternion, RigidTransform};
use serde::{Deserialize, Serialize};

pub use crate::formats::load_image;

/// Largest orthonormality drift the velodyne rotation may have and still be
/// snapped to the nearest rotation.
pub const MAX_ROTATION_DRIFT: f64 = 1e-3;
/// Drift above which the correction is reported.
const REPORTED_DRIFT: f64 = 1e-6;

pub const CAM_CALIB_FILE: &str = "calib_cam_to_cam.txt";
pub const VELO_CALIB_FILE: &str = "calib_velo_to_cam.txt";
/// Optional per-date file with `xi_CC: <value>` lines.
pub const USM_CALIB_FILE: &str = "calib_usm.txt";
pub const DEFAULT_CAMERA: &str = "03";

#[derive(Debug, thiserror::Error)]
pub enum KittiError {
    #[error("missing key `{key}`")]
    MissingKey { key: String },
    #[error("line {line}: non-numeric value `{token}` for `{key}`")]
    BadNumber { key: String, line: usize, token: String },
    #[error("line {line}: `{key}` needs {expected} values, found {found}")]
    WrongCount {
        key: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid rotation: {0}")]
    InvalidRotation(GeometryError),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(GeometryError),
    #[error("drive id `{0}` is not of the form YYYY_MM_DD_drive_NNNN")]
    BadDriveId(String),
    #[error("calibration file {} not found", .0.display())]
    MissingCalib(PathBuf),
    #[error("drive {drive}: no frame has both an image and a scan")]
    NoFrames { drive: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KittiError + '_ {
    move |source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `key: values` lines; a repeated key keeps its last occurrence.
struct CalibText<'a> {
    entries: HashMap<&'a str, (usize, &'a str)>,
}

impl<'a> CalibText<'a> {
    fn parse(text: &'a str) -> Self {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let Some((key, values)) = line.split_once(':') else { continue };
            let key = key.trim();
            if let Some((prev, _)) = entries.insert(key, (i + 1, values)) {
                log::warn!("calibration key `{key}` repeated on lines {prev} and {}; using the last", i + 1);
            }
        }
        CalibText { entries }
    }

    fn numbers(&self, key: &str, expected: usize) -> Result<Vec<f64>, KittiError> {
        let &(line, values) = self.entries.get(key).ok_or_else(|| KittiError::MissingKey { key: key.into() })?;
        let v = values
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| KittiError::BadNumber {
                    key: key.into(),
                    line,
                    token: tok.into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != expected {
            return Err(KittiError::WrongCount {
                key: key.into(),
                line,
                expected,
                found: v.len(),
            });
        }
        Ok(v)
    }
}

/// Intrinsics of camera `camera` (e.g. `"02"`) from `calib_cam_to_cam.txt`:
/// `f` is the mean of `fx` and `fy` of `K_<camera>`, `xi` is 0.
pub fn parse_cam_calib(text: &str, camera: &str) -> Result<CameraIntrinsics, KittiError> {
    let k = CalibText::parse(text).numbers(&format!("K_{camera}"), 9)?;
    CameraIntrinsics::new((k[0] + k[4]) / 2.0, k[2], k[5], 0.0).map_err(KittiError::InvalidIntrinsics)
}

/// `xi_<camera>` from the optional distortion sidecar.
pub fn parse_usm_sidecar(text: &str, camera: &str) -> Result<f64, KittiError> {
    Ok(CalibText::parse(text).numbers(&format!("xi_{camera}"), 1)?[0])
}

/// Lidar-to-camera transform from `calib_velo_to_cam.txt` (`R:` row-major,
/// `T:` metres). Slightly non-orthonormal rotations are snapped to the nearest
/// rotation.
pub fn parse_velo_calib(text: &str) -> Result<RigidTransform, KittiError> {
    let c = CalibText::parse(text);
    let r = c.numbers("R", 9)?;
    let t = c.numbers("T", 3)?;
    let m = Mat3::from_row_major(&r.try_into().expect("nine values"));
    let drift = m.orthonormality_drift();
    if !(drift <= MAX_ROTATION_DRIFT) {
        return Err(KittiError::InvalidRotation(GeometryError::NotARotation { drift, det: m.det() }));
    }
    if drift > REPORTED_DRIFT {
        log::warn!("velodyne rotation drift {drift:e} corrected to the nearest rotation");
    }
    let fixed = m.nearest_rotation().map_err(KittiError::InvalidRotation)?;
    RigidTransform::from_rotation_matrix(&fixed, [t[0], t[1], t[2]]).map_err(KittiError::InvalidRotation)
}

pub fn format_velo_calib(ext: &RigidTransform) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    format!(
        "R: {}\nT: {}\n",
        join(&ext.rotation_matrix().to_row_major()),
        join(&ext.translation_vector())
    )
}

pub fn format_cam_calib(intr: &CameraIntrinsics, camera: &str) -> String {
    let k = [intr.f, 0.0, intr.cx, 0.0, intr.f, intr.cy, 0.0, 0.0, 1.0];
    format!("K_{camera}: {}\n", k.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" "))
}

/// Calibration as stored in index and calibration JSON files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub xi: f64,
    /// `(w, x, y, z)`.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Calibration> for CalibrationRecord {
    fn from(c: &Calibration) -> Self {
        let i = c.intrinsics;
        CalibrationRecord {
            f: i.f,
            cx: i.cx,
            cy: i.cy,
            xi: i.xi,
            q: c.extrinsic.rotation().to_array(),
            t: c.extrinsic.translation_vector(),
        }
    }
}

impl CalibrationRecord {
    pub fn to_calibration(&self) -> Result<Calibration, GeometryError> {
        let q = Quaternion::from_array(self.q);
        if !(q.norm() > 1e-9) {
            return Err(GeometryError::NotARotation { drift: 1.0, det: 0.0 });
        }
        Ok(Calibration {
            intrinsics: CameraIntrinsics::new(self.f, self.cx, self.cy, self.xi)?,
            extrinsic: RigidTransform::new(q, self.t),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub n: u64,
    pub image: PathBuf,
    pub cloud: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveIndex {
    pub drive: String,
    pub theta0: CalibrationRecord,
    pub frames: Vec<FrameRecord>,
}

impl DriveIndex {
    pub fn calibration(&self) -> Result<Calibration, GeometryError> {
        self.theta0.to_calibration()
    }

    pub fn frame(&self, n: u64) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.n == n)
    }

    pub fn save(&self, path: &Path) -> Result<(), KittiError> {
        let json = serde_json::to_string_pretty(self).expect("index serializes");
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<DriveIndex, KittiError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| KittiError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `(date, directory name)` for a drive id, with or without `_sync`.
pub fn drive_dirs(drive: &str) -> Result<(String, String), KittiError> {
    let id = drive.strip_suffix("_sync").unwrap_or(drive);
    let bad = || KittiError::BadDriveId(drive.into());
    let (date, rest) = id.split_at_checked(10).ok_or_else(bad)?;
    let date_ok = date.bytes().enumerate().all(|(i, b)| if i == 4 || i == 7 { b == b'_' } else { b.is_ascii_digit() });
    let num = rest.strip_prefix("_drive_").ok_or_else(bad)?;
    if !date_ok || num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    Ok((date.into(), format!("{id}_sync")))
}

fn numbered_files(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<u64, PathBuf>, KittiError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.iter().any(|x| e.eq_ignore_ascii_case(x)));
        let n = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok());
        if let (true, Some(n)) = (ext_ok, n) {
            out.insert(n, path);
        }
    }
    Ok(out)
}

/// Pairs images of camera `camera` with Velodyne scans by frame number and
/// attaches the date-level calibration. Frame paths are absolute.
pub fn build_drive_index(root: &Path, drive: &str, camera: &str) -> Result<DriveIndex, KittiError> {
    let (date, sync) = drive_dirs(drive)?;
    let root = std::path::absolute(root).map_err(io_err(root))?;
    let date_dir = root.join(&date);
    let read_calib = |name: &str| {
        let p = date_dir.join(name);
        if !p.is_file() {
            return Err(KittiError::MissingCalib(p));
        }
        std::fs::read_to_string(&p).map_err(io_err(&p))
    };
    let mut intrinsics = parse_cam_calib(&read_calib(CAM_CALIB_FILE)?, camera)?;
    let extrinsic = parse_velo_calib(&read_calib(VELO_CALIB_FILE)?)?;
    if date_dir.join(USM_CALIB_FILE).is_file() {
        intrinsics.xi = parse_usm_sidecar(&read_calib(USM_CALIB_FILE)?, camera)?;
        intrinsics.validate().map_err(KittiError::InvalidIntrinsics)?;
    }

    let drive_dir = date_dir.join(&sync);
    let images = numbered_files(&drive_dir.join(format!("image_{camera}")).join("data"), &["png", "ppm"])?;
    let clouds = numbered_files(&drive_dir.join("velodyne_points").join("data"), &["bin"])?;
    let mut frames = Vec::new();
    for (&n, image) in &images {
        match clouds.get(&n) {
            Some(cloud) => frames.push(FrameRecord {
                n,
                image: image.clone(),
                cloud: cloud.clone(),
            }),
            None => log::warn!("frame {n}: image without a scan; skipped"),
        }
    }
    for n in clouds.keys().filter(|n| !images.contains_key(n)) {
        log::warn!("frame {n}: scan without an image; skipped");
    }
    let drive = sync.trim_end_matches("_sync").to_string();
    if frames.is_empty() {
        return Err(KittiError::NoFrames { drive });
    }
    Ok(DriveIndex {
        drive,
        theta0: CalibrationRecord::from(&Calibration { intrinsics, extrinsic }),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const K02: &str = "K_02: 9.597910e+02 0.000000e+00 6.960217e+02 0.000000e+00 9.569251e+02 2.241806e+02 0.000000e+00 0.000000e+00 1.000000e+00";

    #[test]
    fn camera_line() {
        let i = parse_cam_calib(&format!("calib_time: 09-Jan-2012 13:57:47\n{K02}\n"), "02").unwrap();
        assert!((i.f - (959.791 + 956.9251) / 2.0).abs() < 1e-9);
        assert_eq!((i.cx, i.cy, i.xi), (696.0217, 224.1806, 0.0));
    }

    #[test]
    fn empty_text_misses_key() {
        let e = parse_cam_calib("", "02").unwrap_err();
        assert!(e.to_string().contains("missing key"), "{e}");
        assert!(e.to_string().contains("K_02"));
    }

    #[test]
    fn bad_token_names_line() {
        let e = parse_cam_calib("x: 1\nK_02: 1 0 2 0 abc 3 0 0 1\n", "02").unwrap_err();
        assert!(matches!(e, KittiError::BadNumber { line: 2, ref token, .. } if token == "abc"), "{e}");
    }

    #[test]
    fn duplicate_key_last_wins() {
        let text = "K_02: 1 0 2 0 1 3 0 0 1\nK_02: 5 0 2 0 7 3 0 0 1\n";
        assert_eq!(parse_cam_calib(text, "02").unwrap().f, 6.0);
    }

    #[test]
    fn identity_velodyne_calibration() {
        let ext = parse_velo_calib("R: 1 0 0 0 1 0 0 0 1\nT: 0 0 0\n").unwrap();
        assert_eq!(ext, RigidTransform::IDENTITY);
    }

    #[test]
    fn slightly_skewed_rotation_is_corrected() {
        let ext = parse_velo_calib("R: 1.0001 0 0 0 1 0 0 0 1\nT: 1 2 3\n").unwrap();
        assert!(ext.rotation_matrix().orthonormality_drift() < 1e-12);
        assert!(ext.rotation().angle() < 1e-12);
    }

    #[test]
    fn zero_rotation_is_rejected() {
        let e = parse_velo_calib("R: 0 0 0 0 0 0 0 0 0\nT: 0 0 0\n").unwrap_err();
        assert!(matches!(e, KittiError::InvalidRotation(_)));
    }

    #[test]
    fn drive_ids() {
        assert_eq!(
            drive_dirs("2011_09_26_drive_0001").unwrap(),
            ("2011_09_26".into(), "2011_09_26_drive_0001_sync".into())
        );
        assert!(drive_dirs("2011_09_26_drive_0001_sync").is_ok());
        assert!(drive_dirs("drive_0001").is_err());
        assert!(drive_dirs("2011_09_26_drive_").is_err());
    }
}
