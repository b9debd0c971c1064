//! Gating a drive index, generating the label manifest, loading training
//! samples, and writing synthetic drives in the KITTI layout.

use std::fs;
use std::path::{Path, PathBuf};

use calica_core::calicanet::NetInput;
use calica_core::cloud::render_depth_image;
use calica_core::gate::{gate_frame, GateReport, GateThresholds};
use calica_core::geometry::{Calibration, Quaternion};
use calica_core::labelgen::{plan_labels, synthesize_distorted_image, Deviation, DeviationRanges, LabelError, Split};
use calica_core::pipeline::{input_from_distorted, Sample};
use calica_core::synth::{synthetic_frame, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::formats::{load_image, load_velodyne, save_image, save_velodyne, FormatError};
use crate::kitti::{
    drive_dirs, format_cam_calib, format_velo_calib, CalibrationRecord, DriveIndex, FrameRecord, KittiError,
    CAM_CALIB_FILE, VELO_CALIB_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("invalid calibration in index: {0}")]
    Calibration(#[from] calica_core::geometry::GeometryError),
    #[error("frame {n}: {source}")]
    Gate {
        n: u64,
        #[source]
        source: calica_core::gate::GateError,
    },
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest references frame {0}, which is not in the index")]
    UnknownFrame(u64),
    #[error("{0}")]
    Input(#[from] calica_core::calicanet::CalicaError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGate {
    pub n: u64,
    #[serde(flatten)]
    pub report: GateReport,
}

/// Gates every frame of `index` with its image and the scan projected with
/// the index calibration. Returns the index restricted to accepted frames.
pub fn gate_index(index: &DriveIndex, thresholds: &GateThresholds) -> Result<(DriveIndex, Vec<FrameGate>), DatasetError> {
    let calib = index.calibration()?;
    let mut kept = Vec::new();
    let mut reports = Vec::new();
    for f in &index.frames {
        let image = load_image(&f.image)?;
        let cloud = load_velodyne(&f.cloud)?;
        let depth = render_depth_image(&cloud, &calib.intrinsics, &calib.extrinsic, image.width(), image.height());
        let report = gate_frame(&image, &depth, thresholds, None).map_err(|source| DatasetError::Gate { n: f.n, source })?;
        if report.accepted {
            kept.push(f.clone());
        } else {
            log::info!("frame {} rejected: {}", f.n, report.reasons_string());
        }
        reports.push(FrameGate { n: f.n, report });
    }
    Ok((
        DriveIndex {
            frames: kept,
            ..index.clone()
        },
        reports,
    ))
}

/// One line of the label manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub ordinal: u64,
    /// Frame number in the drive index.
    pub frame: u64,
    pub split: Split,
    pub df: f64,
    pub dxi: f64,
    pub dq: [f64; 4],
    pub dt: [f64; 3],
    /// Distorted image, relative to the manifest directory.
    pub image: String,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn deviation(&self) -> Deviation {
        Deviation {
            df: self.df,
            dxi: self.dxi,
            dq: Quaternion::from_array(self.dq).normalized(),
            dt: self.dt,
        }
    }
}

pub fn manifest_text(records: &[ManifestRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| DatasetError::Manifest { line: i + 1, source }))
        .collect()
}

/// Writes `count` labels over the frames of a gated `index`, cycling frames
/// in order: one distorted image per label under `out/images/` and the
/// manifest `out/manifest.jsonl`. Misaligned scans are not written; the
/// manifest's `dq`, `dt` regenerate them exactly.
pub fn generate_dataset(
    index: &DriveIndex,
    count: usize,
    ranges: &DeviationRanges,
    master_seed: u64,
    out: &Path,
) -> Result<Vec<ManifestRecord>, DatasetError> {
    let theta0 = index.calibration()?;
    let plans = plan_labels(index.frames.len(), count, ranges, Some(theta0.intrinsics.xi), master_seed)?;
    fs::create_dir_all(out.join(IMAGE_DIR)).map_err(io_err(out))?;
    let mut records = Vec::with_capacity(plans.len());
    for p in &plans {
        let frame = &index.frames[p.frame_position];
        let source = load_image(&frame.image)?;
        let deviated = p.deviation.deviated_intrinsics(&theta0.intrinsics);
        let distorted = synthesize_distorted_image(&source, &theta0.intrinsics, &deviated);
        let rel = format!("{IMAGE_DIR}/{:06}.png", p.ordinal);
        save_image(&out.join(&rel), &distorted)?;
        let d = p.deviation;
        records.push(ManifestRecord {
            ordinal: p.ordinal,
            frame: frame.n,
            split: p.split,
            df: d.df,
            dxi: d.dxi,
            dq: d.dq.to_array(),
            dt: d.dt,
            image: rel,
            seed: p.seed,
        });
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest_text(&records)).map_err(io_err(&path))?;
    Ok(records)
}

/// Network inputs for manifest records: the stored distorted image and the
/// frame's scan rendered through the label's extrinsic, both at
/// `width x height`.
pub fn load_samples(
    index: &DriveIndex,
    manifest_dir: &Path,
    records: &[ManifestRecord],
    width: usize,
    height: usize,
    max_range: f64,
) -> Result<Vec<Sample>, DatasetError> {
    let theta0 = index.calibration()?;
    let mut cache: Option<(u64, calica_core::cloud::PointCloud)> = None;
    records
        .iter()
        .map(|r| {
            let frame = index.frame(r.frame).ok_or(DatasetError::UnknownFrame(r.frame))?;
            if cache.as_ref().is_none_or(|c| c.0 != r.frame) {
                cache = Some((r.frame, load_velodyne(&frame.cloud)?));
            }
            let cloud = &cache.as_ref().expect("cached").1;
            let image = load_image(&manifest_dir.join(&r.image))?;
            let input: NetInput<f32> =
                input_from_distorted(&image, cloud, &theta0, &r.deviation(), width, height, max_range)?;
            Ok(Sample {
                ordinal: r.ordinal,
                split: r.split,
                label: r.deviation(),
                input,
            })
        })
        .collect()
}

/// Renders `frames` synthetic street frames into `root` in the KITTI raw
/// layout (PNG images, Velodyne scans, date-level calibration files) and
/// returns the drive directory.
pub fn write_synthetic_drive(
    root: &Path,
    drive: &str,
    camera: &str,
    frames: usize,
    seed: u64,
    world: &WorldConfig,
) -> Result<PathBuf, DatasetError> {
    let (date, sync) = drive_dirs(drive)?;
    let date_dir = root.join(date);
    let drive_dir = date_dir.join(sync);
    let image_dir = drive_dir.join(format!("image_{camera}")).join("data");
    let cloud_dir = drive_dir.join("velodyne_points").join("data");
    for d in [&image_dir, &cloud_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let calib: &Calibration = &world.calibration;
    let write = |name: &str, text: String| {
        let p = date_dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write(CAM_CALIB_FILE, format_cam_calib(&calib.intrinsics, camera))?;
    write(VELO_CALIB_FILE, format_velo_calib(&calib.extrinsic))?;
    for n in 0..frames as u64 {
        let f = synthetic_frame(world, calica_core::labelgen::label_seed(seed, n));
        save_image(&image_dir.join(format!("{n:010}.png")), &f.image)?;
        save_velodyne(&cloud_dir.join(format!("{n:010}.bin")), &f.cloud)?;
    }
    Ok(drive_dir)
}

/// In-memory index over explicit files, for callers that skip the drive
/// layout.
pub fn index_from_frames(drive: &str, calib: &Calibration, frames: Vec<FrameRecord>) -> DriveIndex {
    DriveIndex {
        drive: drive.into(),
        theta0: CalibrationRecord::from(calib),
        frames,
    }
}

/// Labelled network inputs built in memory from `n_frames` synthetic frames,
/// cycling frames exactly as [`generate_dataset`] does.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_samples(
    world: &WorldConfig,
    n_frames: usize,
    count: usize,
    ranges: &DeviationRanges,
    seed: u64,
    width: usize,
    height: usize,
    max_range: f64,
) -> Result<Vec<Sample>, DatasetError> {
    let theta0 = world.calibration;
    let frames: Vec<_> = (0..n_frames as u64)
        .map(|n| synthetic_frame(world, calica_core::labelgen::label_seed(seed, n)))
        .collect();
    let plans = plan_labels(n_frames, count, ranges, Some(theta0.intrinsics.xi), seed)?;
    plans
        .iter()
        .map(|p| {
            let f = &frames[p.frame_position];
            let input = calica_core::pipeline::prepare_input(&f.image, &f.cloud, &theta0, &p.deviation, width, height, max_range)?;
            Ok(Sample {
                ordinal: p.ordinal,
                split: p.split,
                label: p.deviation,
                input,
            })
        })
        .collect()
}
