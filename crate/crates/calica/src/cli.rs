//! The `calica` command line.
//!
//! Precedence for every setting: explicit flag, then the `--config` JSON
//! file, then the built-in default. Exit status is 0 on success, 1 for user
//! errors (bad flags, unreadable or malformed inputs) and 2 for internal
//! failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use calica_core::calicanet::{apply_prediction, loss_grad_check, CalicaNet};
use calica_core::gate::GateThresholds;
use calica_core::labelgen::{DeviationRanges, Split};
use calica_core::nn::gradcheck::{op_suite, GradCheckReport};
use calica_core::pipeline::{
    ablate, evaluate, make_synthetic_scene, train, BoardSpec, Experiment, PipelineError, TrainConfig,
};
use calica_core::synth::WorldConfig;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::dataset::{self, DatasetError, ManifestRecord};
use crate::formats::{self, FormatError};
use crate::kitti::{self, CalibrationRecord, DriveIndex, KittiError};
use crate::overlay::render_overlay;
use crate::report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

const DEFAULT_LABEL_COUNT: usize = 1000;
const DEFAULT_SYNTH_FRAMES: usize = 4;
const DEFAULT_DRIVE: &str = "2011_09_26_drive_0001";
const GRADCHECK_SEEDS: u64 = 10;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn user(e: impl std::fmt::Display) -> Self {
        CliError::User(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<KittiError> for CliError {
    fn from(e: KittiError) -> Self {
        CliError::user(e)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::user(e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::user(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFiniteLoss { .. } | PipelineError::Nn(_) => CliError::Internal(e.to_string()),
            PipelineError::Model(calica_core::calicanet::CalicaError::Nn(_)) => CliError::Internal(e.to_string()),
            _ => CliError::user(e),
        }
    }
}

impl From<calica_core::calicanet::CalicaError> for CliError {
    fn from(e: calica_core::calicanet::CalicaError) -> Self {
        PipelineError::from(e).into()
    }
}

#[derive(Parser, Debug)]
#[command(name = "calica", version, about = "Lidar-camera self-calibration with a Siamese correlation network")]
struct Cli {
    /// JSON configuration file; explicit flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More diagnostics on standard error (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Index a KITTI raw drive: pair images with scans, attach the calibration
    Ingest {
        #[arg(long)]
        kitti_root: PathBuf,
        #[arg(long)]
        drive: String,
        /// Camera number, e.g. 02 (left colour) or 03 (right colour)
        #[arg(long)]
        camera: Option<String>,
        /// Index JSON path (standard output when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep only the frames that pass the keypoint and overlap gates
    Gate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        min_keypoints: Option<usize>,
        #[arg(long)]
        min_iou: Option<f64>,
        /// Gated index JSON path (standard output when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate miscalibration labels, distorted images and the manifest
    Genlabels {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Deviation bounds `df,dxi,drot,dt` (pixels, -, degrees, metres)
        #[arg(long, value_parser = parse_ranges)]
        ranges: Option<DeviationRanges>,
        /// Output directory for images/ and manifest.jsonl
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on a manifest
    Train {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_experiment)]
        exp: Option<Experiment>,
        /// Best-validation checkpoint to write
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss history CSV (standard output when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation labels of a manifest
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the synthetic checkerboard scene
        #[arg(long)]
        seed: Option<u64>,
        /// Report JSON path (standard output when omitted)
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-frame overlay images
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Train experiments I-IV and tabulate terminal validation losses
    Ablate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Table CSV path (standard output when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a scan over an image through a calibration
    Project {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        /// Calibration JSON {f, cx, cy, xi, q, t}
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every network operation and the full loss
    Gradcheck {
        /// Check this seed only (default: seeds 0-9)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic drive in the KITTI raw layout
    Synth {
        /// Dataset root; the drive goes under <out>/<date>/
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drive: Option<String>,
        #[arg(long)]
        camera: Option<String>,
        /// Number of frames
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_ranges(s: &str) -> Result<DeviationRanges, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<_, _>>()?;
    let [df, dxi, drot, dt] = v[..] else {
        return Err(format!("expected 4 comma-separated values, got {}", v.len()));
    };
    DeviationRanges::new(df, dxi, drot, dt).map_err(|e| e.to_string())
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    Experiment::parse(s).ok_or_else(|| format!("`{s}` is not one of I, II, III, IV"))
}

/// Settings of the synthetic checkerboard scene used by `eval`.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub board: BoardSpec,
    pub poses: usize,
    /// RMS pixel noise of the observed corners.
    pub sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            board: BoardSpec::default(),
            poses: 10,
            sigma: 0.0,
        }
    }
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub camera: Option<String>,
    pub min_keypoints: Option<usize>,
    pub min_iou: Option<f64>,
    pub count: Option<usize>,
    pub ranges: Option<DeviationRanges>,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub world: Option<WorldConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
    }
}

/// Writes `text` to `path`, or to standard output when `path` is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::User(format!("{}: {e}", dir.display())))?;
            }
            fs::write(p, text).map_err(|e| CliError::User(format!("{}: {e}", p.display())))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("standard output: {e}"))),
    }
}

fn index_json(index: &DriveIndex) -> String {
    serde_json::to_string_pretty(index).expect("index serializes") + "\n"
}

fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Manifest records split into training and validation.
fn load_split_samples(
    index: &DriveIndex,
    manifest: &Path,
    cfg: &TrainConfig,
) -> Result<(Vec<calica_core::pipeline::Sample>, Vec<calica_core::pipeline::Sample>), CliError> {
    let records: Vec<ManifestRecord> = dataset::read_manifest(manifest)?;
    if records.is_empty() {
        return Err(CliError::User(format!("{}: manifest is empty", manifest.display())));
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let samples = dataset::load_samples(index, dir, &records, cfg.input_width, cfg.input_height, cfg.model.max_range)?;
    Ok(samples.into_iter().partition(|s| s.split == Split::Train))
}

fn print_gradcheck(name: &str, seed: u64, r: &GradCheckReport) {
    println!(
        "{name:<20} seed {seed:>2}  max rel error {:.3e}  checked {:>4}  kinks skipped {}  {}",
        r.max_rel_error,
        r.checked,
        r.skipped_kinks,
        if r.passed() { "ok" } else { "FAIL" }
    );
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = |flag: Option<u64>| flag.or(file.seed).unwrap_or(0);
    let camera = |flag: Option<String>| flag.or(file.camera.clone()).unwrap_or_else(|| kitti::DEFAULT_CAMERA.into());

    match cli.command {
        Command::Ingest {
            kitti_root,
            drive,
            camera: cam,
            out,
        } => {
            let index = kitti::build_drive_index(&kitti_root, &drive, &camera(cam))?;
            log::info!("indexed {} frames of {}", index.frames.len(), index.drive);
            emit(out.as_deref(), &index_json(&index))
        }
        Command::Gate {
            index,
            min_keypoints,
            min_iou,
            out,
        } => {
            let defaults = GateThresholds::default();
            let thresholds = GateThresholds {
                min_keypoints: min_keypoints.or(file.min_keypoints).unwrap_or(defaults.min_keypoints),
                min_iou: min_iou.or(file.min_iou).unwrap_or(defaults.min_iou),
            };
            let idx = DriveIndex::load(&index)?;
            let (gated, reports) = dataset::gate_index(&idx, &thresholds)?;
            for r in &reports {
                eprintln!("{}", serde_json::to_string(r).expect("gate report serializes"));
            }
            log::info!("{} of {} frames accepted", gated.frames.len(), idx.frames.len());
            if gated.frames.is_empty() {
                return Err(CliError::User("no frame passed the gate".into()));
            }
            emit(out.as_deref(), &index_json(&gated))
        }
        Command::Genlabels {
            index,
            count,
            seed: s,
            ranges,
            out,
        } => {
            let idx = DriveIndex::load(&index)?;
            let ranges = ranges.or(file.ranges).unwrap_or_default();
            let count = count.or(file.count).unwrap_or(DEFAULT_LABEL_COUNT);
            let records = dataset::generate_dataset(&idx, count, &ranges, seed(s), &out)?;
            log::info!("wrote {} labels to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train {
            index,
            manifest,
            seed: s,
            exp,
            checkpoint,
            out,
        } => {
            let mut cfg = file.train.clone();
            cfg.seed = s.or(file.seed).unwrap_or(cfg.seed);
            cfg.experiment = exp.or(cfg.experiment);
            cfg.validate()?;
            let idx = DriveIndex::load(&index)?;
            let (tr, va) = load_split_samples(&idx, &manifest, &cfg)?;
            log::info!("training on {} labels, validating on {}", tr.len(), va.len());
            let outcome = train(&tr, &va, &cfg)?;
            log::info!("best epoch {}", outcome.best_epoch);
            formats::save_checkpoint(&checkpoint, &outcome.model)?;
            emit(Some(&config_sidecar(&checkpoint)), &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"))?;
            emit(out.as_deref(), &report::loss_history_csv(&outcome.history))
        }
        Command::Eval {
            index,
            manifest,
            checkpoint,
            seed: s,
            report: report_path,
            overlays,
        } => {
            let sidecar = config_sidecar(&checkpoint);
            let cfg: TrainConfig = if sidecar.is_file() {
                let text = fs::read_to_string(&sidecar).map_err(|e| CliError::User(format!("{}: {e}", sidecar.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", sidecar.display())))?
            } else {
                file.train.clone()
            };
            let mut model = CalicaNet::<f32>::new(cfg.model_config(), cfg.seed)?;
            formats::load_checkpoint(&checkpoint, &mut model)?;
            let idx = DriveIndex::load(&index)?;
            let theta0 = idx.calibration().map_err(CliError::user)?;
            let records = dataset::read_manifest(&manifest)?;
            let mut chosen: Vec<ManifestRecord> = records.iter().filter(|r| r.split == Split::Validation).cloned().collect();
            if chosen.is_empty() {
                chosen = records;
            }
            let dir = manifest.parent().unwrap_or(Path::new("."));
            let samples = dataset::load_samples(&idx, dir, &chosen, cfg.input_width, cfg.input_height, cfg.model.max_range)?;
            let first = formats::load_image(&dir.join(&chosen.first().ok_or_else(|| CliError::User("manifest is empty".into()))?.image))?;
            let sc = &file.scene;
            let scene = make_synthetic_scene(&theta0.intrinsics, sc.board, sc.poses, sc.sigma, first.width(), first.height(), seed(s))?;
            let report = evaluate(&model, &samples, &theta0, &scene)?;
            if let Some(dir_out) = overlays {
                fs::create_dir_all(&dir_out).map_err(|e| CliError::User(format!("{}: {e}", dir_out.display())))?;
                for (rec, fr) in chosen.iter().zip(&report.frames) {
                    let image = formats::load_image(&dir.join(&rec.image))?;
                    let frame = idx.frame(rec.frame).ok_or_else(|| CliError::User(format!("frame {} not in index", rec.frame)))?;
                    let cloud = formats::load_velodyne(&frame.cloud)?;
                    let est = apply_prediction(&theta0, &fr.predicted);
                    let img = render_overlay(&image, &cloud, &est.intrinsics, &est.extrinsic, cfg.model.max_range);
                    formats::save_image(&dir_out.join(format!("{:06}.png", rec.ordinal)), &img)?;
                }
            }
            emit(report_path.as_deref(), &report::eval_json(&report))
        }
        Command::Ablate {
            index,
            manifest,
            seed: s,
            out,
        } => {
            let mut cfg = file.train.clone();
            cfg.seed = s.or(file.seed).unwrap_or(cfg.seed);
            cfg.validate()?;
            let idx = DriveIndex::load(&index)?;
            let (tr, va) = load_split_samples(&idx, &manifest, &cfg)?;
            let rows = ablate(&tr, &va, &cfg)?;
            emit(out.as_deref(), &report::ablation_csv(&rows))
        }
        Command::Project { image, cloud, calib, out } => {
            let text = fs::read_to_string(&calib).map_err(|e| CliError::User(format!("{}: {e}", calib.display())))?;
            let rec: CalibrationRecord =
                serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", calib.display())))?;
            let c = rec.to_calibration().map_err(CliError::user)?;
            let img = formats::load_image(&image)?;
            let pc = formats::load_velodyne(&cloud)?;
            let max_range = file.train.model.max_range;
            formats::save_image(&out, &render_overlay(&img, &pc, &c.intrinsics, &c.extrinsic, max_range))?;
            Ok(())
        }
        Command::Gradcheck { seed: s } => {
            let seeds: Vec<u64> = match s.or(file.seed) {
                Some(s) => vec![s],
                None => (0..GRADCHECK_SEEDS).collect(),
            };
            let mut worst = GradCheckReport::default();
            let mut failed = 0;
            for &sd in &seeds {
                let mut rows = op_suite(sd).map_err(|e| CliError::Internal(e.to_string()))?;
                rows.push(("calicanet_loss", loss_grad_check(sd % 2 == 0, sd)?));
                for (name, r) in &rows {
                    print_gradcheck(name, sd, r);
                    worst.merge(r);
                    failed += usize::from(!r.passed());
                }
            }
            println!("overall max rel error {:.3e}", worst.max_rel_error);
            if failed > 0 {
                return Err(CliError::Internal(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
        Command::Synth {
            out,
            drive,
            camera: cam,
            count,
            seed: s,
        } => {
            let world = file.world.clone().unwrap_or_default();
            let drive = drive.unwrap_or_else(|| DEFAULT_DRIVE.into());
            let frames = count.or(file.count).unwrap_or(DEFAULT_SYNTH_FRAMES);
            let dir = dataset::write_synthetic_drive(&out, &drive, &camera(cam), frames, seed(s), &world)?;
            log::info!("wrote {frames} frames to {}", dir.display());
            Ok(())
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
