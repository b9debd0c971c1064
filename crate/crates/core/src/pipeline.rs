//! Training, evaluation and ablation on prepared samples, plus the
//! checkerboard reprojection metric and the extrinsic error metric.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calicanet::{apply_prediction, CalicaConfig, CalicaError, CalicaNet, LossValues, NetInput, Prediction};
use crate::cloud::{render_depth_image_scaled, PointCloud};
use crate::geometry::{Calibration, CameraIntrinsics, Pixel, Quaternion, RigidTransform, Vec3, XI_MAX};
use crate::image::RgbImage;
use crate::labelgen::{label_seed, rng_from_seed, synthesize_distorted_image, Deviation, Split};
use crate::nn::{Adam, AdamConfig, Gradients, Graph, NnError, ParamStore};

/// Pose draws allowed before a board that never fits the frame is fatal.
pub const MAX_POSE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] CalicaError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss on label {ordinal}")]
    NonFiniteLoss { ordinal: u64 },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("no validation samples")]
    EmptyValidationSet,
    #[error("checkerboard did not fit the frame after {0} pose draws")]
    BoardOutOfView(usize),
    #[error("no checkerboard corner projects in front of the camera")]
    NoValidCorners,
    #[error("invalid configuration: {0}")]
    Config(String),
}

// ---------------------------------------------------------------- metrics

/// Planar checkerboard: `rows x cols` inner corners spaced `square` metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    pub square: f64,
}

impl Default for BoardSpec {
    fn default() -> Self {
        BoardSpec {
            rows: 6,
            cols: 8,
            square: 0.1,
        }
    }
}

impl BoardSpec {
    /// Corner positions in the board frame (z = 0), centred, row-major.
    pub fn corners(&self) -> Vec<Vec3> {
        let (r0, c0) = ((self.rows as f64 - 1.0) / 2.0, (self.cols as f64 - 1.0) / 2.0);
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| [(j as f64 - c0) * self.square, (i as f64 - r0) * self.square, 0.0]))
            .collect()
    }
}

/// Checkerboard observations: board-to-camera poses and the detected corner
/// pixels per pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardScene {
    pub board: BoardSpec,
    pub width: usize,
    pub height: usize,
    pub poses: Vec<RigidTransform>,
    pub observed: Vec<Vec<Pixel>>,
}

/// Root mean squared corner reprojection error in pixels,
/// `sqrt(sum |project(p_ij) - x_ij|^2 / N)`. A pose with any corner behind the
/// camera is left out with a warning.
pub fn reprojection_rmse(intr: &CameraIntrinsics, scene: &CheckerboardScene) -> Result<f64, PipelineError> {
    let corners = scene.board.corners();
    let (mut sum, mut n) = (0.0, 0usize);
    'poses: for (i, (pose, obs)) in scene.poses.iter().zip(&scene.observed).enumerate() {
        let mut pose_sum = 0.0;
        for (p, x) in corners.iter().zip(obs) {
            let Some(px) = intr.project(pose.apply(*p)) else {
                log::warn!("checkerboard pose {i} has a corner behind the camera; excluded");
                continue 'poses;
            };
            pose_sum += (px.u - x.u).powi(2) + (px.v - x.v).powi(2);
        }
        sum += pose_sum;
        n += corners.len().min(obs.len());
    }
    if n == 0 {
        return Err(PipelineError::NoValidCorners);
    }
    Ok((sum / n as f64).sqrt())
}

/// Deterministic checkerboard views for `intr`: board centres drawn inside
/// the middle of the frame at 2-5 m, tilted up to 25 degrees. Observations are
/// exact projections plus Gaussian pixel noise whose 2-D RMS is `sigma`.
pub fn make_synthetic_scene(
    intr: &CameraIntrinsics,
    board: BoardSpec,
    n_poses: usize,
    sigma: f64,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<CheckerboardScene, PipelineError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(PipelineError::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    let mut rng = rng_from_seed(seed);
    let corners = board.corners();
    let noise = Normal::new(0.0, sigma / core::f64::consts::SQRT_2).expect("finite sigma");
    let mut poses = Vec::with_capacity(n_poses);
    let mut observed = Vec::with_capacity(n_poses);
    for _ in 0..n_poses {
        let mut placed = None;
        for _ in 0..MAX_POSE_ATTEMPTS {
            let centre = Pixel::new(
                rng.random_range(0.3..0.7) * width as f64,
                rng.random_range(0.3..0.7) * height as f64,
            );
            let depth = rng.random_range(2.0..5.0);
            let euler = [rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0), rng.random_range(-15.0..15.0)];
            let Ok(ray) = intr.unproject(centre) else { continue };
            let t = [ray[0] / ray[2] * depth, ray[1] / ray[2] * depth, depth];
            let pose = RigidTransform::new(Quaternion::from_euler_xyz_deg(euler), t);
            let px: Option<Vec<Pixel>> = corners
                .iter()
                .map(|&p| intr.project(pose.apply(p)))
                .map(|p| p.filter(|p| p.u >= 0.0 && p.v >= 0.0 && p.u < width as f64 && p.v < height as f64))
                .collect();
            if let Some(px) = px {
                placed = Some((pose, px));
                break;
            }
        }
        let (pose, px) = placed.ok_or(PipelineError::BoardOutOfView(MAX_POSE_ATTEMPTS))?;
        let obs = px
            .into_iter()
            .map(|p| {
                if sigma > 0.0 {
                    Pixel::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng))
                } else {
                    p
                }
            })
            .collect();
        poses.push(pose);
        observed.push(obs);
    }
    Ok(CheckerboardScene {
        board,
        width,
        height,
        poses,
        observed,
    })
}

/// Grey-scale view of the board at `scene.poses[pose]` seen through `intr`:
/// alternating squares around the inner corners with a one-square white
/// margin, on a mid-grey background.
pub fn render_checkerboard(scene: &CheckerboardScene, pose: usize, intr: &CameraIntrinsics) -> RgbImage {
    let b = scene.board;
    let inv = scene.poses[pose].inverse();
    let (half_w, half_h) = ((b.cols + 1) as f64 * b.square / 2.0, (b.rows + 1) as f64 * b.square / 2.0);
    RgbImage::from_fn(scene.width, scene.height, |x, y| {
        let grey = |v: f32| [v, v, v];
        let Ok(ray) = intr.unproject(Pixel::new(x as f64, y as f64)) else { return grey(0.5) };
        // ray in board coordinates, intersected with z = 0
        let o = inv.translation_vector();
        let d = inv.rotation().rotate(ray);
        if d[2].abs() < 1e-12 {
            return grey(0.5);
        }
        let s = -o[2] / d[2];
        if s <= 0.0 {
            return grey(0.5);
        }
        let (bx, by) = (o[0] + s * d[0], o[1] + s * d[1]);
        if bx.abs() > half_w + b.square || by.abs() > half_h + b.square {
            return grey(0.5);
        }
        if bx.abs() > half_w || by.abs() > half_h {
            return grey(1.0);
        }
        let (i, j) = (((bx + half_w) / b.square).floor() as i64, ((by + half_h) / b.square).floor() as i64);
        grey(if (i + j) % 2 == 0 { 0.05 } else { 0.95 })
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicErrors {
    /// Mean absolute Euler angle of the relative rotation, degrees.
    pub rotation_deg: f64,
    /// Mean absolute per-axis translation difference, metres.
    pub translation_m: f64,
}

/// Rotation: mean of `|Euler XYZ|` of `R_pred R_ref^T`. Translation: mean of
/// `|t_pred - t_ref|` per axis, which is unchanged when the two are swapped.
pub fn extrinsic_errors(pred: &RigidTransform, reference: &RigidTransform) -> ExtrinsicErrors {
    let rel = pred.rotation() * reference.rotation().conjugate();
    let e = rel.normalized().to_euler_xyz_deg();
    let (tp, tr) = (pred.translation_vector(), reference.translation_vector());
    ExtrinsicErrors {
        rotation_deg: e.iter().map(|a| a.abs()).sum::<f64>() / 3.0,
        translation_m: (0..3).map(|k| (tp[k] - tr[k]).abs()).sum::<f64>() / 3.0,
    }
}

// ------------------------------------------------------------ experiments

/// Ablation settings: I drops the intrinsic losses and freezes the RGB
/// branch, II drops the extrinsic losses and freezes the depth branch, III
/// trains both branches without sharing, IV shares the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    I,
    II,
    III,
    IV,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::I, Experiment::II, Experiment::III, Experiment::IV];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::I => "I",
            Experiment::II => "II",
            Experiment::III => "III",
            Experiment::IV => "IV",
        }
    }

    pub fn parse(s: &str) -> Option<Experiment> {
        Experiment::ALL.into_iter().find(|e| e.name().eq_ignore_ascii_case(s))
    }

    pub fn apply(self, base: &CalicaConfig) -> CalicaConfig {
        let mut c = base.clone();
        c.freeze_rgb = false;
        c.freeze_depth = false;
        c.share_weights = false;
        match self {
            Experiment::I => {
                c.freeze_rgb = true;
                c.loss_weights.f = 0.0;
                c.loss_weights.xi = 0.0;
            }
            Experiment::II => {
                c.freeze_depth = true;
                c.loss_weights.q = 0.0;
                c.loss_weights.t = 0.0;
            }
            Experiment::III => {}
            Experiment::IV => c.share_weights = true,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    /// The rate follows a cosine from `lr` at the first epoch down to
    /// `lr * lr_final_ratio` at the last; 1 keeps it constant.
    pub lr_final_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub experiment: Option<Experiment>,
    pub input_width: usize,
    pub input_height: usize,
    pub model: CalicaConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            lr_final_ratio: 0.01,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            experiment: None,
            input_width: 192,
            input_height: 64,
            model: CalicaConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Batch 60, 300 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 60,
            epochs: 300,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.lr.is_finite() && self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(PipelineError::Config("lr, batch size and epochs must be positive".into()));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(PipelineError::Config("lr_final_ratio must lie in (0, 1]".into()));
        }
        if self.input_width < crate::calicanet::MIN_INPUT_SIDE || self.input_height < crate::calicanet::MIN_INPUT_SIDE {
            return Err(PipelineError::Config("input sides must be at least 32".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let progress = (epoch.clamp(1, self.epochs) - 1) as f64 / (self.epochs - 1) as f64;
        let end = self.lr * self.lr_final_ratio;
        end + (self.lr - end) * 0.5 * (1.0 + (core::f64::consts::PI * progress).cos())
    }

    /// Model configuration with the experiment's overrides applied.
    pub fn model_config(&self) -> CalicaConfig {
        match self.experiment {
            Some(e) => e.apply(&self.model),
            None => self.model.clone(),
        }
    }
}

// ---------------------------------------------------------------- samples

/// A prepared network input with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ordinal: u64,
    pub split: Split,
    pub label: Deviation,
    pub input: NetInput<f32>,
}

/// Builds the miscalibrated pair for `label`: the image re-imaged through the
/// deviated intrinsics and area-resampled to the input size, and the cloud
/// projected with the nominal intrinsics and the deviated extrinsic straight
/// into the input raster.
pub fn prepare_input(
    image: &RgbImage,
    cloud: &PointCloud,
    theta0: &Calibration,
    label: &Deviation,
    width: usize,
    height: usize,
    max_range: f64,
) -> Result<NetInput<f32>, CalicaError> {
    let warped = synthesize_distorted_image(image, &theta0.intrinsics, &label.deviated_intrinsics(&theta0.intrinsics));
    input_from_distorted(&warped, cloud, theta0, label, width, height, max_range)
}

/// As [`prepare_input`] for an image already warped to the deviated
/// intrinsics at full resolution.
pub fn input_from_distorted(
    distorted: &RgbImage,
    cloud: &PointCloud,
    theta0: &Calibration,
    label: &Deviation,
    width: usize,
    height: usize,
    max_range: f64,
) -> Result<NetInput<f32>, CalicaError> {
    let rgb = distorted.resize_area(width, height);
    let (sx, sy) = (width as f64 / distorted.width() as f64, height as f64 / distorted.height() as f64);
    let ext = label.deviated_extrinsic(&theta0.extrinsic);
    let depth = render_depth_image_scaled(cloud, &theta0.intrinsics, &ext, width, height, sx, sy);
    NetInput::from_images(&rgb, &depth, max_range)
}

// --------------------------------------------------------------- training

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub val_total: Option<f64>,
    pub val_f: Option<f64>,
    pub val_xi: Option<f64>,
    pub val_q: Option<f64>,
    pub val_t: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: CalicaNet<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn sample_loss(model: &CalicaNet<f32>, s: &Sample, with_grad: bool) -> Result<(LossValues, Option<Gradients<f32>>), PipelineError> {
    let mut g = Graph::new(model.params());
    let rgb = g.input(s.input.rgb.clone());
    let depth = g.input(s.input.depth.clone());
    let out = model.forward(&mut g, rgb, depth)?;
    let lv = model.loss(&mut g, &out, &s.label)?;
    let values = LossValues::read(&g, &lv);
    if !values.total.is_finite() {
        return Err(PipelineError::NonFiniteLoss { ordinal: s.ordinal });
    }
    let grads = if with_grad { Some(g.backward(lv.total)?.params) } else { None };
    Ok((values, grads))
}

/// Mean loss terms over `samples` without updating anything.
pub fn mean_loss(model: &CalicaNet<f32>, samples: &[Sample]) -> Result<LossValues, PipelineError> {
    let mut acc = LossValues::default();
    let n = samples.len() as f64;
    let add = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + b / n);
        }
    };
    for s in samples {
        let (v, _) = sample_loss(model, s, false)?;
        acc.total += v.total / n;
        add(&mut acc.f, v.f);
        add(&mut acc.xi, v.xi);
        add(&mut acc.q, v.q);
        add(&mut acc.t, v.t);
    }
    Ok(acc)
}

/// One optimizer step over a batch. Gradients are summed in label-ordinal
/// order, so the update does not depend on the order of `batch`.
pub fn train_step(
    model: &mut CalicaNet<f32>,
    adam: &mut Adam<f32>,
    batch: &[&Sample],
) -> Result<Vec<LossValues>, PipelineError> {
    let mut per: Vec<(u64, LossValues, Gradients<f32>)> = Vec::with_capacity(batch.len());
    for s in batch {
        let (v, g) = sample_loss(model, s, true)?;
        per.push((s.ordinal, v, g.expect("gradients requested")));
    }
    per.sort_by_key(|p| p.0);
    let mut total = Gradients::empty(model.params().len());
    let scale = 1.0 / batch.len() as f32;
    for (_, _, g) in &per {
        total.accumulate(g, scale);
    }
    adam.step(model.params_mut(), &total)?;
    Ok(per.into_iter().map(|p| p.1).collect())
}

/// Trains on `train` and scores `val` after every epoch. The returned model
/// carries the parameters of the epoch with the lowest validation loss (or
/// training loss when `val` is empty).
pub fn train(train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let mut model = CalicaNet::<f32>::new(config.model_config(), config.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from_seed(label_seed(config.seed, epoch as u64)));
        adam.config.lr = config.learning_rate(epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            for v in train_step(&mut model, &mut adam, &batch)? {
                sum += v.total;
            }
        }
        let train_total = sum / train.len() as f64;
        let v = if val.is_empty() { None } else { Some(mean_loss(&model, val)?) };
        let rec = EpochRecord {
            epoch,
            train_total,
            val_total: v.map(|v| v.total),
            val_f: v.and_then(|v| v.f),
            val_xi: v.and_then(|v| v.xi),
            val_q: v.and_then(|v| v.q),
            val_t: v.and_then(|v| v.t),
        };
        log::info!("epoch {epoch}: train {train_total:.6} val {:?}", rec.val_total);
        let score = rec.val_total.unwrap_or(train_total);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, model.params().clone()));
        }
        history.push(rec);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

// ------------------------------------------------------------- evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub ordinal: u64,
    pub predicted: Prediction,
    pub label: Deviation,
    pub rotation_deg: f64,
    pub translation_m: f64,
    /// Predicted minus labelled focal deviation, pixels.
    pub f_error_px: f64,
    pub xi_error: f64,
}

/// Average calibration errors over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Checkerboard reprojection RMSE with the recovered intrinsics, pixels.
    pub intrinsic_px: f64,
    /// The same RMSE with the nominal intrinsics.
    pub intrinsic_baseline_px: f64,
    pub extrinsic_t_m: f64,
    pub extrinsic_r_deg: f64,
    pub mean_abs_f_error_px: f64,
    pub mean_abs_xi_error: f64,
    pub forward_passes: usize,
    pub frames: Vec<FrameEval>,
}

/// Scores one single-pass prediction per sample. The recovered calibration of
/// a sample is compared with its labelled calibration; the reprojection RMSE
/// uses the nominal intrinsics shifted by the mean intrinsic prediction error.
pub fn evaluate(
    model: &CalicaNet<f32>,
    samples: &[Sample],
    theta0: &Calibration,
    scene: &CheckerboardScene,
) -> Result<EvalReport, PipelineError> {
    let before = model.forward_count();
    let mut frames = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.input)?;
        let est = apply_prediction(theta0, &pred);
        let truth = s.label.deviated_extrinsic(&theta0.extrinsic);
        let e = extrinsic_errors(&est.extrinsic, &truth);
        frames.push(FrameEval {
            ordinal: s.ordinal,
            predicted: pred,
            label: s.label,
            rotation_deg: e.rotation_deg,
            translation_m: e.translation_m,
            f_error_px: pred.df - s.label.df,
            xi_error: pred.dxi - s.label.dxi,
        });
    }
    let n = frames.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FrameEval) -> f64| frames.iter().map(f).sum::<f64>() / n;
    let i0 = theta0.intrinsics;
    let recovered = CameraIntrinsics {
        f: (i0.f + mean(&|r| r.f_error_px)).max(crate::calicanet::MIN_FOCAL),
        xi: (i0.xi + mean(&|r| r.xi_error)).clamp(0.0, XI_MAX),
        ..i0
    };
    Ok(EvalReport {
        intrinsic_px: reprojection_rmse(&recovered, scene)?,
        intrinsic_baseline_px: reprojection_rmse(&i0, scene)?,
        extrinsic_t_m: mean(&|r| r.translation_m),
        extrinsic_r_deg: mean(&|r| r.rotation_deg),
        mean_abs_f_error_px: mean(&|r| r.f_error_px.abs()),
        mean_abs_xi_error: mean(&|r| r.xi_error.abs()),
        forward_passes: model.forward_count() - before,
        frames,
    })
}

// --------------------------------------------------------------- ablation

/// Terminal validation loss terms of one experiment; `None` marks a term the
/// experiment does not train.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: Experiment,
    pub f_loss: Option<f64>,
    pub xi_loss: Option<f64>,
    pub r_loss: Option<f64>,
    pub t_loss: Option<f64>,
}

/// Trains experiments I-IV with identical data and seed.
pub fn ablate(train_set: &[Sample], val: &[Sample], base: &TrainConfig) -> Result<Vec<AblationRow>, PipelineError> {
    if val.is_empty() {
        return Err(PipelineError::EmptyValidationSet);
    }
    Experiment::ALL
        .iter()
        .map(|&e| {
            let cfg = TrainConfig {
                experiment: Some(e),
                ..base.clone()
            };
            let out = train(train_set, val, &cfg)?;
            let last = out.history.last().expect("at least one epoch");
            Ok(AblationRow {
                experiment: e,
                f_loss: last.val_f,
                xi_loss: last.val_xi,
                r_loss: last.val_q,
                t_loss: last.val_t,
            })
        })
        .collect()
}
