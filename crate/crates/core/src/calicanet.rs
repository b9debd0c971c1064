//! The calibration network: per-modality stems, a (optionally Siamese)
//! convolutional trunk, a correlation volume between the two feature maps,
//! and two regression heads for the intrinsic and extrinsic deviations.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::DepthImage;
use crate::geometry::{quaternion_distance, Calibration, CameraIntrinsics, Quaternion, Vec3, XI_MAX};
use crate::image::RgbImage;
use crate::labelgen::{rng_from_seed, sample_deviation, Deviation, DeviationRanges};
use crate::nn::gradcheck::{grad_check, random_tensor, GradCheckConfig, GradCheckReport};
use crate::nn::{CustomOp, Graph, NnError, ParamId, ParamStore, Scalar, Tensor, Var};

/// Smallest focal length a prediction is clamped to.
pub const MIN_FOCAL: f64 = 1e-3;
pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalicaError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input must be equal-sized with sides >= {MIN_INPUT_SIDE}: rgb {rgb:?}, depth {depth:?}")]
    InputSize { rgb: Vec<usize>, depth: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub f: f64,
    pub xi: f64,
    pub q: f64,
    pub t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            f: 1.0,
            xi: 1.0,
            q: 1.0,
            t: 0.5,
        }
    }
}

/// Fixed gains applied to raw head outputs. Focal, xi and translation are
/// scaled so the raw outputs are of order one; the quaternion keeps unit gain,
/// since a small gain there shrinks the rotation term's curvature by its
/// square and the trunk stops learning rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    /// Pixels per unit of the focal output.
    pub f: f64,
    pub xi: f64,
    /// Gain on the vector part of the quaternion output before normalization.
    pub rotation: f64,
    /// Metres per unit of the translation outputs.
    pub t: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        OutputScale {
            f: 100.0,
            xi: 0.48,
            rotation: 1.0,
            t: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalicaConfig {
    /// Output channels of both modality stems.
    pub stem_channels: usize,
    /// Output channels of each stride-2 trunk block.
    pub trunk_channels: Vec<usize>,
    /// Correlation search radius in feature-map pixels.
    pub max_displacement: usize,
    /// Hidden widths of each regression head.
    pub head_widths: Vec<usize>,
    pub loss_weights: LossWeights,
    pub share_weights: bool,
    pub freeze_rgb: bool,
    pub freeze_depth: bool,
    pub output_scale: OutputScale,
    /// Range in metres mapped to 1.0 in the depth input.
    pub max_range: f64,
}

impl Default for CalicaConfig {
    fn default() -> Self {
        CalicaConfig {
            stem_channels: 16,
            trunk_channels: vec![16, 32, 64, 64],
            max_displacement: 4,
            head_widths: vec![256, 128],
            loss_weights: LossWeights::default(),
            share_weights: true,
            freeze_rgb: false,
            freeze_depth: false,
            output_scale: OutputScale::default(),
            max_range: 80.0,
        }
    }
}

impl CalicaConfig {
    pub fn validate(&self) -> Result<(), CalicaError> {
        let w = &self.loss_weights;
        let bad = |m: &str| Err(CalicaError::Config(m.into()));
        if ![w.f, w.xi, w.q, w.t].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        if w.q < w.t {
            return bad("rotation loss weight must be at least the translation loss weight");
        }
        if self.max_displacement < 1 {
            return bad("max_displacement must be >= 1");
        }
        if self.stem_channels == 0 || self.trunk_channels.iter().any(|&c| c == 0) || self.head_widths.iter().any(|&c| c == 0) {
            return bad("layer widths must be positive");
        }
        let s = &self.output_scale;
        if ![s.f, s.xi, s.rotation, s.t, self.max_range].iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("output scales and max_range must be positive");
        }
        Ok(())
    }

    /// Side of the correlation window, `2D + 1`.
    pub fn window(&self) -> usize {
        2 * self.max_displacement + 1
    }

}

/// Predicted deviation from the nominal calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub df: f64,
    pub dxi: f64,
    /// Unit norm.
    pub dq: Quaternion,
    pub dt: Vec3,
}

impl Prediction {
    pub fn as_deviation(&self) -> Deviation {
        Deviation {
            df: self.df,
            dxi: self.dxi,
            dq: self.dq,
            dt: self.dt,
        }
    }
}

impl From<Deviation> for Prediction {
    fn from(d: Deviation) -> Self {
        Prediction {
            df: d.df,
            dxi: d.dxi,
            dq: d.dq,
            dt: d.dt,
        }
    }
}

/// One network input pair, `1 x 3 x H x W` and `1 x 1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
}

impl<T: Scalar> NetInput<T> {
    /// Centres colours around zero and scales ranges by `max_range`.
    pub fn from_images(rgb: &RgbImage, depth: &DepthImage, max_range: f64) -> Result<Self, CalicaError> {
        let (w, h) = (rgb.width(), rgb.height());
        if depth.width() != w || depth.height() != h {
            return Err(CalicaError::InputSize {
                rgb: vec![3, h, w],
                depth: vec![1, depth.height(), depth.width()],
            });
        }
        let planar = rgb.to_planar();
        let rgb_t = Tensor::new(&[1, 3, h, w], planar.iter().map(|&v| T::from_f64(v as f64 - 0.5)).collect())?;
        let inv = 1.0 / max_range;
        let depth_t = Tensor::new(&[1, 1, h, w], depth.data().iter().map(|&d| T::from_f64((d as f64 * inv).min(1.0))).collect())?;
        Ok(NetInput { rgb: rgb_t, depth: depth_t })
    }

    pub fn cast<U: Scalar>(&self) -> NetInput<U> {
        NetInput {
            rgb: self.rgb.cast(),
            depth: self.depth.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    w: ParamId,
    b: ParamId,
    slope: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stem_rgb: Block,
    stem_depth: Block,
    trunk_rgb: Vec<Block>,
    trunk_depth: Vec<Block>,
    head_intrinsic: Vec<(Dense, Option<ParamId>)>,
    head_extrinsic: Vec<(Dense, Option<ParamId>)>,
}

/// Graph values produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `1 x 2`: focal and distortion deviations.
    pub intrinsic: Var,
    /// `1 x 4`, unit norm.
    pub rotation: Var,
    /// `1 x 3`, metres.
    pub translation: Var,
}

/// Loss terms of one sample; `None` for a term whose weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub f: Option<Var>,
    pub xi: Option<Var>,
    pub q: Option<Var>,
    pub t: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub f: Option<f64>,
    pub xi: Option<f64>,
    pub q: Option<f64>,
    pub t: Option<f64>,
}

impl LossValues {
    pub fn read<T: Scalar>(g: &Graph<'_, T>, v: &LossVars) -> Self {
        let get = |v: Var| g.value(v).data()[0].to_f64();
        LossValues {
            total: get(v.total),
            f: v.f.map(get),
            xi: v.xi.map(get),
            q: v.q.map(get),
            t: v.t.map(get),
        }
    }
}

pub struct CalicaNet<T: Scalar = f32> {
    config: CalicaConfig,
    params: ParamStore<T>,
    layout: Layout,
    forwards: AtomicUsize,
}

impl<T: Scalar> Clone for CalicaNet<T> {
    fn clone(&self) -> Self {
        CalicaNet {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            forwards: AtomicUsize::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> core::fmt::Debug for CalicaNet<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("CalicaNet")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

impl<T: Scalar> CalicaNet<T> {
    /// Builds the model with seeded He-uniform weights, PReLU slopes of 0.25
    /// and an extrinsic output bias of `(1, 0, 0, 0, 0, 0, 0)` (identity rotation).
    pub fn new(config: CalicaConfig, seed: u64) -> Result<Self, CalicaError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            Block {
                w: p.add(format!("{name}.weight"), uniform(rng, &[cout, cin, 3, 3], bound)),
                b: p.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
                slope: p.add(format!("{name}.slope"), Tensor::full(&[cout], T::from_f64(0.25))),
            }
        };
        let c = config.stem_channels;
        let stem_rgb = conv(&mut p, &mut rng, "stem_rgb", 3, c);
        let stem_depth = conv(&mut p, &mut rng, "stem_depth", 1, c);
        let trunk = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str| {
            let mut cin = c;
            let mut blocks = Vec::new();
            for (i, &cout) in config.trunk_channels.iter().enumerate() {
                blocks.push(conv(p, rng, &format!("{prefix}.{i}"), cin, cout));
                cin = cout;
            }
            blocks
        };
        let (trunk_rgb, trunk_depth) = if config.share_weights {
            let t = trunk(&mut p, &mut rng, "trunk");
            (t.clone(), t)
        } else {
            let a = trunk(&mut p, &mut rng, "trunk_rgb");
            let b = trunk(&mut p, &mut rng, "trunk_depth");
            (a, b)
        };
        let w2 = config.window() * config.window();
        let head = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, out: usize, bias: &[f64]| {
            let mut layers = Vec::new();
            let mut din = w2;
            for (i, &width) in config.head_widths.iter().enumerate() {
                let bound = (6.0 / din as f64).sqrt();
                let dense = Dense {
                    w: p.add(format!("{name}.{i}.weight"), uniform(rng, &[width, din], bound)),
                    b: p.add(format!("{name}.{i}.bias"), Tensor::zeros(&[width])),
                };
                let slope = p.add(format!("{name}.{i}.slope"), Tensor::full(&[width], T::from_f64(0.25)));
                layers.push((dense, Some(slope)));
                din = width;
            }
            // small final layer so the first predictions sit near zero deviation
            let bound = 0.1 * (3.0 / din as f64).sqrt();
            let i = config.head_widths.len();
            let dense = Dense {
                w: p.add(format!("{name}.{i}.weight"), uniform(rng, &[out, din], bound)),
                b: p.add(
                    format!("{name}.{i}.bias"),
                    Tensor::new(&[out], bias.iter().map(|&v| T::from_f64(v)).collect()).expect("bias length"),
                ),
            };
            layers.push((dense, None));
            layers
        };
        let head_intrinsic = head(&mut p, &mut rng, "head_intrinsic", 2, &[0.0, 0.0]);
        let head_extrinsic = head(&mut p, &mut rng, "head_extrinsic", 7, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let layout = Layout {
            stem_rgb,
            stem_depth,
            trunk_rgb,
            trunk_depth,
            head_intrinsic,
            head_extrinsic,
        };
        let mut net = CalicaNet {
            config,
            params: p,
            layout,
            forwards: AtomicUsize::new(0),
        };
        net.apply_freeze_flags();
        Ok(net)
    }

    fn branch_ids(&self, rgb: bool) -> Vec<ParamId> {
        let (stem, trunk) = if rgb {
            (&self.layout.stem_rgb, &self.layout.trunk_rgb)
        } else {
            (&self.layout.stem_depth, &self.layout.trunk_depth)
        };
        let mut ids = vec![stem.w, stem.b, stem.slope];
        for b in trunk {
            ids.extend([b.w, b.b, b.slope]);
        }
        ids
    }

    /// Freezes a branch's stem and trunk. A shared trunk is frozen only when
    /// both branches are.
    fn apply_freeze_flags(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.set_frozen(id, false);
        }
        let rgb = self.branch_ids(true);
        let depth = self.branch_ids(false);
        let (fr, fd) = (self.config.freeze_rgb, self.config.freeze_depth);
        for &id in &rgb {
            let shared = depth.contains(&id);
            if fr && (!shared || fd) {
                self.params.set_frozen(id, true);
            }
        }
        for &id in &depth {
            let shared = rgb.contains(&id);
            if fd && (!shared || fr) {
                self.params.set_frozen(id, true);
            }
        }
    }

    pub fn config(&self) -> &CalicaConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameter ids of the trunk as used by the RGB and depth branches.
    /// Identical lists mean the trunk is a single shared set of buffers.
    pub fn trunk_param_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let ids = |t: &[Block]| t.iter().flat_map(|b| [b.w, b.b, b.slope]).collect();
        (ids(&self.layout.trunk_rgb), ids(&self.layout.trunk_depth))
    }

    pub fn rgb_branch_ids(&self) -> Vec<ParamId> {
        self.branch_ids(true)
    }

    pub fn depth_branch_ids(&self) -> Vec<ParamId> {
        self.branch_ids(false)
    }

    /// Number of single-pass predictions made so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Same architecture and values in another element type.
    pub fn cast<U: Scalar>(&self) -> CalicaNet<U> {
        CalicaNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            forwards: AtomicUsize::new(0),
        }
    }

    fn conv_block(&self, g: &mut Graph<'_, T>, x: Var, b: &Block, stride: usize, layer: &str) -> Result<Var, NnError> {
        let (w, bias, a) = (g.param(b.w), g.param(b.b), g.param(b.slope));
        let y = g.conv2d(x, w, bias, stride, 1)?;
        let y = g.prelu(y, a)?;
        g.check_finite(y, layer)?;
        Ok(y)
    }

    fn head(&self, g: &mut Graph<'_, T>, x: Var, layers: &[(Dense, Option<ParamId>)], name: &str) -> Result<Var, NnError> {
        let mut y = x;
        for (i, (d, slope)) in layers.iter().enumerate() {
            let (w, b) = (g.param(d.w), g.param(d.b));
            y = g.linear(y, w, b)?;
            if let Some(s) = slope {
                let a = g.param(*s);
                y = g.prelu(y, a)?;
            }
            g.check_finite(y, &format!("{name}.{i}"))?;
        }
        Ok(y)
    }

    /// Records the forward pass on `g` for inputs `rgb` (`1x3xHxW`) and
    /// `depth` (`1x1xHxW`).
    pub fn forward(&self, g: &mut Graph<'_, T>, rgb: Var, depth: Var) -> Result<Outputs, CalicaError> {
        let (rs, ds) = (g.value(rgb).shape().to_vec(), g.value(depth).shape().to_vec());
        let ok = rs.len() == 4
            && ds.len() == 4
            && rs[0] == 1
            && ds[0] == 1
            && rs[1] == 3
            && ds[1] == 1
            && rs[2..] == ds[2..]
            && rs[2] >= MIN_INPUT_SIDE
            && rs[3] >= MIN_INPUT_SIDE;
        if !ok {
            return Err(CalicaError::InputSize { rgb: rs, depth: ds });
        }
        let mut fa = self.conv_block(g, rgb, &self.layout.stem_rgb, 1, "stem_rgb")?;
        let mut fb = self.conv_block(g, depth, &self.layout.stem_depth, 1, "stem_depth")?;
        for (i, (ba, bb)) in self.layout.trunk_rgb.iter().zip(&self.layout.trunk_depth).enumerate() {
            fa = self.conv_block(g, fa, ba, 2, &format!("trunk_rgb.{i}"))?;
            fb = self.conv_block(g, fb, bb, 2, &format!("trunk_depth.{i}"))?;
        }
        let corr = correlation_volume_var(g, fa, fb, self.config.max_displacement)?;
        let pooled = g.adaptive_avg_pool(corr)?;
        let w2 = self.config.window() * self.config.window();
        let feat = g.reshape(pooled, &[1, w2])?;
        g.check_finite(feat, "correlation")?;

        let s = self.config.output_scale;
        let intr = self.head(g, feat, &self.layout.head_intrinsic, "head_intrinsic")?;
        let intrinsic = g.scale_cols(intr, &[T::from_f64(s.f), T::from_f64(s.xi)])?;
        let ext = self.head(g, feat, &self.layout.head_extrinsic, "head_extrinsic")?;
        let r = T::from_f64(s.rotation);
        let t = T::from_f64(s.t);
        let ext = g.scale_cols(ext, &[T::one(), r, r, r, t, t, t])?;
        let q = g.slice_cols(ext, 0, 4)?;
        let rotation = g.normalize_rows(q)?;
        let translation = g.slice_cols(ext, 4, 3)?;
        g.check_finite(rotation, "rotation_output")?;
        Ok(Outputs {
            intrinsic,
            rotation,
            translation,
        })
    }

    /// Weighted training loss of one sample; terms with zero weight are not
    /// recorded at all.
    pub fn loss(&self, g: &mut Graph<'_, T>, out: &Outputs, label: &Deviation) -> Result<LossVars, NnError> {
        let w = self.config.loss_weights;
        let one = T::one();
        let mut terms = Vec::new();
        let f = if w.f > 0.0 {
            let v = g.slice_cols(out.intrinsic, 0, 1)?;
            let l = g.smooth_l1(v, &[T::from_f64(label.df)], one)?;
            terms.push((l, T::from_f64(w.f)));
            Some(l)
        } else {
            None
        };
        let xi = if w.xi > 0.0 {
            let v = g.slice_cols(out.intrinsic, 1, 1)?;
            let l = g.smooth_l1(v, &[T::from_f64(label.dxi)], one)?;
            terms.push((l, T::from_f64(w.xi)));
            Some(l)
        } else {
            None
        };
        let q = if w.q > 0.0 {
            let l = quaternion_distance_var(g, out.rotation, label.dq)?;
            terms.push((l, T::from_f64(w.q)));
            Some(l)
        } else {
            None
        };
        let t = if w.t > 0.0 {
            let target: Vec<T> = label.dt.iter().map(|&v| T::from_f64(v)).collect();
            let l = g.smooth_l1(out.translation, &target, one)?;
            terms.push((l, T::from_f64(w.t)));
            Some(l)
        } else {
            None
        };
        let total = g.weighted_sum(&terms)?;
        Ok(LossVars { total, f, xi, q, t })
    }

    /// One inference pass. Counted by [`CalicaNet::forward_count`].
    pub fn predict(&self, input: &NetInput<T>) -> Result<Prediction, CalicaError> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new(&self.params);
        let rgb = g.input(input.rgb.clone());
        let depth = g.input(input.depth.clone());
        let out = self.forward(&mut g, rgb, depth)?;
        Ok(read_prediction(&g, &out))
    }
}

pub fn read_prediction<T: Scalar>(g: &Graph<'_, T>, out: &Outputs) -> Prediction {
    let i = g.value(out.intrinsic).data();
    let q = g.value(out.rotation).data();
    let t = g.value(out.translation).data();
    let dq = Quaternion::new(q[0].to_f64(), q[1].to_f64(), q[2].to_f64(), q[3].to_f64());
    Prediction {
        df: i[0].to_f64(),
        dxi: i[1].to_f64(),
        // re-normalize in f64 so the unit-norm invariant holds to double precision
        dq: dq.normalized(),
        dt: [t[0].to_f64(), t[1].to_f64(), t[2].to_f64()],
    }
}

/// `(1/C) <Fa(x), Fb(x + d)>` for every displacement `d` in `[-D, D]^2`,
/// zero outside `Fb`. Channel `(dy + D) * (2D + 1) + (dx + D)` holds `d = (dx, dy)`.
pub fn correlation_volume<T: Scalar>(fa: &Tensor<T>, fb: &Tensor<T>, max_disp: usize) -> Result<Tensor<T>, NnError> {
    if fa.shape() != fb.shape() || fa.shape().len() != 4 {
        return Err(NnError::Shape {
            op: "correlation_volume",
            detail: format!("feature maps {:?} and {:?} must match and be N x C x H x W", fa.shape(), fb.shape()),
        });
    }
    let s = fa.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let win = 2 * max_disp + 1;
    let d = max_disp as isize;
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut out = vec![T::zero(); n * win * win * h * w];
    let (a, b) = (fa.data(), fb.data());
    for ni in 0..n {
        for dy in -d..=d {
            for dx in -d..=d {
                let k = ((dy + d) as usize) * win + (dx + d) as usize;
                let dst = &mut out[((ni * win * win) + k) * h * w..((ni * win * win) + k + 1) * h * w];
                for ch in 0..c {
                    let base = (ni * c + ch) * h * w;
                    for y in 0..h {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            dst[y * w + x] = dst[y * w + x] + a[base + y * w + x] * b[base + yy as usize * w + xx as usize];
                        }
                    }
                }
                dst.iter_mut().for_each(|v| *v = *v * inv_c);
            }
        }
    }
    Tensor::new(&[n, win * win, h, w], out)
}

struct CorrelationOp {
    max_disp: usize,
}

impl<T: Scalar> CustomOp<T> for CorrelationOp {
    fn name(&self) -> &'static str {
        "correlation_volume"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (fa, fb) = (inputs[0], inputs[1]);
        let s = fa.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let win = 2 * self.max_disp + 1;
        let d = self.max_disp as isize;
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut da = needs[0].then(|| vec![T::zero(); fa.len()]);
        let mut db = needs[1].then(|| vec![T::zero(); fb.len()]);
        let (a, b) = (fa.data(), fb.data());
        for ni in 0..n {
            for dy in -d..=d {
                for dx in -d..=d {
                    let k = ((dy + d) as usize) * win + (dx + d) as usize;
                    let go = &g[((ni * win * win) + k) * h * w..((ni * win * win) + k + 1) * h * w];
                    for ch in 0..c {
                        let base = (ni * c + ch) * h * w;
                        for y in 0..h {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let xx = x as isize + dx;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let gi = go[y * w + x] * inv_c;
                                let (ia, ib) = (base + y * w + x, base + yy as usize * w + xx as usize);
                                if let Some(da) = da.as_mut() {
                                    da[ia] = da[ia] + gi * b[ib];
                                }
                                if let Some(db) = db.as_mut() {
                                    db[ib] = db[ib] + gi * a[ia];
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![da, db]
    }
}

pub fn correlation_volume_var<T: Scalar>(g: &mut Graph<'_, T>, fa: Var, fb: Var, max_disp: usize) -> Result<Var, NnError> {
    let out = correlation_volume(g.value(fa), g.value(fb), max_disp)?;
    Ok(g.custom(&[fa, fb], out, Box::new(CorrelationOp { max_disp })))
}

struct QuatDistanceOp {
    label: [f64; 4],
    sign: f64,
}

impl<T: Scalar> CustomOp<T> for QuatDistanceOp {
    fn name(&self) -> &'static str {
        "quaternion_distance"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let grad = self.label.iter().map(|&l| g[0] * T::from_f64(-self.sign * l)).collect();
        vec![Some(grad)]
    }
}

/// `1 - |<q, label>|` for a `1 x 4` unit quaternion value.
pub fn quaternion_distance_var<T: Scalar>(g: &mut Graph<'_, T>, q: Var, label: Quaternion) -> Result<Var, NnError> {
    let qv = g.value(q).data();
    if qv.len() != 4 {
        return Err(NnError::Shape {
            op: "quaternion_distance",
            detail: format!("expected 4 values, got {}", qv.len()),
        });
    }
    let l = label.to_array();
    let dot: f64 = qv.iter().zip(&l).map(|(&a, &b)| a.to_f64() * b).sum();
    let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
    g.note_branch(dot >= 0.0);
    let value = T::from_f64((1.0 - dot.abs()).max(0.0));
    Ok(g.custom(&[q], Tensor::scalar(value), Box::new(QuatDistanceOp { label: l, sign })))
}

/// The training loss evaluated directly on a prediction.
pub fn total_loss(pred: &Prediction, label: &Deviation, w: &LossWeights) -> f64 {
    let sl1 = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    let t = (0..3).map(|k| sl1(pred.dt[k] - label.dt[k])).sum::<f64>() / 3.0;
    w.f * sl1(pred.df - label.df)
        + w.xi * sl1(pred.dxi - label.dxi)
        + w.q * quaternion_distance(pred.dq, label.dq)
        + w.t * t
}

/// The calibration implied by a predicted deviation: intrinsics shifted by
/// `(df, dxi)` (clamped to `f >= 1e-3`, `xi` in `[0, 1.5]` with a warning) and
/// extrinsic `compose({dq, dt}, theta0)`.
pub fn apply_prediction(theta0: &Calibration, pred: &Prediction) -> Calibration {
    let i0 = theta0.intrinsics;
    let mut f = i0.f + pred.df;
    let mut xi = i0.xi + pred.dxi;
    if !(f >= MIN_FOCAL) {
        log::warn!("predicted focal length {f} clamped to {MIN_FOCAL}");
        f = MIN_FOCAL;
    }
    if !(0.0..=XI_MAX).contains(&xi) {
        let c = if xi > XI_MAX { XI_MAX } else { 0.0 };
        log::warn!("predicted distortion {xi} clamped to {c}");
        xi = c;
    }
    Calibration {
        intrinsics: CameraIntrinsics { f, cx: i0.cx, cy: i0.cy, xi },
        extrinsic: pred.as_deviation().deviated_extrinsic(&theta0.extrinsic),
    }
}

/// Central-difference check of the complete training loss (stems, trunk,
/// correlation, heads and every loss term) on a reduced network with 32x32
/// inputs, in `f64`.
pub fn loss_grad_check(share_weights: bool, seed: u64) -> Result<GradCheckReport, CalicaError> {
    let config = CalicaConfig {
        stem_channels: 3,
        trunk_channels: vec![4, 4],
        max_displacement: 2,
        head_widths: vec![6],
        share_weights,
        ..Default::default()
    };
    let net = CalicaNet::<f64>::new(config, seed)?;
    let mut rng = rng_from_seed(seed ^ 0x6c6f_7373);
    let rgb = random_tensor(&mut rng, &[1, 3, 32, 32], 0.5, 0.0);
    let depth = Tensor::from_fn(&[1, 1, 32, 32], |_| rng.random_range(0.0..1.0));
    let label = sample_deviation(&DeviationRanges::default(), &mut rng);
    let report = grad_check(
        net.params(),
        &[rgb, depth],
        |g, v| {
            let out = net.forward(g, v[0], v[1]).map_err(|e| match e {
                CalicaError::Nn(e) => e,
                other => NnError::Shape {
                    op: "forward",
                    detail: format!("{other}"),
                },
            })?;
            Ok(net.loss(g, &out, &label)?.total)
        },
        GradCheckConfig {
            samples_per_tensor: 4,
            ..Default::default()
        },
        seed,
    )?;
    Ok(report)
}
