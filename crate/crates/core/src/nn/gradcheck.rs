//! Central finite-difference verification of reverse-mode gradients, run in
//! `f64`.
//!
//! A coordinate whose `+h`/`-h` evaluations take a different piecewise branch
//! than the unperturbed pass (PReLU sign, smooth-L1 regime) straddles a kink
//! where no derivative exists; it is skipped and another coordinate drawn.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            samples_per_tensor: 24,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst: Option<String>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

enum Target {
    Param(ParamId),
    Input(usize),
}

/// Compares the gradients of the scalar built by `build` against central
/// differences, for every unfrozen parameter of `store` and every tensor in
/// `inputs`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: F,
    config: GradCheckConfig,
    seed: u64,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, u64), NnError> {
        let mut g = Graph::new(store).with_branch_tracking();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = build(&mut g, &vars)?;
        Ok((g.value(l).data()[0], g.signature()))
    };

    let (analytic_params, analytic_inputs, base_sig) = {
        let mut g = Graph::new(store).with_branch_tracking();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let l = build(&mut g, &vars)?;
        let grads = g.backward(l)?;
        let ins: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.var(v).map_or_else(|| alloc::vec![0.0; t.len()], |s| s.to_vec()))
            .collect();
        (grads.params, ins, g.signature())
    };

    let mut targets: Vec<Target> = store.ids().filter(|&id| !store.is_frozen(id)).map(Target::Param).collect();
    targets.extend((0..inputs.len()).map(Target::Input));

    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let mut report = GradCheckReport::default();
    let h = config.step;

    for target in targets {
        let (len, label) = match target {
            Target::Param(id) => (store.get(id).len(), String::from(store.name(id))),
            Target::Input(i) => (inputs[i].len(), format!("input{i}")),
        };
        if len == 0 {
            continue;
        }
        let want = config.samples_per_tensor.min(len);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let mut done = 0;
        while done < want {
            let Some(idx) = order.pop() else { break };
            let analytic = match target {
                Target::Param(id) => analytic_params.get(id).map_or(0.0, |g| g[idx]),
                Target::Input(i) => analytic_inputs[i][idx],
            };
            let orig = *cell(&mut work_store, &mut work_inputs, &target, idx);
            *cell(&mut work_store, &mut work_inputs, &target, idx) = orig + h;
            let (fp, sp) = eval(&work_store, &work_inputs)?;
            *cell(&mut work_store, &mut work_inputs, &target, idx) = orig - h;
            let (fm, sm) = eval(&work_store, &work_inputs)?;
            *cell(&mut work_store, &mut work_inputs, &target, idx) = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let e = relative_error(analytic, numeric);
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some(format!("{label}[{idx}]"));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}

fn cell<'a>(store: &'a mut ParamStore<f64>, inputs: &'a mut [Tensor<f64>], target: &Target, idx: usize) -> &'a mut f64 {
    match *target {
        Target::Param(id) => &mut store.get_mut(id).data_mut()[idx],
        Target::Input(i) => &mut inputs[i].data_mut()[idx],
    }
}

/// Uniform values in `[-scale, scale]`, redrawn while within `gap` of zero.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(-scale..=scale);
        if v.abs() >= gap {
            break v;
        }
    })
}

/// The per-operation suite: each differentiable layer checked under random
/// inputs derived from `seed`. Non-scalar outputs are reduced with a fixed
/// random weighting.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, NnError> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut out = Vec::new();

    // conv2d on a random 2x3x8x8 input, stride 1 and stride 2
    for (name, stride) in [("conv2d", 1usize), ("conv2d_stride2", 2)] {
        let mut s = ParamStore::new();
        let w = s.add("weight", random_tensor(&mut rng, &[4, 3, 3, 3], 1.0, 0.0));
        let b = s.add("bias", random_tensor(&mut rng, &[4], 1.0, 0.0));
        let x = random_tensor(&mut rng, &[2, 3, 8, 8], 1.0, 0.0);
        let side = if stride == 1 { 8 } else { 4 };
        let proj = random_tensor(&mut rng, &[2 * 4 * side * side], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let (wv, bv) = (g.param(w), g.param(b));
                let y = g.conv2d(v[0], wv, bv, stride, 1)?;
                g.dot_const(y, proj.data())
            },
            cfg,
            rng.random(),
        )?;
        out.push((name, r));
    }

    // prelu, inputs kept away from the kink at zero
    {
        let mut s = ParamStore::new();
        let a = s.add("slope", random_tensor(&mut rng, &[3], 0.5, 0.0));
        let x = random_tensor(&mut rng, &[2, 3, 4, 5], 1.0, 0.05);
        let proj = random_tensor(&mut rng, &[120], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let av = g.param(a);
                let y = g.prelu(v[0], av)?;
                g.dot_const(y, proj.data())
            },
            cfg,
            rng.random(),
        )?;
        out.push(("prelu", r));
    }

    // adaptive average pooling
    {
        let s = ParamStore::new();
        let x = random_tensor(&mut rng, &[2, 3, 5, 7], 1.0, 0.0);
        let proj = random_tensor(&mut rng, &[6], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let y = g.adaptive_avg_pool(v[0])?;
                g.dot_const(y, proj.data())
            },
            cfg,
            rng.random(),
        )?;
        out.push(("adaptive_avg_pool", r));
    }

    // fully connected
    {
        let mut s = ParamStore::new();
        let w = s.add("weight", random_tensor(&mut rng, &[5, 7], 1.0, 0.0));
        let b = s.add("bias", random_tensor(&mut rng, &[5], 1.0, 0.0));
        let x = random_tensor(&mut rng, &[3, 7], 1.0, 0.0);
        let proj = random_tensor(&mut rng, &[15], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let (wv, bv) = (g.param(w), g.param(b));
                let y = g.linear(v[0], wv, bv)?;
                g.dot_const(y, proj.data())
            },
            cfg,
            rng.random(),
        )?;
        out.push(("fully_connected", r));
    }

    // smooth L1 in both regimes
    {
        let s = ParamStore::new();
        let x = random_tensor(&mut rng, &[12], 3.0, 0.0);
        let target = random_tensor(&mut rng, &[12], 1.0, 0.0);
        let r = grad_check(&s, &[x], |g, v| g.smooth_l1(v[0], target.data(), 1.0), cfg, rng.random())?;
        out.push(("smooth_l1", r));
    }

    // row normalization
    {
        let s = ParamStore::new();
        let x = random_tensor(&mut rng, &[2, 4], 1.0, 0.1);
        let proj = random_tensor(&mut rng, &[8], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let y = g.normalize_rows(v[0])?;
                g.dot_const(y, proj.data())
            },
            cfg,
            rng.random(),
        )?;
        out.push(("normalize", r));
    }

    // constant scalings
    {
        let s = ParamStore::new();
        let x = random_tensor(&mut rng, &[2, 3], 1.0, 0.0);
        let factors = random_tensor(&mut rng, &[3], 2.0, 0.0);
        let proj = random_tensor(&mut rng, &[6], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let y = g.scale_cols(v[0], factors.data())?;
                let y = g.scale(y, -1.7);
                g.dot_const(y, proj.data())
            },
            cfg,
            rng.random(),
        )?;
        out.push(("scale", r));
    }

    // composed conv -> prelu -> pool -> fc chain
    {
        let mut s = ParamStore::new();
        let cw = s.add("conv.weight", random_tensor(&mut rng, &[4, 2, 3, 3], 0.6, 0.0));
        let cb = s.add("conv.bias", random_tensor(&mut rng, &[4], 0.3, 0.0));
        let a = s.add("act.slope", random_tensor(&mut rng, &[4], 0.5, 0.0));
        let fw = s.add("fc.weight", random_tensor(&mut rng, &[3, 4], 1.0, 0.0));
        let fb = s.add("fc.bias", random_tensor(&mut rng, &[3], 1.0, 0.0));
        let x = random_tensor(&mut rng, &[1, 2, 9, 9], 1.0, 0.0);
        let target = random_tensor(&mut rng, &[3], 1.0, 0.0);
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let (cwv, cbv, av, fwv, fbv) = (g.param(cw), g.param(cb), g.param(a), g.param(fw), g.param(fb));
                let y = g.conv2d(v[0], cwv, cbv, 2, 1)?;
                let y = g.prelu(y, av)?;
                let y = g.adaptive_avg_pool(y)?;
                let y = g.reshape(y, &[1, 4])?;
                let y = g.linear(y, fwv, fbv)?;
                g.smooth_l1(y, target.data(), 1.0)
            },
            cfg,
            rng.random(),
        )?;
        out.push(("conv_prelu_pool_fc", r));
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-8, 0.0) - 1e-2).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn every_op_passes_over_ten_seeds() {
        for seed in 0..10 {
            for (name, r) in op_suite(seed).unwrap() {
                std::println!("seed {seed} {name}: {:.2e} ({} checked, {} kinks)", r.max_rel_error, r.checked, r.skipped_kinks);
                assert!(r.passed(), "{name} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl crate::nn::CustomOp<f64> for Wrong {
            fn name(&self) -> &'static str {
                "square-with-bad-backward"
            }
            fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
                // true derivative is 2x
                alloc::vec![Some(inputs[0].data().iter().map(|x| 2.1 * x * g[0]).collect())]
            }
        }
        let s = ParamStore::new();
        let x = Tensor::new(&[1], alloc::vec![0.7]).unwrap();
        let r = grad_check(
            &s,
            &[x],
            |g, v| {
                let xv = g.value(v[0]).data()[0];
                Ok(g.custom(&[v[0]], Tensor::scalar(xv * xv), alloc::boxed::Box::new(Wrong)))
            },
            GradCheckConfig::default(),
            1,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
