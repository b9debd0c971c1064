//! Tape of operations recorded during a forward pass, and its reverse sweep.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{col2im, conv_output_size, im2col, ConvGeom};
use super::{shape_err, NnError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation whose forward value is computed by the caller.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries whose `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
        cols: Vec<T>,
    },
    Prelu {
        x: Var,
        a: Var,
    },
    AvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    NormalizeRows {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    ScaleCols {
        x: Var,
        factors: Vec<T>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<T>,
        beta: T,
    },
    DotConst {
        x: Var,
        w: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradient buffers, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + scale * b),
                None => *dst = Some(src.iter().map(|&b| scale * b).collect()),
            }
        }
    }
}

/// Result of a reverse sweep: parameter gradients plus gradients of any
/// recorded value that required them.
pub struct Grads<T> {
    pub params: Gradients<T>,
    vars: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn var(&self, v: Var) -> Option<&[T]> {
        self.vars.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records one forward pass over parameters borrowed from a [`ParamStore`].
pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    track_branches: bool,
    signature: u64,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            track_branches: false,
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Also hash every piecewise branch taken (PReLU sign, smooth-L1 regime,
    /// custom-op notes) into [`Graph::signature`].
    pub fn with_branch_tracking(mut self) -> Self {
        self.track_branches = true;
        self
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn note_branch(&mut self, bit: bool) {
        if self.track_branches {
            self.signature = (self.signature ^ bit as u64 ^ 0x5a).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The parameter as a graph value. Repeated calls return the same `Var`,
    /// so shared layers accumulate into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = self.push(t, Op::Param, !self.store.is_frozen(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.0).copied().flatten()
    }

    pub fn check_finite(&self, v: Var, layer: &str) -> Result<(), NnError> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(NnError::NonFiniteActivation {
                layer: layer.to_string(),
            })
        }
    }

    /// Cross-correlation of `N x C x H x W` input with `O x C x k x k`
    /// weights (odd `k`), plus bias `O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?} and weight {ws:?} must be 4-D")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[1] != c || ws[3] != k || k % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                format!("weight {ws:?} incompatible with input channels {c} (square odd kernel required)"),
            ));
        }
        if bs != [o] {
            return Err(shape_err("conv2d", format!("bias {bs:?} must be [{o}]")));
        }
        let (Some(ho), Some(wo)) = (conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)) else {
            return Err(shape_err(
                "conv2d",
                format!("input {h}x{wd} with kernel {k}, stride {stride}, padding {pad} does not fit"),
            ));
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let mut cols = vec![T::zero(); n * patch * pos];
        let mut out = vec![T::zero(); n * o * pos];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let col = &mut cols[i * patch * pos..(i + 1) * patch * pos];
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, col);
                let dst = &mut out[i * o * pos..(i + 1) * o * pos];
                T::gemm(o, patch, pos, T::one(), wv, patch, 1, col, pos, 1, T::zero(), dst, pos, 1);
                for (oc, row) in dst.chunks_mut(pos).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + bv[oc]);
                }
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        if !self.needs_grad(w) {
            cols = Vec::new();
        }
        Ok(self.push(
            Tensor::new(&[n, o, ho, wo], out)?,
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch: n,
                out_ch: o,
                cols,
            },
            needs,
        ))
    }

    /// `x` if positive, else `a[c] * x`, with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.get(1).ok_or_else(|| shape_err("prelu", format!("input {xs:?} has no channel axis")))?;
        if self.value(a).shape() != [c] {
            return Err(shape_err(
                "prelu",
                format!("slope {:?} must be [{c}]", self.value(a).shape()),
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let av = self.value(a).data().to_vec();
        let xv = self.value(x).data();
        let out: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { av[(i / inner) % c] * v })
            .collect();
        if self.track_branches {
            let bits: Vec<bool> = xv.iter().map(|&v| v > T::zero()).collect();
            bits.into_iter().for_each(|b| self.note_branch(b));
        }
        let needs = self.needs_grad(x) || self.needs_grad(a);
        Ok(self.push(Tensor::new(&xs, out)?, Op::Prelu { x, a }, needs))
    }

    /// Per-channel mean over all spatial positions: `N x C x H x W -> N x C x 1 x 1`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(shape_err("adaptive_avg_pool", format!("input {xs:?} must be N x C x H x W, H,W >= 1")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::from_f64(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().fold(T::zero(), |s, &v| s + v) * inv)
            .collect();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], 1, 1], out)?, Op::AvgPool { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs_grad(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// `x W^T + b` for `x: N x D`, `W: O x D`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).shape() != [ws[0]] {
            return Err(shape_err(
                "fully_connected",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.value(b).shape()),
            ));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, d, o, T::one(), self.value(x).data(), d, 1, self.value(w).data(), 1, d, T::zero(), &mut out, o, 1);
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bv).for_each(|(v, &bb)| *v = *v + bb);
        }
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, needs))
    }

    /// Columns `[start, start + len)` of an `N x D` value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || start + len > xs[1] {
            return Err(shape_err("slice", format!("columns {start}..{} of {xs:?}", start + len)));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(xs[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(&[xs[0], len], out)?, Op::SliceCols { x, start }, needs))
    }

    /// Scales each row of an `N x D` value to unit Euclidean norm (zero rows stay zero).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(shape_err("normalize", format!("input {xs:?} must be 2-D")));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(xs[1]) {
            let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::NormalizeRows { x }, needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = *v * c);
        let needs = self.needs_grad(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    /// Multiplies column `j` of an `N x D` value by `factors[j]`.
    pub fn scale_cols(&mut self, x: Var, factors: &[T]) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != factors.len() {
            return Err(shape_err("scale_cols", format!("{} factors for input {xs:?}", factors.len())));
        }
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(xs[1]) {
            row.iter_mut().zip(factors).for_each(|(v, &f)| *v = *v * f);
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            t,
            Op::ScaleCols {
                x,
                factors: factors.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over elements of `0.5 d^2 / beta` if `|d| < beta`, else `|d| - 0.5 beta`,
    /// with `d = x - target`.
    pub fn smooth_l1(&mut self, x: Var, target: &[T], beta: T) -> Result<Var, NnError> {
        let xv = self.value(x).data();
        if xv.len() != target.len() || xv.is_empty() {
            return Err(shape_err(
                "smooth_l1",
                format!("prediction has {} values, target {}", xv.len(), target.len()),
            ));
        }
        let half = T::from_f64(0.5);
        let mut sum = T::zero();
        let mut branches = Vec::with_capacity(xv.len());
        for (&p, &t) in xv.iter().zip(target) {
            let d = p - t;
            let quadratic = d.abs() < beta;
            branches.push(quadratic);
            sum = sum + if quadratic { half * d * d / beta } else { d.abs() - half * beta };
        }
        let loss = sum / T::from_f64(xv.len() as f64);
        branches.into_iter().for_each(|b| self.note_branch(b));
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                beta,
            },
            needs,
        ))
    }

    /// `sum_i w_i x_i` against a constant weight vector.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var, NnError> {
        let xv = self.value(x).data();
        if xv.len() != w.len() {
            return Err(shape_err("dot", format!("{} values against {} weights", xv.len(), w.len())));
        }
        let s = xv.iter().zip(w).fold(T::zero(), |s, (&a, &b)| s + a * b);
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, w: w.to_vec() }, needs))
    }

    /// `sum_i c_i s_i` over single-element values `s_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, NnError> {
        let mut s = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err("weighted_sum", format!("term {:?} is not a scalar", t.shape())));
            }
            s = s + c * t.data()[0];
        }
        let needs = terms.iter().any(|&(v, _)| self.needs_grad(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() }, needs))
    }

    /// Records a caller-computed value produced by `op` from `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs_grad(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse sweep from a single-element value.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::UnknownVar(loss.0));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Gradients::empty(self.store.len());
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if self.nodes[v.0].needs_grad {
                    params.grads[pid] = grads[v.0].take();
                }
            }
        }
        Ok(Grads { params, vars: grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
                cols,
            } => {
                let (o, patch, pos) = (*out_ch, geom.patch(), geom.positions());
                let img = geom.c * geom.h * geom.w;
                if self.needs_grad(*w) {
                    let dw = self.grad_buf(grads, *w);
                    for n in 0..*batch {
                        let dout = &g[n * o * pos..(n + 1) * o * pos];
                        let col = &cols[n * patch * pos..(n + 1) * patch * pos];
                        T::gemm(o, pos, patch, T::one(), dout, pos, 1, col, 1, pos, T::one(), dw, patch, 1);
                    }
                }
                if self.needs_grad(*b) {
                    let db = self.grad_buf(grads, *b);
                    for n in 0..*batch {
                        for (oc, row) in g[n * o * pos..(n + 1) * o * pos].chunks(pos).enumerate() {
                            db[oc] = row.iter().fold(db[oc], |s, &v| s + v);
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let wv = self.value(*w).data();
                    let mut dcol = vec![T::zero(); patch * pos];
                    let dx = self.grad_buf(grads, *x);
                    for n in 0..*batch {
                        let dout = &g[n * o * pos..(n + 1) * o * pos];
                        T::gemm(patch, o, pos, T::one(), wv, 1, patch, dout, pos, 1, T::zero(), &mut dcol, pos, 1);
                        col2im(&dcol, geom, &mut dx[n * img..(n + 1) * img]);
                    }
                }
            }
            Op::Prelu { x, a } => {
                let xs = self.value(*x).shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let xv = self.value(*x).data();
                if self.needs_grad(*a) {
                    let da = self.grad_buf(grads, *a);
                    for (i, (&v, &gi)) in xv.iter().zip(g).enumerate() {
                        if v < T::zero() {
                            let ch = (i / inner) % c;
                            da[ch] = da[ch] + gi * v;
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let av = self.value(*a).data();
                    let dx = self.grad_buf(grads, *x);
                    for (i, (&v, &gi)) in xv.iter().zip(g).enumerate() {
                        let slope = if v > T::zero() { T::one() } else { av[(i / inner) % c] };
                        dx[i] = dx[i] + gi * slope;
                    }
                }
            }
            Op::AvgPool { x } => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let dx = self.grad_buf(grads, *x);
                for (ch, &gi) in dx.chunks_mut(hw).zip(g) {
                    ch.iter_mut().for_each(|v| *v = *v + gi * inv);
                }
            }
            Op::Reshape { x } => {
                let dx = self.grad_buf(grads, *x);
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                if self.needs_grad(*x) {
                    let wv = self.value(*w).data();
                    let dx = self.grad_buf(grads, *x);
                    T::gemm(n, o, d, T::one(), g, o, 1, wv, d, 1, T::one(), dx, d, 1);
                }
                if self.needs_grad(*w) {
                    let xv = self.value(*x).data();
                    let dw = self.grad_buf(grads, *w);
                    T::gemm(o, n, d, T::one(), g, 1, o, xv, d, 1, T::one(), dw, d, 1);
                }
                if self.needs_grad(*b) {
                    let db = self.grad_buf(grads, *b);
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(v, &gi)| *v = *v + gi);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                let dx = self.grad_buf(grads, *x);
                for (row, grow) in dx.chunks_mut(d).zip(g.chunks(len)) {
                    row[*start..*start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(v, &gi)| *v = *v + gi);
                }
            }
            Op::NormalizeRows { x } => {
                let d = self.value(*x).shape()[1];
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = self.grad_buf(grads, *x);
                for r in 0..xv.len() / d {
                    let xr = &xv[r * d..(r + 1) * d];
                    let yr = &yv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let n = xr.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let yg = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for k in 0..d {
                        dx[r * d + k] = dx[r * d + k] + (gr[k] - yr[k] * yg) / n;
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = self.grad_buf(grads, *x);
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *c);
            }
            Op::ScaleCols { x, factors } => {
                let dx = self.grad_buf(grads, *x);
                for (row, grow) in dx.chunks_mut(factors.len()).zip(g.chunks(factors.len())) {
                    for ((d, &gi), &f) in row.iter_mut().zip(grow).zip(factors) {
                        *d = *d + gi * f;
                    }
                }
            }
            Op::SmoothL1 { x, target, beta } => {
                let xv = self.value(*x).data();
                let inv = g[0] / T::from_f64(xv.len() as f64);
                let dx = self.grad_buf(grads, *x);
                for (k, (&p, &t)) in xv.iter().zip(target).enumerate() {
                    let d = p - t;
                    let slope = if d.abs() < *beta { d / *beta } else { d.signum() };
                    dx[k] = dx[k] + inv * slope;
                }
            }
            Op::DotConst { x, w } => {
                let dx = self.grad_buf(grads, *x);
                dx.iter_mut().zip(w).for_each(|(d, &wi)| *d = *d + g[0] * wi);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if self.needs_grad(v) {
                        let dv = self.grad_buf(grads, v);
                        dv[0] = dv[0] + g[0] * c;
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs_grad(v)).collect();
                let parts = op.backward(&ins, &node.value, g, &needs);
                for ((&v, part), &need) in inputs.iter().zip(parts).zip(&needs) {
                    if let (true, Some(part)) = (need, part) {
                        let dv = self.grad_buf(grads, v);
                        dv.iter_mut().zip(&part).for_each(|(d, &p)| *d = *d + p);
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_neighbourhood() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = s.add("b", Tensor::zeros(&[1]));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let (w, b) = (g.param(w), g.param(b));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut s = ParamStore::new();
        let w = s.add("w", t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = s.add("b", Tensor::zeros(&[2]));
        let mut g = Graph::new(&s);
        let data: std::vec::Vec<f64> = (0..2 * 2 * 4 * 5).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.input(t(&[2, 2, 4, 5], &data));
        let (w, b) = (g.param(w), g.param(b));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_shape_errors_name_dimensions() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::zeros(&[1, 2, 3, 3]));
        let b = s.add("b", Tensor::zeros(&[1]));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        let (w, b) = (g.param(w), g.param(b));
        let e = g.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(e.to_string().contains("input channels 3"), "{e}");
        let x2 = g.input(Tensor::zeros(&[1, 2, 1, 1]));
        let e = g.conv2d(x2, w, b, 1, 0).unwrap_err();
        assert!(e.to_string().contains("does not fit"), "{e}");
        let x3 = g.input(Tensor::zeros(&[1, 2, 8, 8]));
        let y = g.conv2d(x3, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn prelu_definition() {
        let mut s = ParamStore::new();
        let a = s.add("a", t(&[1], &[0.25]));
        let mut g = Graph::new(&s);
        let x = g.input(t(&[1, 1, 1, 2], &[3.0, -2.0]));
        let a = g.param(a);
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -0.5]);
    }

    #[test]
    fn pooling_means() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 2.0));
        let y = g.adaptive_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.adaptive_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let x = g.input(Tensor::full(&[2, 3, 5, 7], 1.5));
        let y = g.adaptive_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 1, 1]);
    }

    #[test]
    fn linear_examples() {
        let mut s = ParamStore::new();
        let w = s.add("w", t(&[1, 2], &[3.0, 4.0]));
        let b = s.add("b", t(&[1], &[1.0]));
        let eye = s.add("eye", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = s.add("zero", Tensor::zeros(&[2]));
        let mut g = Graph::new(&s);
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let (w, b) = (g.param(w), g.param(b));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[12.0]);
        let (eye, zero) = (g.param(eye), g.param(zero));
        let y = g.linear(x, eye, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        assert!(g.linear(x, w, zero).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(t(&[1], &[0.5]));
        let y = g.smooth_l1(x, &[0.0], 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.125]);
        let x = g.input(t(&[1], &[2.0]));
        let y = g.smooth_l1(x, &[0.0], 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.5]);
        let x = g.input(t(&[3], &[0.1, -7.0, 2.0]));
        let y = g.smooth_l1(x, &[0.1, -7.0, 2.0], 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn shared_parameter_accumulates_both_uses() {
        let mut s = ParamStore::new();
        let w = s.add("w", t(&[1, 1], &[2.0]));
        let b = s.add("b", t(&[1], &[0.0]));
        let mut g = Graph::new(&s);
        let x1 = g.input(t(&[1, 1], &[3.0]));
        let x2 = g.input(t(&[1, 1], &[5.0]));
        let (wv, bv) = (g.param(w), g.param(b));
        assert_eq!(g.param(w), wv);
        let y1 = g.linear(x1, wv, bv).unwrap();
        let y2 = g.linear(x2, wv, bv).unwrap();
        let l = g.weighted_sum(&[(y1, 1.0), (y2, 1.0)]).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params.get(w).unwrap(), &[8.0]);
        assert_eq!(grads.params.get(b).unwrap(), &[2.0]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", t(&[1, 1], &[2.0]));
        let b = s.add("b", t(&[1], &[0.0]));
        s.set_frozen(w, true);
        let mut g = Graph::new(&s);
        let x = g.input(t(&[1, 1], &[3.0]));
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.linear(x, wv, bv).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.params.get(w).is_none());
        assert_eq!(grads.params.get(b).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::<f64>::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = g.normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
