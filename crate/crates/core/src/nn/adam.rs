use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::{NnError, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |id| alloc::vec![T::zero(); store.get(id).len()];
        Adam {
            config,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every unfrozen parameter that has a gradient.
    /// All gradients are checked before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.len() != store.get(id).len() {
                    return Err(super::shape_err(
                        "adam",
                        alloc::format!("gradient for `{}` has {} values, parameter {}", store.name(id), g.len(), store.get(id).len()),
                    ));
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(NnError::NonFiniteGradient {
                        param: store.name(id).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &gi), mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::<f64>::new();
        let p = s.add("p", Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s);
        let mut g = Gradients::empty(1);
        // gradient of 1.0 built through a graph: d(p)/dp
        let mut graph = Graph::new(&s);
        let pv = graph.param(p);
        g.accumulate(&graph.backward(pv).unwrap().params, 1.0);
        adam.step(&mut s, &g).unwrap();
        assert!((s.get(p).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::<f32>::new();
        let p = s.add("p", Tensor::new(&[2], alloc::vec![1.5, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let mut graph = Graph::new(&s);
        let pv = graph.param(p);
        let l = graph.dot_const(pv, &[0.0, 0.0]).unwrap();
        let g = graph.backward(l).unwrap().params;
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get(p).data(), &[1.5, -2.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        let p = s.add("head.w", Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let mut graph = Graph::new(&s);
        let pv = graph.param(p);
        let l = graph.dot_const(pv, &[f64::NAN]).unwrap();
        let g = graph.backward(l).unwrap().params;
        let e = adam.step(&mut s, &g).unwrap_err();
        assert_eq!(e, NnError::NonFiniteGradient { param: "head.w".into() });
        assert_eq!(s.get(p).data(), &[1.0]);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        // f(a, b) = (a - 1)^2 + 3 (b + 2)^2
        let mut s = ParamStore::<f64>::new();
        let p = s.add("p", Tensor::new(&[2], alloc::vec![4.0, 3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, &s);
        let f = |v: &[f64]| (v[0] - 1.0).powi(2) + 3.0 * (v[1] + 2.0).powi(2);
        let mut prev = f(s.get(p).data());
        for _ in 0..100 {
            let v = s.get(p).data().to_vec();
            let mut g = Gradients::empty(1);
            let mut graph = Graph::new(&s);
            let pv = graph.param(p);
            let l = graph.dot_const(pv, &[2.0 * (v[0] - 1.0), 6.0 * (v[1] + 2.0)]).unwrap();
            g.accumulate(&graph.backward(l).unwrap().params, 1.0);
            adam.step(&mut s, &g).unwrap();
            let now = f(s.get(p).data());
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }
}
