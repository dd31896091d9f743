//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::params::{NamedGrads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter name and a
/// shared step counter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// Applies one update to every parameter named in `grads`. Parameters
    /// absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &NamedGrads<T>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name)?;
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut NamedGrads<T>, max_norm: f64) -> f64 {
    let total: f64 = grads.values().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::lit(max_norm / total);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|e| *e = *e * s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> (ParamStore<f64>, NamedGrads<f64>) {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(1.5));
        let mut g = NamedGrads::new();
        g.insert(name.to_string(), Tensor::scalar(v));
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, g) = single("w", 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for gv in [3.0, -0.02, 1e3] {
            let (mut p, g) = single("w", gv);
            let cfg = AdamConfig::default();
            let mut adam = Adam::new(cfg);
            adam.step(&mut p, &g).unwrap();
            let delta = p.get("w").unwrap().item() - 1.5;
            // mhat = g, vhat = g², so the step is lr·g/(|g|+eps).
            let expected = -cfg.lr * gv / (gv.abs() + cfg.eps);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
            assert!((delta.abs() - cfg.lr).abs() < 1e-9);
        }
    }

    #[test]
    fn second_moment_after_two_identical_steps() {
        let (mut p, g) = single("w", 0.7);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg);
        adam.step(&mut p, &g).unwrap();
        adam.step(&mut p, &g).unwrap();
        // v1 = (1-b2)g², v2 = b2·v1 + (1-b2)g² = (1-b2²)g².
        let v = adam.second_moment("w").unwrap().item();
        let expected = (1.0 - cfg.beta2 * cfg.beta2) * 0.49;
        assert!((v - expected).abs() < 1e-15);
        let vhat = v / (1.0 - cfg.beta2.powi(2));
        assert!((vhat - 0.49).abs() < 1e-12);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn shape_mismatch_is_rejected_before_any_update() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a", Tensor::zeros(&[2]));
        p.insert("b", Tensor::zeros(&[3]));
        let mut g = NamedGrads::new();
        g.insert("a".into(), Tensor::filled(&[2], 1.0));
        g.insert("b".into(), Tensor::filled(&[2], 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut p, &g).is_err());
        assert_eq!(p.get("a").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn moment_buffers_match_param_shape() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::zeros(&[4, 3]));
        let mut g = NamedGrads::new();
        g.insert("w".into(), Tensor::filled(&[4, 3], 0.5));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        assert_eq!(adam.first_moment("w").unwrap().shape(), &[4, 3]);
        assert_eq!(adam.second_moment("w").unwrap().shape(), &[4, 3]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = NamedGrads::<f64>::new();
        g.insert("a".into(), Tensor::filled(&[4], 10.0));
        let before = clip_grad_norm(&mut g, 10.0);
        assert_eq!(before, 20.0);
        let after = g["a"].sum_sq().sqrt();
        assert!((after - 10.0).abs() < 1e-12);
    }
}
