//! AdamW with bias correction, decoupled weight decay and global grad-norm
//! clipping. One optimizer owns moment buffers for one [`ParamStore`];
//! frozen parameters must never appear in a step.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-6, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<S>) -> Self {
        AdamW { cfg, m: (0..store.len()).map(|_| None).collect(), v: (0..store.len()).map(|_| None).collect(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over the given (param, grad) pairs. Clipping is global
    /// across all pairs; iteration order is the caller's, which [`GradAccum`]
    /// keeps in ascending ParamId.
    ///
    /// [`GradAccum`]: crate::params::GradAccum
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)]) -> Result<StepStats> {
        let mut sq_norm = 0.0f64;
        for (id, g) in grads {
            if store.is_frozen(*id) {
                return Err(NumericsError::InvalidArgument {
                    context: "adamw_step".into(),
                    detail: format!("gradient supplied for frozen parameter {}", store.name(*id)),
                });
            }
            g.check_finite("adamw_step gradient")?;
            if g.shape() != store.get(*id).shape() {
                return Err(NumericsError::ShapeMismatch {
                    context: "adamw_step".into(),
                    detail: format!("{} grad {:?} vs param {:?}", store.name(*id), g.shape(), store.get(*id).shape()),
                });
            }
            sq_norm += g.squared_norm().to_f64_c();
        }
        let grad_norm = sq_norm.sqrt();
        let clip_scale = if grad_norm > self.cfg.clip_norm && grad_norm > 0.0 {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = S::from_f64_c(self.cfg.beta1);
        let b2 = S::from_f64_c(self.cfg.beta2);
        let one_m_b1 = S::from_f64_c(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64_c(1.0 - self.cfg.beta2);
        let scale = S::from_f64_c(clip_scale);
        let lr = S::from_f64_c(self.cfg.lr);
        let eps = S::from_f64_c(self.cfg.eps);
        let inv_bc1 = S::from_f64_c(1.0 / bc1);
        let inv_bc2 = S::from_f64_c(1.0 / bc2);
        let wd = S::from_f64_c(self.cfg.lr * self.cfg.weight_decay);

        for (id, g) in grads {
            let i = id.0;
            let n = g.len();
            if self.m[i].is_none() {
                self.m[i] = Some(Tensor::zeros(g.shape()));
                self.v[i] = Some(Tensor::zeros(g.shape()));
            }
            let m = self.m[i].as_mut().unwrap().data_mut();
            let v = self.v[i].as_mut().unwrap().data_mut();
            let mut theta = store.get(*id).clone();
            let td = theta.data_mut();
            let gd = g.data();
            for j in 0..n {
                let gj = gd[j] * scale;
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                td[j] = td[j] - lr * (m_hat / (v_hat.sqrt() + eps)) - wd * td[j];
            }
            theta.check_finite("adamw_step update")?;
            store.set(*id, theta);
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}

/// Linear warm-up to `base_lr` over `warmup` steps, flat afterwards.
pub fn lr_at(base_lr: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(value));
        (s, id)
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // g=1, lr=0.1: m_hat = 1, v_hat = 1, update = -0.1 / (1 + 1e-6)
        let (mut s, id) = one_param(0.0);
        let cfg = AdamWConfig { lr: 0.1, clip_norm: 1e9, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        let got = s.get(id).data()[0];
        let want = -0.1 / (1.0 + 1e-6);
        assert!((got - want).abs() < 1e-12, "got {got}");
        assert!((got - (-0.0999999)).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameters_unchanged() {
        let (mut s, id) = one_param(1.25);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(s.get(id).data()[0], 1.25);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn global_clip_rescales_to_threshold() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let a = s.register("a", Tensor::scalar(0.0));
        let b = s.register("b", Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamWConfig { clip_norm: 1.0, ..Default::default() }, &s);
        // grads (6, 8): norm 10, scale must be 0.1
        let stats = opt
            .step(&mut s, &[(a, Tensor::scalar(6.0)), (b, Tensor::scalar(8.0))])
            .unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert!((stats.clip_scale - 0.1).abs() < 1e-12);
    }

    #[test]
    fn under_threshold_grads_are_not_rescaled() {
        let (mut s, id) = one_param(0.0);
        let mut opt = AdamW::new(AdamWConfig { clip_norm: 1.0, ..Default::default() }, &s);
        let stats = opt.step(&mut s, &[(id, Tensor::scalar(0.5))]).unwrap();
        assert_eq!(stats.clip_scale, 1.0);
    }

    #[test]
    fn frozen_parameter_in_step_is_an_error() {
        let (mut s, id) = one_param(0.0);
        s.freeze_prefix("w");
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(opt.step(&mut s, &[(id, Tensor::scalar(1.0))]).is_err());
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let (mut s, id) = one_param(2.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        // theta <- theta - lr*wd*theta = 2 * (1 - 0.05)
        assert!((s.get(id).data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let (mut s, id) = one_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut bad = Tensor::scalar(0.0);
        bad.data_mut()[0] = f64::NAN;
        assert!(opt.step(&mut s, &[(id, bad)]).is_err());
    }

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        assert!((lr_at(1.0, 10, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(1.0, 10, 4) - 0.5).abs() < 1e-12);
        assert_eq!(lr_at(1.0, 10, 10), 1.0);
        assert_eq!(lr_at(1.0, 0, 0), 1.0);
    }
}
