//! ODE integration of learned velocity fields, shared by latent-space and
//! pixel-space samplers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};

/// Sampler settings shared by every generation entry point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Euler steps (>= 1).
    pub steps: usize,
    /// Guidance scale w >= 0; 1.0 means pure conditional (off), 0.0 means
    /// unconditional branch only.
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 32, guidance: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(NumericsError::InvalidArgument {
                context: "SamplerConfig".into(),
                detail: "steps must be >= 1".into(),
            });
        }
        if !(self.guidance >= 0.0) {
            return Err(NumericsError::InvalidArgument {
                context: "SamplerConfig".into(),
                detail: format!("guidance must be >= 0, got {}", self.guidance),
            });
        }
        Ok(())
    }
}

/// Straight-path interpolant z_t = t * z1 + (1 - t) * eps; t must lie in
/// [0, 1].
pub fn interpolate<S: Scalar>(z1: &Tensor<S>, eps: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(NumericsError::InvalidArgument {
            context: "interpolate".into(),
            detail: format!("t must lie in [0,1], got {t}"),
        });
    }
    if z1.shape() != eps.shape() {
        return Err(NumericsError::ShapeMismatch {
            context: "interpolate".into(),
            detail: format!("{:?} vs {:?}", z1.shape(), eps.shape()),
        });
    }
    let ts = S::from_f64_c(t);
    let one_m_t = S::from_f64_c(1.0 - t);
    let mut out = z1.clone();
    let od = out.data_mut();
    for (x, &e) in od.iter_mut().zip(eps.data().iter()) {
        *x = ts * *x + one_m_t * e;
    }
    Ok(out)
}

/// Supervision target for the straight path: v = z1 - eps, independent of t.
pub fn target_velocity<S: Scalar>(z1: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    if z1.shape() != eps.shape() {
        return Err(NumericsError::ShapeMismatch {
            context: "target_velocity".into(),
            detail: format!("{:?} vs {:?}", z1.shape(), eps.shape()),
        });
    }
    let mut out = z1.clone();
    let od = out.data_mut();
    for (x, &e) in od.iter_mut().zip(eps.data().iter()) {
        *x -= e;
    }
    Ok(out)
}

/// Integrates dz/dt = v(z, t) from t = 0 to t = 1 with fixed-step Euler:
/// z <- z + dt * v(z, t), t taken at the left endpoint of each step.
/// Exact for constant-direction straight paths.
pub fn euler_integrate<S, F>(v_fn: &mut F, z0: &Tensor<S>, steps: usize) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>, f64) -> Result<Tensor<S>>,
{
    if steps == 0 {
        return Err(NumericsError::InvalidArgument {
            context: "euler_integrate".into(),
            detail: "steps must be >= 1".into(),
        });
    }
    let dt = S::from_f64_c(1.0 / steps as f64);
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = v_fn(&z, t)?;
        if v.shape() != z.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "euler_integrate".into(),
                detail: format!("velocity {:?} vs state {:?} at step {k}", v.shape(), z.shape()),
            });
        }
        let zd = z.data_mut();
        for (zi, &vi) in zd.iter_mut().zip(v.data().iter()) {
            *zi += dt * vi;
        }
        if !z.all_finite() {
            return Err(NumericsError::NonFinite { context: format!("euler_integrate state after step {k}") });
        }
    }
    Ok(z)
}

/// Classifier-free guidance combination: v = v_uncond + w * (v_cond - v_uncond).
pub fn guide<S: Scalar>(v_uncond: &Tensor<S>, v_cond: &Tensor<S>, w: f64) -> Result<Tensor<S>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(NumericsError::ShapeMismatch {
            context: "guide".into(),
            detail: format!("{:?} vs {:?}", v_uncond.shape(), v_cond.shape()),
        });
    }
    let ws = S::from_f64_c(w);
    let mut out = v_uncond.clone();
    let od = out.data_mut();
    for (o, &c) in od.iter_mut().zip(v_cond.data().iter()) {
        *o += ws * (c - *o);
    }
    Ok(out)
}
