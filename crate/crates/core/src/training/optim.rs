//! AdamW with decoupled weight decay and global-norm clipping.

use crate::error::{Error, Result};
use crate::moe::ModelParams;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per tensor.
#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Moments { m, v, step: 0 }
    }

    pub fn for_params(params: &ModelParams<T>) -> Self {
        Self::zeros_like(params.tensors().iter().map(|p| p.value.shape()))
    }
}

/// One AdamW update of a single tensor. The moments must already have
/// `moments.step` incremented for this step.
pub fn adamw_update<T: Scalar>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    m: &mut Matrix<T>,
    v: &mut Matrix<T>,
    step: u64,
    config: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::shape(
            "adamw_update",
            format!("param {:?}, grad {:?}, moments {:?}/{:?}", param.shape(), grad.shape(), m.shape(), v.shape()),
        ));
    }
    let AdamWConfig {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
    } = *config;
    let bias1 = 1.0 - beta1.powi(step as i32);
    let bias2 = 1.0 - beta2.powi(step as i32);
    let shrink = if decay { 1.0 - lr * weight_decay } else { 1.0 };
    let p = param.as_mut_slice().iter_mut();
    let mv = m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut());
    for ((p, (m, v)), g) in p.zip(mv).zip(grad.as_slice()) {
        let g = g.as_f64();
        let m_new = beta1 * m.as_f64() + (1.0 - beta1) * g;
        let v_new = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
        *m = T::from_f64_lossy(m_new);
        *v = T::from_f64_lossy(v_new);
        let m_hat = m_new / bias1;
        let v_hat = v_new / bias2;
        let updated = p.as_f64() * shrink - lr * m_hat / (v_hat.sqrt() + eps);
        *p = T::from_f64_lossy(updated);
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// Applies one AdamW step to every trainable tensor of `params`. `grads`
/// follows [`ModelParams::tensors`] order; entries of buffers are ignored.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Matrix<T>],
    moments: &mut Moments<T>,
    config: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || moments.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), moments.m.len()),
        ));
    }
    moments.step += 1;
    let step = moments.step;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let role = params.tensors()[i].role;
        if !role.trainable() {
            continue;
        }
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        adamw_update(params.get_mut(id), &grads[i], m, v, step, config, role.decays())?;
    }
    Ok(())
}
