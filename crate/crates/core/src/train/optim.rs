use crate::error::{Result, SituError};
use crate::kernel::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamaxParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First moment and infinity-norm accumulator for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub u: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamaxState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            u: zeros(),
        }
    }
}

/// One Adamax update in place.
pub fn adamax_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamaxState<T>,
    lr: f64,
    hp: AdamaxParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.u.len() {
        return Err(SituError::shape(
            "adamax_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(SituError::shape(
                "adamax_step",
                format!("parameter {} has shape {:?}, gradient {:?}", i, p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let b1 = T::lit(hp.beta1);
    let b2 = T::lit(hp.beta2);
    let eps = T::lit(hp.eps);
    let step_size = T::lit(lr / (1.0 - hp.beta1.powi(state.step as i32)));
    for ((p, g), (m, u)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.u.iter_mut()))
    {
        for (((x, &g), m), u) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(u.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *u = (b2 * *u).max(g.abs());
            *x -= step_size * *m / (*u + eps);
        }
    }
    Ok(())
}

/// Exponential decay: `lr0 * gamma^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}
