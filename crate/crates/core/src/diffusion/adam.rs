use serde::{Deserialize, Serialize};

use crate::denoiser::Weights;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per tensor in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Weights<Matrix<T>>) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .tensors()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update<T: Scalar>(
    params: &mut Weights<Matrix<T>>,
    grads: &Weights<Matrix<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} moment slots",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let (lr, eps) = (T::from_f64_lossy(cfg.lr), T::from_f64_lossy(cfg.eps));

    let mut i = 0;
    let mut shape_err = None;
    params.visit_mut(&mut |p| {
        let g = grads[i];
        if g.shape() != p.shape() && shape_err.is_none() {
            shape_err = Some(format!("gradient {i}: {:?} vs {:?}", g.shape(), p.shape()));
        }
        if shape_err.is_none() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((w, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        i += 1;
    });
    match shape_err {
        Some(msg) => Err(Error::Shape(msg)),
        None => Ok(()),
    }
}
